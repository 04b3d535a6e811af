//! Contrastive landmark scorer.
//!
//! A two-layer network `sigmoid(w2 . relu(W1 x + b1) + b2)` maps a state
//! vector to a score in [0, 1]. For a positive/negative trajectory pair with
//! score sums `S_p` and `S_n` over their distinct states the training loss is
//! `softplus(S_n - S_p) = -log(exp(S_p) / (exp(S_p) + exp(S_n)))`, written so
//! that long trajectories do not overflow.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{AtomIndex, SymbolicState};
use crate::seed;
use crate::trajectory::{sample_pair_indices, Dataset, Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("input has {got} entries, scorer expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("trajectory has no states")]
    EmptyTrajectory,
    #[error("training diverged at epoch {epoch}: mean loss {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("state outside the scorer vocabulary: {0}")]
    Vocabulary(#[from] crate::logic::LogicError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("malformed scorer parameters: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub hidden_dim: usize,
    pub input_dim: usize,
    #[serde(default)]
    pub vocab_hash: String,
    /// hidden_dim rows of input_dim weights.
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl ScorerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        ScorerParams {
            hidden_dim,
            input_dim,
            vocab_hash: String::new(),
            w1: vec![vec![0.0; input_dim]; hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
        }
    }

    /// Uniform initialization in [-0.1, 0.1].
    pub fn random(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut draw = || rng.gen_range(-0.1..=0.1);
        let mut p = ScorerParams::zeros(input_dim, hidden_dim);
        for row in &mut p.w1 {
            for w in row.iter_mut() {
                *w = draw();
            }
        }
        for b in &mut p.b1 {
            *b = draw();
        }
        for w in &mut p.w2 {
            *w = draw();
        }
        p.b2 = draw();
        p
    }

    pub fn num_params(&self) -> usize {
        self.hidden_dim * self.input_dim + 2 * self.hidden_dim + 1
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().flatten().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite())
            && self.b2.is_finite()
    }

    /// Flat parameter view: W1 row-major, b1, w2, b2.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.w1.iter().flatten().copied().collect();
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn from_flat(&self, flat: &[f64]) -> Self {
        let (h, d) = (self.hidden_dim, self.input_dim);
        let mut p = self.clone();
        for (j, row) in p.w1.iter_mut().enumerate() {
            row.copy_from_slice(&flat[j * d..(j + 1) * d]);
        }
        p.b1.copy_from_slice(&flat[h * d..h * d + h]);
        p.w2.copy_from_slice(&flat[h * d + h..h * d + 2 * h]);
        p.b2 = flat[h * d + 2 * h];
        p
    }

    fn check(&self) -> Result<(), ScorerError> {
        let ok = self.w1.len() == self.hidden_dim
            && self.w1.iter().all(|r| r.len() == self.input_dim)
            && self.b1.len() == self.hidden_dim
            && self.w2.len() == self.hidden_dim;
        if ok {
            Ok(())
        } else {
            Err(ScorerError::Format("inconsistent parameter shapes".into()))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ScorerError> {
        let p: ScorerParams =
            serde_json::from_str(text).map_err(|e| ScorerError::Format(e.to_string()))?;
        p.check()?;
        Ok(p)
    }

    /// Hidden pre-activations for a binary input given by its active
    /// coordinates.
    fn hidden_pre(&self, active: &[usize]) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| b + active.iter().map(|&i| row[i]).sum::<f64>())
            .collect()
    }

    fn output_from_pre(&self, pre: &[f64]) -> f64 {
        let z = self.b2
            + pre
                .iter()
                .zip(&self.w2)
                .map(|(a, w)| a.max(0.0) * w)
                .sum::<f64>();
        sigmoid(z)
    }

    /// Score of a binary state given by its active coordinates.
    pub fn score_active(&self, active: &[usize]) -> f64 {
        self.output_from_pre(&self.hidden_pre(active))
    }
}

/// Score of a dense input vector.
pub fn score(params: &ScorerParams, x: &[f64]) -> Result<f64, ScorerError> {
    if x.len() != params.input_dim {
        return Err(ScorerError::ShapeMismatch {
            expected: params.input_dim,
            got: x.len(),
        });
    }
    let pre: Vec<f64> = params
        .w1
        .iter()
        .zip(&params.b1)
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    Ok(params.output_from_pre(&pre))
}

/// A trajectory as the set of binary states it visits, each with weight 1.
///
/// Sums run over distinct states: a failed episode that idles in one state
/// for fifty steps counts that state once.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTrajectory {
    pub states: Vec<(Vec<usize>, f64)>,
}

impl EncodedTrajectory {
    pub fn new(index: &AtomIndex, traj: &Trajectory) -> Result<Self, ScorerError> {
        Self::from_states(index, &traj.states)
    }

    pub fn from_states(index: &AtomIndex, states: &[SymbolicState]) -> Result<Self, ScorerError> {
        let distinct: BTreeSet<Vec<usize>> =
            states.iter().map(|s| index.active(s)).collect::<Result<_, _>>()?;
        Ok(EncodedTrajectory {
            states: distinct.into_iter().map(|a| (a, 1.0)).collect(),
        })
    }

    fn score_sum(&self, params: &ScorerParams) -> f64 {
        self.states
            .iter()
            .map(|(a, c)| c * params.score_active(a))
            .sum()
    }
}

/// Accumulates `coef * d score(x) / d params` into `grad` (flat layout).
fn accumulate_score_grad(params: &ScorerParams, active: &[usize], coef: f64, grad: &mut [f64]) {
    let (h, d) = (params.hidden_dim, params.input_dim);
    let pre = params.hidden_pre(active);
    let s = params.output_from_pre(&pre);
    let dz = coef * s * (1.0 - s);
    for j in 0..h {
        let a = pre[j];
        let relu = a.max(0.0);
        grad[h * d + h + j] += dz * relu;
        if a > 0.0 {
            let dh = dz * params.w2[j];
            for &i in active {
                grad[j * d + i] += dh;
            }
            grad[h * d + j] += dh;
        }
    }
    grad[h * d + 2 * h] += dz;
}

/// Loss of one pair and its gradient (flat layout).
pub fn pair_loss_grad(
    params: &ScorerParams,
    pos: &EncodedTrajectory,
    neg: &EncodedTrajectory,
) -> Result<(f64, Vec<f64>), ScorerError> {
    let mut grad = vec![0.0; params.num_params()];
    let loss = pair_loss_grad_into(params, pos, neg, 1.0, &mut grad)?;
    Ok((loss, grad))
}

fn pair_loss_grad_into(
    params: &ScorerParams,
    pos: &EncodedTrajectory,
    neg: &EncodedTrajectory,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64, ScorerError> {
    if pos.states.is_empty() || neg.states.is_empty() {
        return Err(ScorerError::EmptyTrajectory);
    }
    let diff = neg.score_sum(params) - pos.score_sum(params);
    let g = sigmoid(diff) * scale;
    for (a, c) in &neg.states {
        accumulate_score_grad(params, a, g * c, grad);
    }
    for (a, c) in &pos.states {
        accumulate_score_grad(params, a, -g * c, grad);
    }
    Ok(softplus(diff))
}

pub fn pair_loss_encoded(
    params: &ScorerParams,
    pos: &EncodedTrajectory,
    neg: &EncodedTrajectory,
) -> Result<f64, ScorerError> {
    if pos.states.is_empty() || neg.states.is_empty() {
        return Err(ScorerError::EmptyTrajectory);
    }
    Ok(softplus(neg.score_sum(params) - pos.score_sum(params)))
}

/// Contrastive loss of a positive/negative pair.
pub fn pair_loss(
    params: &ScorerParams,
    index: &AtomIndex,
    pos: &Trajectory,
    neg: &Trajectory,
) -> Result<f64, ScorerError> {
    pair_loss_encoded(
        params,
        &EncodedTrajectory::new(index, pos)?,
        &EncodedTrajectory::new(index, neg)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            epochs: 3000,
            pairs_per_epoch: 32,
            hidden_dim: 32,
            seed: 0,
            threshold: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ScorerError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ScorerError::InvalidConfig("threshold must lie in (0, 1)".into()));
        }
        if self.hidden_dim == 0 || self.pairs_per_epoch == 0 {
            return Err(ScorerError::InvalidConfig(
                "hidden_dim and pairs_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedScorer {
    pub params: ScorerParams,
    /// Mean pair loss of each epoch's batch, measured before its update.
    pub loss_curve: Vec<f64>,
}

impl TrainedScorer {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            writeln!(out, "{i},{l}").expect("string write");
        }
        out
    }
}

/// Full-batch gradient descent on the mean loss of freshly drawn pairs.
pub fn train(
    dataset: &Dataset,
    index: &AtomIndex,
    config: &TrainConfig,
) -> Result<TrainedScorer, ScorerError> {
    config.validate()?;
    let mut rng = seed::rng(config.seed);
    // Probe both sides up front so an empty side fails before any work.
    sample_pair_indices(dataset, &mut seed::rng(config.seed))?;
    let encode = |ts: &[Trajectory]| -> Result<Vec<EncodedTrajectory>, ScorerError> {
        ts.iter().map(|t| EncodedTrajectory::new(index, t)).collect()
    };
    let pos = encode(&dataset.positives)?;
    let neg = encode(&dataset.negatives)?;
    let mut params = ScorerParams::random(index.len(), config.hidden_dim, config.seed);
    let mut curve = Vec::with_capacity(config.epochs);
    let scale = 1.0 / config.pairs_per_epoch as f64;
    for epoch in 0..config.epochs {
        let mut grad = vec![0.0; params.num_params()];
        let mut loss = 0.0;
        for _ in 0..config.pairs_per_epoch {
            let (p, n) = sample_pair_indices(dataset, &mut rng)?;
            loss += pair_loss_grad_into(&params, &pos[p], &neg[n], scale, &mut grad)? * scale;
        }
        if !loss.is_finite() {
            return Err(ScorerError::DivergedLoss { epoch, loss });
        }
        curve.push(loss);
        let mut flat = params.flatten();
        for (w, g) in flat.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
        params = params.from_flat(&flat);
        if !params.is_finite() {
            return Err(ScorerError::DivergedLoss {
                epoch,
                loss: f64::NAN,
            });
        }
    }
    Ok(TrainedScorer {
        params,
        loss_curve: curve,
    })
}

/// Distinct states of positive trajectories scoring at least `threshold`.
pub fn candidates(
    params: &ScorerParams,
    index: &AtomIndex,
    dataset: &Dataset,
    threshold: f64,
) -> Result<BTreeSet<SymbolicState>, ScorerError> {
    let mut out = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for t in &dataset.positives {
        for s in &t.states {
            if seen.contains(s) {
                continue;
            }
            seen.insert(s.clone());
            if params.score_active(&index.active(s)?) >= threshold {
                out.insert(s.clone());
            }
        }
    }
    Ok(out)
}

/// Score of every distinct positive-trajectory state, in state order.
pub fn positive_state_scores(
    params: &ScorerParams,
    index: &AtomIndex,
    dataset: &Dataset,
) -> Result<Vec<(SymbolicState, f64)>, ScorerError> {
    let unique: BTreeSet<&SymbolicState> =
        dataset.positives.iter().flat_map(|t| &t.states).collect();
    unique
        .into_iter()
        .map(|s| Ok((s.clone(), params.score_active(&index.active(s)?))))
        .collect()
}
