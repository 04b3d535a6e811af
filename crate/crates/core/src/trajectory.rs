//! Labeled trajectory collection, JSONL persistence and pair sampling.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, Action, EnvConfig, EnvError, Terminal};
use crate::logic::{AtomIndex, SymbolicState};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("quotas must be at least 1 (got {n_pos} positive, {n_neg} negative)")]
    InvalidQuota { n_pos: usize, n_neg: usize },
    #[error("quota unreachable after {episodes} episodes: {positives} positive, {negatives} negative collected")]
    QuotaUnreachable {
        episodes: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("cannot sample a pair: no {0} trajectories")]
    EmptySide(Label),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

/// One episode: `states` has one more entry than `actions` and `rewards`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub label: Label,
    pub seed: u64,
    #[serde(rename = "env")]
    pub env_name: String,
    pub states: Vec<SymbolicState>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn check(&self) -> Result<(), String> {
        if self.states.is_empty() {
            return Err("trajectory has no states".into());
        }
        if self.actions.len() + 1 != self.states.len() || self.rewards.len() != self.actions.len() {
            return Err(format!(
                "length mismatch: {} states, {} actions, {} rewards",
                self.states.len(),
                self.actions.len(),
                self.rewards.len()
            ));
        }
        Ok(())
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// True if some state contains every atom of `conj`.
    pub fn visits(&self, conj: &std::collections::BTreeSet<crate::GroundAtom>) -> bool {
        self.states.iter().any(|s| s.satisfies(conj))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub positives: Vec<Trajectory>,
    pub negatives: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.positives.iter().chain(&self.negatives)
    }
}

fn default_stall() -> f64 {
    0.0
}

/// Behaviour policy used to harvest trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CollectorSpec {
    /// Scripted agent that takes a uniformly random action with probability
    /// `epsilon`. With probability `stall_prob`, checked at the start and
    /// after every completed subtask, it gives up and idles for the rest of
    /// the episode; this is the main success-rate knob.
    Scripted {
        epsilon: f64,
        #[serde(default = "default_stall")]
        stall_prob: f64,
    },
    /// Linear softmax policy over state vectors, trained with REINFORCE for
    /// `train_episodes` before harvesting.
    Neural {
        train_episodes: usize,
        learning_rate: f64,
    },
}

impl Default for CollectorSpec {
    fn default() -> Self {
        CollectorSpec::Scripted {
            epsilon: 0.3,
            stall_prob: 0.2,
        }
    }
}

const BATCH: usize = 128;

/// Run episodes until `n_pos` successful and `n_neg` failed trajectories are
/// collected. Episodes are generated in parallel but assembled in episode
/// order, so the result depends only on the arguments.
pub fn collect(
    config: &EnvConfig,
    collector: &CollectorSpec,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<Dataset, TrajectoryError> {
    if n_pos == 0 || n_neg == 0 {
        return Err(TrajectoryError::InvalidQuota { n_pos, n_neg });
    }
    config.validate()?;
    let policy = match collector {
        CollectorSpec::Neural {
            train_episodes,
            learning_rate,
        } => Some(LinearPolicy::train(
            config,
            *train_episodes,
            *learning_rate,
            seed::derive_seed(seed, "collector-train"),
        )?),
        CollectorSpec::Scripted { .. } => None,
    };
    let cap = 100 * (n_pos + n_neg);
    let mut data = Dataset::default();
    let mut next = 0usize;
    while data.positives.len() < n_pos || data.negatives.len() < n_neg {
        if next >= cap {
            return Err(TrajectoryError::QuotaUnreachable {
                episodes: next,
                positives: data.positives.len(),
                negatives: data.negatives.len(),
            });
        }
        let end = (next + BATCH).min(cap);
        let batch: Vec<Trajectory> = (next..end)
            .into_par_iter()
            .map(|i| {
                let env_seed = seed::stream_seed(seed, i as u64);
                let agent_seed = seed::stream_seed(seed::derive_seed(seed, "agent"), i as u64);
                run_episode(config, collector, policy.as_ref(), env_seed, agent_seed)
            })
            .collect::<Result<_, _>>()?;
        for t in batch {
            match t.label {
                Label::Positive if data.positives.len() < n_pos => data.positives.push(t),
                Label::Negative if data.negatives.len() < n_neg => data.negatives.push(t),
                _ => {}
            }
        }
        next = end;
    }
    Ok(data)
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    Action::ALL[rng.gen_range(0..Action::ALL.len())]
}

fn run_episode(
    config: &EnvConfig,
    collector: &CollectorSpec,
    policy: Option<&LinearPolicy>,
    env_seed: u64,
    agent_seed: u64,
) -> Result<Trajectory, TrajectoryError> {
    let mut rng = seed::rng(agent_seed);
    let mut state = env::reset(&config.with_seed(env_seed))?;
    let mut traj = Trajectory {
        label: Label::Negative,
        seed: env_seed,
        env_name: config.env_name.as_str().to_string(),
        states: vec![env::symbolize(&state)],
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    let mut stalled = false;
    let mut checked_progress = usize::MAX;
    while state.terminal.is_none() {
        let action = match (collector, policy) {
            (CollectorSpec::Scripted { epsilon, stall_prob }, _) => {
                if state.progress() != checked_progress {
                    checked_progress = state.progress();
                    stalled |= rng.gen::<f64>() < *stall_prob;
                }
                if stalled {
                    Action::Noop
                } else if rng.gen::<f64>() < *epsilon {
                    random_action(&mut rng)
                } else {
                    env::scripted_action(&state)
                }
            }
            (_, Some(p)) => p.sample(traj.states.last().expect("nonempty"), &mut rng),
            (_, None) => unreachable!("neural collector is trained before harvesting"),
        };
        let (next, reward, _) = env::step(&state, action)?;
        state = next;
        traj.actions.push(action);
        traj.rewards.push(reward);
        traj.states.push(env::symbolize(&state));
    }
    if state.terminal == Some(Terminal::Success) {
        traj.label = Label::Positive;
    }
    Ok(traj)
}

/// Softmax policy with one weight row per action over the state vector.
struct LinearPolicy {
    index: AtomIndex,
    weights: Vec<Vec<f64>>,
}

impl LinearPolicy {
    fn logits(&self, active: &[usize]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| active.iter().map(|&i| row[i]).sum::<f64>() + row[self.index.len()])
            .collect()
    }

    fn probs(&self, state: &SymbolicState) -> (Vec<usize>, Vec<f64>) {
        let active = self.index.active(state).unwrap_or_default();
        let logits = self.logits(&active);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        (active, exps.into_iter().map(|e| e / z).collect())
    }

    fn sample(&self, state: &SymbolicState, rng: &mut ChaCha8Rng) -> Action {
        let (_, probs) = self.probs(state);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, p) in Action::ALL.iter().zip(&probs) {
            acc += p;
            if u < acc {
                return *a;
            }
        }
        Action::ALL[Action::ALL.len() - 1]
    }

    fn train(
        config: &EnvConfig,
        episodes: usize,
        lr: f64,
        seed: u64,
    ) -> Result<LinearPolicy, TrajectoryError> {
        let index = AtomIndex::new(&env::vocabulary(config));
        let dim = index.len() + 1;
        let mut policy = LinearPolicy {
            index,
            weights: vec![vec![0.0; dim]; Action::ALL.len()],
        };
        let mut rng = seed::rng(seed);
        let mut baseline = 0.0;
        for ep in 0..episodes {
            let mut state = env::reset(&config.with_seed(seed::stream_seed(seed, ep as u64)))?;
            let mut steps = Vec::new();
            while state.terminal.is_none() {
                let sym = env::symbolize(&state);
                let action = policy.sample(&sym, &mut rng);
                let (next, r, _) = env::step(&state, action)?;
                steps.push((sym, action, r));
                state = next;
            }
            let ret: f64 = steps.iter().map(|s| s.2).sum();
            baseline += (ret - baseline) / (ep as f64 + 1.0);
            let mut g = 0.0;
            for (sym, action, r) in steps.iter().rev() {
                g += r;
                let (active, probs) = policy.probs(sym);
                let adv = g - baseline;
                for (ai, row) in policy.weights.iter_mut().enumerate() {
                    let target = if Action::ALL[ai] == *action { 1.0 } else { 0.0 };
                    let coef = lr * adv * (target - probs[ai]);
                    for &i in &active {
                        row[i] += coef;
                    }
                    row[dim - 1] += coef;
                }
            }
        }
        Ok(policy)
    }
}

/// Write one trajectory per line, positives first.
pub fn save(dataset: &Dataset, path: &Path) -> Result<(), TrajectoryError> {
    let io = |source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for t in dataset.iter() {
        serde_json::to_writer(&mut out, t).expect("trajectory serializes");
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Dataset, TrajectoryError> {
    let io = |source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut data = Dataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| TrajectoryError::Schema {
            line: i + 1,
            message,
        };
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        t.check().map_err(schema)?;
        match t.label {
            Label::Positive => data.positives.push(t),
            Label::Negative => data.negatives.push(t),
        }
    }
    Ok(data)
}

/// Independent uniform draws of one positive and one negative trajectory.
pub fn sample_pair<'d>(
    dataset: &'d Dataset,
    rng: &mut impl Rng,
) -> Result<(&'d Trajectory, &'d Trajectory), TrajectoryError> {
    let (p, n) = sample_pair_indices(dataset, rng)?;
    Ok((&dataset.positives[p], &dataset.negatives[n]))
}

/// Same draw as [`sample_pair`], returned as indices into the two sides.
pub fn sample_pair_indices(
    dataset: &Dataset,
    rng: &mut impl Rng,
) -> Result<(usize, usize), TrajectoryError> {
    if dataset.positives.is_empty() {
        return Err(TrajectoryError::EmptySide(Label::Positive));
    }
    if dataset.negatives.is_empty() {
        return Err(TrajectoryError::EmptySide(Label::Negative));
    }
    let p = rng.gen_range(0..dataset.positives.len());
    let n = rng.gen_range(0..dataset.negatives.len());
    Ok((p, n))
}
