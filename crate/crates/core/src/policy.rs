//! Weighted-rule policies.
//!
//! Each rule contributes `weight * activation` to the logit of its head
//! action, and the policy is a softmax over the action order. Rules may be
//! guarded by a subtask group: only the group of the first subtask (in
//! order) whose atoms do not yet hold is active.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, Action, EnvConfig, EnvError};
use crate::logic::{format_rule, ground_body, parse_rule, GroundAtom, LogicError, Rule};
use crate::logic::{SymbolicState, Vocabulary};
use crate::seed;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("rule head `{0}` is not an action of this policy")]
    UnknownAction(String),
    #[error("{rules} rules but {weights} weights")]
    LengthMismatch { rules: usize, weights: usize },
    #[error("rule {0} refers to a missing group")]
    BadGuard(usize),
    #[error("weight of rule {0} is not finite")]
    NonFiniteWeight(usize),
    #[error("weights diverged in episode {0}")]
    DivergedWeights(usize),
    #[error("duplicate rule in group {group}: {rule}")]
    DuplicateRule { group: String, rule: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("n_episodes must be at least 1")]
    NoEpisodes,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed policy file: {0}")]
    Format(String),
}

/// A subtask used as a rule guard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleGroup {
    pub name: String,
    pub atoms: BTreeSet<GroundAtom>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedRuleSet {
    pub rules: Vec<Rule>,
    pub weights: Vec<f64>,
    pub action_order: Vec<Action>,
    /// Group index guarding each rule; `None` means always active.
    pub guards: Vec<Option<usize>>,
    /// Subtask groups in completion order.
    pub groups: Vec<RuleGroup>,
    vocab: Vocabulary,
    heads: Vec<usize>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl WeightedRuleSet {
    /// Unguarded rules over the default action order.
    pub fn new(rules: Vec<Rule>, weights: Vec<f64>, vocab: &Vocabulary) -> Result<Self, PolicyError> {
        let n = rules.len();
        Self::with_groups(rules, weights, vec![None; n], Vec::new(), vocab)
    }

    pub fn with_groups(
        rules: Vec<Rule>,
        weights: Vec<f64>,
        guards: Vec<Option<usize>>,
        groups: Vec<RuleGroup>,
        vocab: &Vocabulary,
    ) -> Result<Self, PolicyError> {
        if rules.len() != weights.len() || rules.len() != guards.len() {
            return Err(PolicyError::LengthMismatch {
                rules: rules.len(),
                weights: weights.len(),
            });
        }
        let action_order = Action::ALL.to_vec();
        let mut heads = Vec::with_capacity(rules.len());
        for (i, rule) in rules.iter().enumerate() {
            crate::logic::check_rule(rule, vocab)?;
            let pos = action_order
                .iter()
                .position(|a| a.name() == rule.action())
                .ok_or_else(|| PolicyError::UnknownAction(rule.action().to_string()))?;
            heads.push(pos);
            if !weights[i].is_finite() {
                return Err(PolicyError::NonFiniteWeight(i));
            }
            if matches!(guards[i], Some(g) if g >= groups.len()) {
                return Err(PolicyError::BadGuard(i));
            }
        }
        Ok(WeightedRuleSet {
            rules,
            weights,
            action_order,
            guards,
            groups,
            vocab: vocab.clone(),
            heads,
        })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Index of the first group whose atoms do not all hold in `state`.
    pub fn active_group(&self, state: &SymbolicState) -> Option<usize> {
        self.groups.iter().position(|g| !state.satisfies(&g.atoms))
    }

    /// Guarded body activation of every rule.
    pub fn activations(&self, state: &SymbolicState) -> Result<Vec<f64>, PolicyError> {
        let active = self.active_group(state);
        self.rules
            .iter()
            .zip(&self.guards)
            .map(|(rule, guard)| match guard {
                Some(g) if Some(*g) != active => Ok(0.0),
                _ => Ok(ground_body(rule, state, &self.vocab)?),
            })
            .collect()
    }

    pub fn logits_with(&self, weights: &[f64], acts: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; self.action_order.len()];
        for ((w, a), h) in weights.iter().zip(acts).zip(&self.heads) {
            logits[*h] += w * a;
        }
        logits
    }

    pub fn distribution_from_activations(&self, acts: &[f64]) -> Vec<f64> {
        softmax(&self.logits_with(&self.weights, acts))
    }

    /// `d log pi(action | s) / d w` given the state's activations.
    pub fn grad_log_prob(&self, acts: &[f64], action: usize) -> Vec<f64> {
        let probs = self.distribution_from_activations(acts);
        acts.iter()
            .zip(&self.heads)
            .map(|(a, h)| a * (f64::from(u8::from(*h == action)) - probs[*h]))
            .collect()
    }

    pub fn log_prob_with(&self, weights: &[f64], acts: &[f64], action: usize) -> f64 {
        let logits = self.logits_with(weights, acts);
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        logits[action] - lse
    }

    pub fn action_index(&self, action: Action) -> usize {
        self.action_order
            .iter()
            .position(|a| *a == action)
            .expect("action order covers every action")
    }

    pub fn to_json(&self) -> String {
        let doc = PolicyDoc {
            action_order: self.action_order.clone(),
            groups: self.groups.clone(),
            rules: self
                .rules
                .iter()
                .zip(&self.weights)
                .zip(&self.guards)
                .map(|((r, w), g)| RuleDoc {
                    rule: format_rule(r),
                    weight: *w,
                    group: *g,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("policy serializes") + "\n"
    }

    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self, PolicyError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: PolicyDoc = serde_path_to_error::deserialize(de)
            .map_err(|e| PolicyError::Format(format!("{}: {}", e.path(), e.inner())))?;
        if doc.action_order != Action::ALL {
            return Err(PolicyError::Format("unsupported action order".into()));
        }
        let mut rules = Vec::new();
        let mut weights = Vec::new();
        let mut guards = Vec::new();
        for r in doc.rules {
            rules.push(parse_rule(&r.rule, vocab)?);
            weights.push(r.weight);
            guards.push(r.group);
        }
        Self::with_groups(rules, weights, guards, doc.groups, vocab)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    action_order: Vec<Action>,
    groups: Vec<RuleGroup>,
    rules: Vec<RuleDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    rule: String,
    weight: f64,
    #[serde(default)]
    group: Option<usize>,
}

pub fn action_distribution(
    ruleset: &WeightedRuleSet,
    state: &SymbolicState,
) -> Result<Vec<f64>, PolicyError> {
    Ok(ruleset.distribution_from_activations(&ruleset.activations(state)?))
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut u = rng.gen::<f64>();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    // Rounding left a sliver of mass; take the last action with support.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn sample_action(
    ruleset: &WeightedRuleSet,
    state: &SymbolicState,
    rng: &mut impl Rng,
) -> Result<(Action, f64), PolicyError> {
    let acts = ruleset.activations(state)?;
    let probs = ruleset.distribution_from_activations(&acts);
    let i = sample_index(&probs, rng);
    Ok((
        ruleset.action_order[i],
        ruleset.log_prob_with(&ruleset.weights, &acts, i),
    ))
}

/// Most probable action; ties go to the earliest action in the order.
pub fn greedy_action(ruleset: &WeightedRuleSet, state: &SymbolicState) -> Result<Action, PolicyError> {
    let acts = ruleset.activations(state)?;
    let logits = ruleset.logits_with(&ruleset.weights, &acts);
    let mut best = 0;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    Ok(ruleset.action_order[best])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    RunningMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub episodes: usize,
    #[serde(default = "default_baseline")]
    pub baseline: Baseline,
    #[serde(default)]
    pub seed: u64,
}

fn default_baseline() -> Baseline {
    Baseline::RunningMean
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            gamma: 0.99,
            learning_rate: 0.01,
            episodes: 200,
            baseline: Baseline::RunningMean,
            seed: 0,
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(PolicyError::InvalidConfig("gamma must lie in [0, 1]".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PolicyError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPolicy {
    pub ruleset: WeightedRuleSet,
    /// Undiscounted return of every training episode.
    pub returns: Vec<f64>,
    /// Weights after every episode.
    pub weight_trace: Vec<Vec<f64>>,
}

impl TrainedPolicy {
    pub fn returns_csv(&self) -> String {
        let mut out = String::from("episode,return\n");
        for (i, r) in self.returns.iter().enumerate() {
            writeln!(out, "{i},{r}").expect("string write");
        }
        out
    }
}

/// Discounted returns-to-go.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// REINFORCE on the rule weights.
pub fn train_reinforce(
    ruleset: &WeightedRuleSet,
    env_config: &EnvConfig,
    config: &PolicyTrainConfig,
) -> Result<TrainedPolicy, PolicyError> {
    config.validate()?;
    env_config.validate()?;
    let mut policy = ruleset.clone();
    let mut rng = seed::rng(seed::derive_seed(config.seed, "policy"));
    let env_base = seed::derive_seed(config.seed, "env");
    let mut baseline_sum = 0.0;
    let mut baseline_n = 0usize;
    let mut returns = Vec::with_capacity(config.episodes);
    let mut trace = Vec::with_capacity(config.episodes);
    for episode in 0..config.episodes {
        let mut state = env::reset(&env_config.with_seed(seed::stream_seed(env_base, episode as u64)))?;
        let mut steps: Vec<(Vec<f64>, usize)> = Vec::new();
        let mut rewards = Vec::new();
        while state.terminal.is_none() {
            let acts = policy.activations(&env::symbolize(&state))?;
            let probs = policy.distribution_from_activations(&acts);
            let a = sample_index(&probs, &mut rng);
            let (next, r, _) = env::step(&state, policy.action_order[a])?;
            steps.push((acts, a));
            rewards.push(r);
            state = next;
        }
        let g = discounted_returns(&rewards, config.gamma);
        let b = match config.baseline {
            Baseline::None => 0.0,
            Baseline::RunningMean if baseline_n > 0 => baseline_sum / baseline_n as f64,
            Baseline::RunningMean => 0.0,
        };
        let mut grad = vec![0.0; policy.len()];
        for ((acts, a), gt) in steps.iter().zip(&g) {
            for (acc, d) in grad.iter_mut().zip(policy.grad_log_prob(acts, *a)) {
                *acc += (gt - b) * d;
            }
        }
        for (w, d) in policy.weights.iter_mut().zip(&grad) {
            *w += config.learning_rate * d;
        }
        if policy.weights.iter().any(|w| !w.is_finite()) {
            return Err(PolicyError::DivergedWeights(episode));
        }
        baseline_sum += g.iter().sum::<f64>();
        baseline_n += g.len();
        returns.push(rewards.iter().sum());
        trace.push(policy.weights.clone());
    }
    Ok(TrainedPolicy {
        ruleset: policy,
        returns,
        weight_trace: trace,
    })
}

/// Undiscounted return of one greedy episode.
pub fn greedy_episode(ruleset: &WeightedRuleSet, env_config: &EnvConfig) -> Result<f64, PolicyError> {
    let mut state = env::reset(env_config)?;
    let mut total = 0.0;
    while state.terminal.is_none() {
        let action = greedy_action(ruleset, &env::symbolize(&state))?;
        let (next, r, _) = env::step(&state, action)?;
        total += r;
        state = next;
    }
    Ok(total)
}

/// Greedy-episode scores for `n_episodes` layouts derived from `seed`.
pub fn evaluate_scores(
    ruleset: &WeightedRuleSet,
    env_config: &EnvConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<f64>, PolicyError> {
    if n_episodes == 0 {
        return Err(PolicyError::NoEpisodes);
    }
    (0..n_episodes)
        .into_par_iter()
        .map(|i| greedy_episode(ruleset, &env_config.with_seed(seed::stream_seed(seed, i as u64))))
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn evaluate(
    ruleset: &WeightedRuleSet,
    env_config: &EnvConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<(f64, f64), PolicyError> {
    Ok(mean_std(&evaluate_scores(ruleset, env_config, n_episodes, seed)?))
}

pub fn eval_csv(n_episodes: usize, mean: f64, std: f64) -> String {
    format!("episodes,mean,std\n{n_episodes},{mean},{std}\n")
}

/// Concatenates per-subtask rule sets, guarding the rules of `parts[k]` by
/// `groups[k]`. A part may be empty; its subtask then has no active rules.
pub fn compose_subtask_policies(
    parts: &[WeightedRuleSet],
    groups: &[RuleGroup],
    vocab: &Vocabulary,
) -> Result<WeightedRuleSet, PolicyError> {
    if parts.len() != groups.len() {
        return Err(PolicyError::LengthMismatch {
            rules: parts.len(),
            weights: groups.len(),
        });
    }
    let mut rules = Vec::new();
    let mut weights = Vec::new();
    let mut guards = Vec::new();
    for (k, (part, group)) in parts.iter().zip(groups).enumerate() {
        let mut seen = BTreeSet::new();
        for (rule, w) in part.rules.iter().zip(&part.weights) {
            let text = format_rule(rule);
            if !seen.insert(text.clone()) {
                return Err(PolicyError::DuplicateRule {
                    group: group.name.clone(),
                    rule: text,
                });
            }
            rules.push(rule.clone());
            weights.push(*w);
            guards.push(Some(k));
        }
    }
    WeightedRuleSet::with_groups(rules, weights, guards, groups.to_vec(), vocab)
}

pub fn save_policy(ruleset: &WeightedRuleSet, path: &Path) -> Result<(), PolicyError> {
    std::fs::write(path, ruleset.to_json()).map_err(|source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_policy(path: &Path, vocab: &Vocabulary) -> Result<WeightedRuleSet, PolicyError> {
    let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    WeightedRuleSet::from_json(&text, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvName, ObjectSpec, SubtaskSpec, VocabularyMode};
    use proptest::prelude::*;
    use rand::Rng;

    fn getout_vocab() -> Vocabulary {
        env::vocabulary(&EnvConfig::getout_mini())
    }

    fn rules(texts: &[&str], vocab: &Vocabulary) -> Vec<Rule> {
        texts.iter().map(|t| parse_rule(t, vocab).unwrap()).collect()
    }

    fn toward(target: &str) -> [String; 2] {
        [
            format!("move_right(X) :- on_left(X, {target})."),
            format!("move_left(X) :- on_right(X, {target})."),
        ]
    }

    /// Hand-written GetOut rules: walk toward the target of each subtask.
    fn getout_parts(vocab: &Vocabulary, skip: Option<usize>) -> Vec<WeightedRuleSet> {
        ["coin1", "flag", "blue_key", "door"]
            .iter()
            .enumerate()
            .map(|(k, target)| {
                if Some(k) == skip {
                    return WeightedRuleSet::new(vec![], vec![], vocab).unwrap();
                }
                let texts = toward(target);
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                WeightedRuleSet::new(rules(&refs, vocab), vec![5.0, 5.0], vocab).unwrap()
            })
            .collect()
    }

    fn getout_groups(cfg: &EnvConfig) -> Vec<RuleGroup> {
        env::planted_conjunctions(cfg)
            .into_iter()
            .zip(&cfg.subtask_spec)
            .map(|(atoms, st)| RuleGroup {
                name: st.id.clone(),
                atoms,
            })
            .collect()
    }

    fn state(atoms: &[(&str, &[&str])]) -> SymbolicState {
        SymbolicState::new(atoms.iter().map(|(p, a)| GroundAtom::new(p, a)))
    }

    #[test]
    fn distribution_examples() {
        let v = getout_vocab();
        let s = state(&[("on_left", &["agent", "flag"])]);
        let all = rules(
            &[
                "jump(X) :- on_left(X, flag).",
                "move_left(X) :- on_left(X, flag).",
                "move_right(X) :- on_left(X, flag).",
                "noop(X) :- on_left(X, flag).",
            ],
            &v,
        );
        let p = action_distribution(&WeightedRuleSet::new(all.clone(), vec![2.0; 4], &v).unwrap(), &s).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));

        let mut one = all.clone();
        one[0] = parse_rule("jump(X) :- on_left(X, flag).", &v).unwrap();
        one[1] = parse_rule("move_left(X) :- on_right(X, flag).", &v).unwrap();
        one[2] = parse_rule("move_right(X) :- on_right(X, flag).", &v).unwrap();
        one[3] = parse_rule("noop(X) :- on_right(X, flag).", &v).unwrap();
        let p = action_distribution(&WeightedRuleSet::new(one, vec![10.0, 1.0, 1.0, 1.0], &v).unwrap(), &s).unwrap();
        let e10 = 10f64.exp();
        assert!((p[0] - e10 / (e10 + 3.0)).abs() < 1e-15);

        let empty = state(&[]);
        let p = action_distribution(&WeightedRuleSet::new(all, vec![3.0; 4], &v).unwrap(), &empty).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn unknown_head_rejected() {
        let v = getout_vocab();
        let r = rules(&["jump(X) :- on_left(X, flag)."], &v);
        assert!(matches!(
            WeightedRuleSet::new(r.clone(), vec![], &v),
            Err(PolicyError::LengthMismatch { .. })
        ));
        assert!(matches!(
            WeightedRuleSet::new(r, vec![f64::NAN], &v),
            Err(PolicyError::NonFiniteWeight(0))
        ));
    }

    #[test]
    fn sample_action_log_probs_and_frequencies() {
        let v = getout_vocab();
        let s = state(&[("on_left", &["agent", "flag"])]);
        let mut rng = seed::rng(1);
        let uniform = WeightedRuleSet::new(vec![], vec![], &v).unwrap();
        let (_, lp) = sample_action(&uniform, &s, &mut rng).unwrap();
        assert!((lp + 4f64.ln()).abs() < 1e-15);

        let sure = WeightedRuleSet::new(rules(&["move_right(X) :- on_left(X, flag)."], &v), vec![50.0], &v).unwrap();
        let (a, lp) = sample_action(&sure, &s, &mut rng).unwrap();
        assert_eq!(a, Action::MoveRight);
        assert!(lp.abs() < 1e-15);

        let mixed = WeightedRuleSet::new(
            rules(&["move_right(X) :- on_left(X, flag).", "jump(X) :- on_left(X, flag)."], &v),
            vec![1.0, -0.5],
            &v,
        )
        .unwrap();
        let p = action_distribution(&mixed, &s).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (a, lp) = sample_action(&mixed, &s, &mut rng).unwrap();
            let i = mixed.action_index(a);
            assert!((lp - p[i].ln()).abs() < 1e-12);
            counts[i] += 1;
        }
        for i in 0..4 {
            let sigma = (n as f64 * p[i] * (1.0 - p[i])).sqrt();
            assert!((counts[i] as f64 - n as f64 * p[i]).abs() <= 3.0 * sigma, "action {i}");
        }
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let v = getout_vocab();
        let r = rules(
            &[
                "move_right(X) :- on_left(X, flag).",
                "move_right(X) :- on_left(X, door).",
                "move_left(X) :- on_right(X, coin1).",
                "jump(X) :- type(flag, flag).",
                "noop(X) :- on_left(X, door).",
            ],
            &v,
        );
        let mut rng = seed::rng(5);
        for _ in 0..20 {
            let weights: Vec<f64> = (0..r.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let set = WeightedRuleSet::new(r.clone(), weights.clone(), &v).unwrap();
            let acts: Vec<f64> = (0..r.len()).map(|_| f64::from(u8::from(rng.gen_bool(0.6)))).collect();
            for a in 0..4 {
                let g = set.grad_log_prob(&acts, a);
                for k in 0..weights.len() {
                    let h = 1e-5;
                    let mut up = weights.clone();
                    let mut down = weights.clone();
                    up[k] += h;
                    down[k] -= h;
                    let fd = (set.log_prob_with(&up, &acts, a) - set.log_prob_with(&down, &acts, a)) / (2.0 * h);
                    let tol = 1e-4 * fd.abs().max(g[k].abs()).max(1e-8);
                    assert!((fd - g[k]).abs() <= tol, "w{k} a{a}: fd {fd} vs {}", g[k]);
                }
            }
        }
    }

    /// One flag three cells to the right; reaching it ends the episode.
    fn corridor() -> EnvConfig {
        EnvConfig {
            env_name: EnvName::GetOut,
            vocabulary: VocabularyMode::Full,
            grid_width: 6,
            grid_height: 2,
            agent_start: [0, 0],
            object_layout: vec![ObjectSpec {
                name: "flag".into(),
                kind: "flag".into(),
                pos: [4, 0],
            }],
            subtask_spec: vec![SubtaskSpec {
                id: "flag".into(),
                objects: vec!["flag".into()],
            }],
            max_steps: 20,
            shuffle_layout: false,
            ..EnvConfig::getout_mini()
        }
    }

    #[test]
    fn corridor_training_raises_the_useful_rule() {
        let cfg = corridor();
        let v = env::vocabulary(&cfg);
        let set = WeightedRuleSet::new(
            rules(&["move_right(X) :- on_left(X, flag).", "move_left(X) :- on_left(X, flag)."], &v),
            vec![0.0, 0.0],
            &v,
        )
        .unwrap();
        let tc = PolicyTrainConfig {
            episodes: 150,
            learning_rate: 0.01,
            ..PolicyTrainConfig::default()
        };
        let t = train_reinforce(&set, &cfg, &tc).unwrap();
        let window = |k: usize| -> f64 {
            t.weight_trace[k * 30..(k + 1) * 30].iter().map(|w| w[0]).sum::<f64>() / 30.0
        };
        for k in 0..4 {
            assert!(window(k + 1) > window(k), "window {k}");
        }
        assert!(t.ruleset.weights[1] < 0.0);
        assert_eq!(train_reinforce(&set, &cfg, &tc).unwrap(), t);

        let frozen = PolicyTrainConfig { learning_rate: 0.0, ..tc };
        assert_eq!(train_reinforce(&set, &cfg, &frozen).unwrap().ruleset, set);
        assert!(PolicyTrainConfig { gamma: 1.5, ..frozen }.validate().is_err());
    }

    #[test]
    fn discounted_returns_by_hand() {
        let g = discounted_returns(&[1.0, 0.0, 2.0], 0.5);
        assert_eq!(g, vec![1.5, 1.0, 2.0]);
    }

    #[test]
    fn composite_guards_follow_subtask_order() {
        let cfg = EnvConfig::getout_mini();
        let v = getout_vocab();
        let composite = compose_subtask_policies(&getout_parts(&v, None), &getout_groups(&cfg), &v).unwrap();
        assert_eq!(composite.len(), 8);
        // On the start state only the coin rules can fire.
        let start = env::symbolize(&env::reset(&cfg.with_seed(3)).unwrap());
        let acts = composite.activations(&start).unwrap();
        let firing: Vec<usize> = (0..8).filter(|&i| acts[i] > 0.0).collect();
        assert_eq!(firing.len(), 1);
        assert_eq!(composite.guards[firing[0]], Some(0));

        // Along a scripted success the active group only moves forward.
        let mut s = env::reset(&cfg.with_seed(3)).unwrap();
        let mut order = vec![composite.active_group(&env::symbolize(&s)).unwrap()];
        while s.terminal.is_none() {
            s = env::step(&s, env::scripted_action(&s)).unwrap().0;
            if let Some(g) = composite.active_group(&env::symbolize(&s)) {
                if *order.last().unwrap() != g {
                    order.push(g);
                }
            }
        }
        assert_eq!(order, vec![0, 1, 2, 3]);

        assert!(compose_subtask_policies(&[], &[], &v).unwrap().is_empty());
        let dup = WeightedRuleSet::new(
            rules(&["jump(X) :- at_door(X).", "jump(X) :- at_door(X)."], &v),
            vec![1.0, 2.0],
            &v,
        )
        .unwrap();
        assert!(matches!(
            compose_subtask_policies(&[dup], &getout_groups(&cfg)[..1], &v),
            Err(PolicyError::DuplicateRule { .. })
        ));
    }

    #[test]
    fn full_composite_succeeds_and_ablations_fail() {
        let cfg = EnvConfig::getout_mini();
        let v = getout_vocab();
        let groups = getout_groups(&cfg);
        let full = compose_subtask_policies(&getout_parts(&v, None), &groups, &v).unwrap();
        let (mean, std) = evaluate(&full, &cfg, 50, 7).unwrap();
        assert!(mean > 0.0, "full {mean} ± {std}");
        assert_eq!(evaluate(&full, &cfg, 50, 7).unwrap(), (mean, std));
        for k in 0..4 {
            let partial = compose_subtask_policies(&getout_parts(&v, Some(k)), &groups, &v).unwrap();
            let (m, _) = evaluate(&partial, &cfg, 50, 7).unwrap();
            assert!(m < 0.0, "without subtask {k}: {m}");
        }
        assert_eq!(evaluate(&full, &cfg, 1, 7).unwrap().1, 0.0);
        assert!(matches!(evaluate(&full, &cfg, 0, 7), Err(PolicyError::NoEpisodes)));
    }

    #[test]
    fn policy_json_round_trip() {
        let cfg = EnvConfig::getout_mini();
        let v = getout_vocab();
        let full = compose_subtask_policies(&getout_parts(&v, None), &getout_groups(&cfg), &v).unwrap();
        let text = full.to_json();
        assert!(text.contains("move_right(X) :- on_left(X, coin1)."));
        assert_eq!(WeightedRuleSet::from_json(&text, &v).unwrap(), full);
        let bad = text.replacen("\"weight\"", "\"wieght\"", 1);
        let err = WeightedRuleSet::from_json(&bad, &v).unwrap_err().to_string();
        assert!(err.contains("rules[0]"), "{err}");
        assert_eq!(eval_csv(3, 1.5, 0.25), "episodes,mean,std\n3,1.5,0.25\n");
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_ignores_shifts(logits in prop::collection::vec(-30.0f64..30.0, 1..6), c in -100.0f64..100.0) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn positive_scaling_keeps_greedy_action(ws in prop::collection::vec(-3.0f64..3.0, 4), scale in 0.01f64..100.0) {
            let v = getout_vocab();
            let r = rules(&[
                "jump(X) :- on_left(X, flag).",
                "move_left(X) :- on_left(X, flag).",
                "move_right(X) :- on_left(X, flag).",
                "noop(X) :- on_left(X, door).",
            ], &v);
            let s = state(&[("on_left", &["agent", "flag"]), ("on_left", &["agent", "door"])]);
            let a = WeightedRuleSet::new(r.clone(), ws.clone(), &v).unwrap();
            let b = WeightedRuleSet::new(r, ws.iter().map(|w| w * scale).collect(), &v).unwrap();
            let pa = action_distribution(&a, &s).unwrap();
            let pb = action_distribution(&b, &s).unwrap();
            let argmax = |p: &[f64]| (0..p.len()).fold(0, |m, i| if p[i] > p[m] { i } else { m });
            prop_assert_eq!(argmax(&pa), argmax(&pb));
        }
    }
}
