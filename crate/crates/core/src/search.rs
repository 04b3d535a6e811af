//! Softmax-guided search over predicate subsets for necessary subtasks.
//!
//! A node is a predicate subset. Its projected states are the distinct
//! projections of the candidate pool onto that subset. A projected state is
//! a subtask when every positive trajectory passes through a state
//! containing it and at least one sampled negative does not.
//!
//! One run walks the subset lattice from the full vocabulary downwards and
//! stops at the first node with a verified projection. Candidates containing
//! a hit are then harvested and all of their verified projections recorded.
//! Runs repeat on the remaining pool. A recorded conjunction is returned
//! unless a larger verified conjunction sits between it and its candidate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{project_state, GroundAtom, SymbolicState, Vocabulary};
use crate::seed;
use crate::trajectory::{Dataset, Trajectory};

/// Brute force refuses vocabularies larger than this.
pub const BRUTE_FORCE_MAX_PREDICATES: usize = 16;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("root node has no projected states")]
    EmptyRoot,
    #[error("frontier is empty")]
    EmptyFrontier,
    #[error("node with {0} predicate(s) cannot be expanded")]
    LeafNode(usize),
    #[error("candidate pool is empty")]
    EmptyCandidates,
    #[error("dataset has no positive trajectories")]
    NoPositives,
    #[error("{0} predicates exceed the brute-force limit of 16")]
    TooManyPredicates(usize),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed subtasks file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_neg_test_size")]
    pub neg_test_size: usize,
    #[serde(default = "default_temperature")]
    pub softmax_temperature: f64,
    #[serde(default = "default_max_expansions")]
    pub max_expansions: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_neg_test_size() -> usize {
    10
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_expansions() -> usize {
    100_000
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            neg_test_size: default_neg_test_size(),
            softmax_temperature: default_temperature(),
            max_expansions: default_max_expansions(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.neg_test_size == 0 {
            return Err(SearchError::InvalidConfig("neg_test_size must be >= 1".into()));
        }
        if !self.softmax_temperature.is_finite() || self.softmax_temperature < 0.0 {
            return Err(SearchError::InvalidConfig(
                "softmax_temperature must be a finite non-negative number".into(),
            ));
        }
        Ok(())
    }
}

/// Below this temperature selection is a deterministic argmax.
const ARGMAX_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub node_id: usize,
    pub preds: BTreeSet<String>,
    pub level: usize,
    pub unique_states: BTreeSet<SymbolicState>,
}

impl SearchNode {
    pub fn new(
        node_id: usize,
        preds: BTreeSet<String>,
        level: usize,
        pool: &BTreeSet<SymbolicState>,
    ) -> Self {
        let unique_states = pool.iter().map(|s| project_state(s, &preds)).collect();
        SearchNode {
            node_id,
            preds,
            level,
            unique_states,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subtask {
    pub preds: BTreeSet<String>,
    pub atoms: BTreeSet<GroundAtom>,
    pub level: usize,
}

impl Subtask {
    fn from_atoms(atoms: BTreeSet<GroundAtom>, level: usize) -> Self {
        Subtask {
            preds: atoms.iter().map(|a| a.pred.clone()).collect(),
            atoms,
            level,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    /// Every candidate was harvested.
    Complete,
    /// A run explored the whole lattice without a hit; the remaining
    /// candidates have no verified projection.
    FrontierExhausted,
    /// `max_expansions` was reached; results may be incomplete.
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub subtasks: Vec<Subtask>,
    pub status: SearchStatus,
    pub runs: usize,
    pub expansions: usize,
    /// Candidates left in the pool at the end.
    pub unmatched: usize,
}

impl SearchOutcome {
    pub fn warning(&self) -> bool {
        self.status == SearchStatus::BudgetExhausted
    }
}

pub fn node_score(node: &SearchNode, root: &SearchNode) -> Result<f64, SearchError> {
    if root.unique_states.is_empty() {
        return Err(SearchError::EmptyRoot);
    }
    Ok(-(node.unique_states.len() as f64 / root.unique_states.len() as f64) - node.level as f64)
}

/// Index of the chosen frontier node.
pub fn select_node(
    frontier: &[SearchNode],
    root: &SearchNode,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<usize, SearchError> {
    if frontier.is_empty() {
        return Err(SearchError::EmptyFrontier);
    }
    let scores = frontier
        .iter()
        .map(|n| node_score(n, root))
        .collect::<Result<Vec<_>, _>>()?;
    if temperature <= ARGMAX_TEMPERATURE {
        let best = (0..frontier.len())
            .max_by(|&a, &b| {
                scores[a]
                    .total_cmp(&scores[b])
                    .then(frontier[b].node_id.cmp(&frontier[a].node_id))
            })
            .expect("frontier nonempty");
        return Ok(best);
    }
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| ((s - top) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(frontier.len() - 1)
}

/// Children of `node` with one predicate removed, skipping subsets already in
/// `seen`.
pub fn expand(
    node: &SearchNode,
    pool: &BTreeSet<SymbolicState>,
    seen: &mut BTreeSet<BTreeSet<String>>,
    next_id: &mut usize,
) -> Result<Vec<SearchNode>, SearchError> {
    if node.preds.len() < 2 {
        return Err(SearchError::LeafNode(node.preds.len()));
    }
    let mut children = Vec::new();
    for p in &node.preds {
        let mut preds = node.preds.clone();
        preds.remove(p);
        if seen.insert(preds.clone()) {
            children.push(SearchNode::new(*next_id, preds, node.level + 1, pool));
            *next_id += 1;
        }
    }
    Ok(children)
}

fn visits(traj: &Trajectory, atoms: &BTreeSet<GroundAtom>) -> bool {
    traj.states.iter().any(|s| s.satisfies(atoms))
}

pub fn verify_subtask(
    atoms: &SymbolicState,
    positives: &[Trajectory],
    neg_test: &[&Trajectory],
) -> bool {
    let atoms = &atoms.atoms;
    positives.iter().all(|t| visits(t, atoms)) && neg_test.iter().any(|t| !visits(t, atoms))
}

/// Trajectories reduced to their distinct states, with verification results
/// memoized for one negative sample.
struct Verifier<'a> {
    positives: Vec<Vec<&'a SymbolicState>>,
    negatives: Vec<Vec<&'a SymbolicState>>,
    cache: HashMap<SymbolicState, bool>,
}

fn distinct_states(t: &Trajectory) -> Vec<&SymbolicState> {
    let set: BTreeSet<&SymbolicState> = t.states.iter().collect();
    set.into_iter().collect()
}

impl<'a> Verifier<'a> {
    fn new(positives: &'a [Trajectory], neg_test: &[&'a Trajectory]) -> Self {
        Verifier {
            positives: positives.iter().map(distinct_states).collect(),
            negatives: neg_test.iter().map(|t| distinct_states(t)).collect(),
            cache: HashMap::new(),
        }
    }

    fn verify(&mut self, atoms: &SymbolicState) -> bool {
        if let Some(v) = self.cache.get(atoms) {
            return *v;
        }
        let hit = |states: &Vec<&SymbolicState>| states.iter().any(|s| s.satisfies(&atoms.atoms));
        let v = !atoms.is_empty()
            && self.positives.iter().all(hit)
            && self.negatives.iter().any(|t| !hit(t));
        self.cache.insert(atoms.clone(), v);
        v
    }
}

fn subsets_by_size(preds: &BTreeSet<String>) -> Vec<BTreeSet<String>> {
    let items: Vec<&String> = preds.iter().collect();
    let n = items.len();
    let mut masks: Vec<u32> = (1..(1u32 << n)).collect();
    masks.sort_by_key(|m| (std::cmp::Reverse(m.count_ones()), *m));
    masks
        .into_iter()
        .map(|m| {
            (0..n)
                .filter(|i| m & (1 << i) != 0)
                .map(|i| items[i].clone())
                .collect()
        })
        .collect()
}

/// Every distinct nonempty projection of `candidate` onto a subset of its
/// own predicates that passes `verify`.
fn verified_projections(
    candidate: &SymbolicState,
    mut verify: impl FnMut(&SymbolicState) -> bool,
) -> Vec<SymbolicState> {
    let mut out = BTreeSet::new();
    for preds in subsets_by_size(&candidate.predicates()) {
        let proj = project_state(candidate, &preds);
        if !out.contains(&proj) && verify(&proj) {
            out.insert(proj);
        }
    }
    out.into_iter().collect()
}

/// Keeps a verified conjunction `A` of candidate `c` unless some verified
/// conjunction `B` (from any candidate) satisfies `A ⊊ B ⊆ c`. The level is
/// the number of `c`'s predicates dropped to reach `A`.
fn select_maximal(harvest: &[(SymbolicState, Vec<SymbolicState>)]) -> Collector {
    let all: BTreeSet<&SymbolicState> = harvest.iter().flat_map(|(_, v)| v).collect();
    let mut found = Collector::default();
    for (c, verified) in harvest {
        let inside: Vec<&&SymbolicState> =
            all.iter().filter(|b| c.atoms.is_superset(&b.atoms)).collect();
        let own = c.predicates().len();
        for a in verified {
            let dominated = inside
                .iter()
                .any(|b| b.atoms.len() > a.atoms.len() && b.atoms.is_superset(&a.atoms));
            if !dominated {
                found.add(a.clone(), own - a.predicates().len());
            }
        }
    }
    found
}

fn sample_neg_test<'a>(
    negatives: &'a [Trajectory],
    size: usize,
    rng: &mut impl Rng,
) -> Vec<&'a Trajectory> {
    let k = size.min(negatives.len());
    let mut idx = sample(rng, negatives.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &negatives[i]).collect()
}

/// Records results in discovery order, keeping the lowest level seen for a
/// repeated conjunction.
#[derive(Default)]
struct Collector {
    order: Vec<SymbolicState>,
    levels: BTreeMap<SymbolicState, usize>,
}

impl Collector {
    fn add(&mut self, atoms: SymbolicState, level: usize) {
        match self.levels.get_mut(&atoms) {
            Some(l) => *l = (*l).min(level),
            None => {
                self.order.push(atoms.clone());
                self.levels.insert(atoms, level);
            }
        }
    }

    fn finish(self) -> Vec<Subtask> {
        self.order
            .into_iter()
            .map(|s| {
                let level = self.levels[&s];
                Subtask::from_atoms(s.atoms, level)
            })
            .collect()
    }
}

pub fn search(
    candidates: &BTreeSet<SymbolicState>,
    dataset: &Dataset,
    vocab: &Vocabulary,
    config: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(SearchError::EmptyCandidates);
    }
    if dataset.positives.is_empty() {
        return Err(SearchError::NoPositives);
    }
    let mut rng = seed::rng(config.seed);
    let root_preds: BTreeSet<String> = vocab.predicate_names().into_iter().collect();
    let mut pool = candidates.clone();
    let mut harvest: Vec<(SymbolicState, Vec<SymbolicState>)> = Vec::new();
    let mut expansions = 0usize;
    let mut runs = 0usize;
    let status = loop {
        if pool.is_empty() {
            break SearchStatus::Complete;
        }
        runs += 1;
        let neg_test = sample_neg_test(&dataset.negatives, config.neg_test_size, &mut rng);
        let mut verifier = Verifier::new(&dataset.positives, &neg_test);
        let root = SearchNode::new(0, root_preds.clone(), 0, &pool);
        let mut next_id = 1;
        let mut seen = BTreeSet::from([root.preds.clone()]);
        let mut frontier = vec![root.clone()];
        let mut hits: Option<Vec<SymbolicState>> = None;
        let mut out_of_budget = false;
        while !frontier.is_empty() {
            let i = select_node(&frontier, &root, config.softmax_temperature, &mut rng)?;
            let node = frontier.remove(i);
            let verified: Vec<SymbolicState> = node
                .unique_states
                .iter()
                .filter(|s| verifier.verify(s))
                .cloned()
                .collect();
            if !verified.is_empty() {
                hits = Some(verified);
                break;
            }
            if node.preds.len() < 2 {
                continue;
            }
            if expansions >= config.max_expansions {
                out_of_budget = true;
                break;
            }
            expansions += 1;
            frontier.extend(expand(&node, &pool, &mut seen, &mut next_id)?);
        }
        if out_of_budget {
            break SearchStatus::BudgetExhausted;
        }
        let Some(hits) = hits else {
            break SearchStatus::FrontierExhausted;
        };
        let harvested: Vec<SymbolicState> = pool
            .iter()
            .filter(|c| hits.iter().any(|h| c.atoms.is_superset(&h.atoms)))
            .cloned()
            .collect();
        for c in harvested {
            pool.remove(&c);
            let verified = verified_projections(&c, |p| verifier.verify(p));
            harvest.push((c, verified));
        }
    };
    Ok(SearchOutcome {
        subtasks: select_maximal(&harvest).finish(),
        status,
        runs,
        expansions,
        unmatched: pool.len(),
    })
}

/// Exhaustive reference over every candidate and predicate subset against a
/// fixed negative sample, with the same maximality rule as [`search`].
/// Sorted by atoms.
pub fn brute_force_subtasks(
    candidates: &BTreeSet<SymbolicState>,
    dataset: &Dataset,
    vocab: &Vocabulary,
    neg_test: &[&Trajectory],
) -> Result<Vec<Subtask>, SearchError> {
    let n = vocab.predicate_names().len();
    if n > BRUTE_FORCE_MAX_PREDICATES {
        return Err(SearchError::TooManyPredicates(n));
    }
    let harvest: Vec<(SymbolicState, Vec<SymbolicState>)> = candidates
        .iter()
        .map(|c| {
            let verified = verified_projections(c, |p| {
                !p.is_empty() && verify_subtask(p, &dataset.positives, neg_test)
            });
            (c.clone(), verified)
        })
        .collect();
    let mut subtasks = select_maximal(&harvest).finish();
    subtasks.sort_by(|a, b| a.atoms.cmp(&b.atoms));
    Ok(subtasks)
}

pub fn subtasks_to_json(subtasks: &[Subtask]) -> String {
    serde_json::to_string_pretty(subtasks).expect("subtasks serialize") + "\n"
}

pub fn subtasks_from_json(text: &str) -> Result<Vec<Subtask>, SearchError> {
    let subtasks: Vec<Subtask> =
        serde_json::from_str(text).map_err(|e| SearchError::Format(e.to_string()))?;
    for s in &subtasks {
        let preds: BTreeSet<String> = s.atoms.iter().map(|a| a.pred.clone()).collect();
        if preds != s.preds {
            return Err(SearchError::Format(format!(
                "preds {:?} do not match atoms",
                s.preds
            )));
        }
    }
    Ok(subtasks)
}

pub fn save_subtasks(subtasks: &[Subtask], path: &Path) -> Result<(), SearchError> {
    std::fs::write(path, subtasks_to_json(subtasks)).map_err(|source| SearchError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_subtasks(path: &Path) -> Result<Vec<Subtask>, SearchError> {
    let text = std::fs::read_to_string(path).map_err(|source| SearchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    subtasks_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Action;
    use crate::logic::PredicateSig;
    use crate::trajectory::Label;
    use proptest::prelude::*;

    const CONSTS: [&str; 2] = ["a", "b"];

    fn vocab(n: usize) -> Vocabulary {
        let mut constants = BTreeMap::new();
        constants.insert("obj".into(), CONSTS.iter().map(|c| c.to_string()).collect());
        let preds = (0..n)
            .map(|i| PredicateSig::new(&format!("p{i}"), &["obj"]))
            .collect();
        Vocabulary::new(preds, constants, vec![]).unwrap()
    }

    /// Atom `k` of an instance: predicate k / 2, constant k % 2.
    fn atom(k: usize) -> GroundAtom {
        GroundAtom::new(&format!("p{}", k / 2), &[CONSTS[k % 2]])
    }

    fn state(atoms: &[usize]) -> SymbolicState {
        SymbolicState::new(atoms.iter().map(|&k| atom(k)))
    }

    fn traj(label: Label, states: &[&[usize]]) -> Trajectory {
        let n = states.len();
        Trajectory {
            label,
            seed: 0,
            env_name: "synthetic".into(),
            states: states.iter().map(|s| state(s)).collect(),
            actions: vec![Action::Noop; n - 1],
            rewards: vec![0.0; n - 1],
        }
    }

    fn root_of(pool: &BTreeSet<SymbolicState>, n: usize) -> SearchNode {
        SearchNode::new(0, vocab(n).predicate_names().into_iter().collect(), 0, pool)
    }

    #[test]
    fn node_score_examples() {
        let pool: BTreeSet<SymbolicState> =
            [state(&[0, 2]), state(&[1, 2]), state(&[0, 3]), state(&[1, 3])].into();
        let root = root_of(&pool, 2);
        assert_eq!(node_score(&root, &root).unwrap(), -1.0);
        let half = SearchNode::new(1, ["p0".to_string()].into(), 2, &pool);
        assert_eq!(half.unique_states.len(), 2);
        assert_eq!(node_score(&half, &root).unwrap(), -2.5);
        let empty = SearchNode {
            unique_states: BTreeSet::new(),
            level: 1,
            ..half.clone()
        };
        assert_eq!(node_score(&empty, &root).unwrap(), -1.0);
        assert!(matches!(node_score(&root, &empty), Err(SearchError::EmptyRoot)));
    }

    #[test]
    fn select_node_cases() {
        let pool: BTreeSet<SymbolicState> = [state(&[0, 2])].into();
        let root = root_of(&pool, 2);
        let mut rng = seed::rng(0);
        assert!(matches!(
            select_node(&[], &root, 1.0, &mut rng),
            Err(SearchError::EmptyFrontier)
        ));
        assert_eq!(select_node(std::slice::from_ref(&root), &root, 1.0, &mut rng).unwrap(), 0);

        let a = SearchNode { node_id: 7, ..root.clone() };
        let b = SearchNode { node_id: 3, ..root.clone() };
        let n = 10_000;
        let picks_a = (0..n)
            .filter(|_| select_node(&[a.clone(), b.clone()], &root, 1.0, &mut rng).unwrap() == 0)
            .count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((picks_a - n as f64 / 2.0).abs() <= 3.0 * sigma, "{picks_a}");

        // Zero temperature: ties go to the lowest node id, else the best score.
        assert_eq!(select_node(&[a.clone(), b.clone()], &root, 0.0, &mut rng).unwrap(), 1);
        let deeper = SearchNode { node_id: 0, level: 1, ..root.clone() };
        assert_eq!(select_node(&[deeper, a], &root, 0.0, &mut rng).unwrap(), 1);
    }

    #[test]
    fn expansion_structure() {
        let pool: BTreeSet<SymbolicState> = [state(&[0, 2, 4])].into();
        let root = root_of(&pool, 3);
        let mut seen = BTreeSet::from([root.preds.clone()]);
        let mut next = 1;
        let children = expand(&root, &pool, &mut seen, &mut next).unwrap();
        assert_eq!(children.len(), 3);
        assert!(children.iter().all(|c| c.preds.len() == 2 && c.level == 1));
        // {p0,p1} and {p0,p2} share the child {p0}.
        let first = expand(&children[2], &pool, &mut seen, &mut next).unwrap();
        let second = expand(&children[1], &pool, &mut seen, &mut next).unwrap();
        assert_eq!(first.len() + second.len(), 3);
        let leaf = SearchNode::new(99, ["p0".to_string()].into(), 2, &pool);
        assert!(matches!(
            expand(&leaf, &pool, &mut seen, &mut next),
            Err(SearchError::LeafNode(1))
        ));
    }

    #[test]
    fn verify_cases() {
        let s = state(&[0]);
        let pos = vec![traj(Label::Positive, &[&[2], &[0, 2]]), traj(Label::Positive, &[&[0]])];
        let without: Vec<Trajectory> = (0..10).map(|_| traj(Label::Negative, &[&[2]])).collect();
        let with: Vec<Trajectory> = (0..10).map(|_| traj(Label::Negative, &[&[0, 3]])).collect();
        let without: Vec<&Trajectory> = without.iter().collect();
        let with: Vec<&Trajectory> = with.iter().collect();
        assert!(verify_subtask(&s, &pos, &without));
        assert!(!verify_subtask(&s, &pos, &with));
        let mut missing = pos.clone();
        missing.push(traj(Label::Positive, &[&[2]]));
        assert!(!verify_subtask(&s, &missing, &without));
    }

    #[test]
    fn root_hit_returns_candidate_at_level_zero() {
        let data = Dataset {
            positives: vec![traj(Label::Positive, &[&[1], &[0, 2]])],
            negatives: vec![traj(Label::Negative, &[&[1], &[2]])],
        };
        let cands: BTreeSet<SymbolicState> = [state(&[0, 2])].into();
        let out = search(&cands, &data, &vocab(2), &SearchConfig::default()).unwrap();
        assert_eq!(out.status, SearchStatus::Complete);
        assert_eq!(
            out.subtasks,
            vec![Subtask::from_atoms(state(&[0, 2]).atoms, 0)]
        );
        assert_eq!(out.runs, 1);
        assert_eq!(out.expansions, 0);
    }

    #[test]
    fn search_errors_and_budget() {
        let data = Dataset {
            positives: vec![
                traj(Label::Positive, &[&[1], &[0, 2]]),
                traj(Label::Positive, &[&[1], &[2]]),
            ],
            negatives: vec![traj(Label::Negative, &[&[1, 3], &[0]])],
        };
        assert!(matches!(
            search(&BTreeSet::new(), &data, &vocab(2), &SearchConfig::default()),
            Err(SearchError::EmptyCandidates)
        ));
        let bad = SearchConfig { neg_test_size: 0, ..SearchConfig::default() };
        assert!(bad.validate().is_err());
        // Only {p1(a)} verifies, which needs one expansion.
        let cands: BTreeSet<SymbolicState> = [state(&[0, 2])].into();
        let tight = SearchConfig { max_expansions: 0, ..SearchConfig::default() };
        let out = search(&cands, &data, &vocab(2), &tight).unwrap();
        assert_eq!(out.status, SearchStatus::BudgetExhausted);
        assert!(out.warning() && out.subtasks.is_empty());
        let out = search(&cands, &data, &vocab(2), &SearchConfig::default()).unwrap();
        assert_eq!(out.subtasks, vec![Subtask::from_atoms(state(&[2]).atoms, 1)]);
    }

    #[test]
    fn brute_force_edge_cases() {
        let data = Dataset {
            positives: vec![traj(Label::Positive, &[&[0]])],
            negatives: vec![],
        };
        assert!(brute_force_subtasks(&BTreeSet::new(), &data, &vocab(3), &[]).unwrap().is_empty());
        assert!(matches!(
            brute_force_subtasks(&BTreeSet::new(), &data, &vocab(17), &[]),
            Err(SearchError::TooManyPredicates(17))
        ));
    }

    #[test]
    fn subtasks_json_round_trip() {
        let subs = vec![
            Subtask::from_atoms(state(&[0, 3]).atoms, 0),
            Subtask::from_atoms(state(&[5]).atoms, 2),
        ];
        let text = subtasks_to_json(&subs);
        assert!(text.contains(r#"["p0", ["a"]]"#) || text.contains("\"p0\""));
        assert_eq!(subtasks_from_json(&text).unwrap(), subs);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v[0]["atoms"][0], serde_json::json!(["p0", ["a"]]));
        assert!(subtasks_from_json(r#"[{"preds":["p9"],"atoms":[["p0",["a"]]],"level":0}]"#).is_err());
    }

    /// Instance over `n` unary predicates and two constants.
    fn instance(
        n: usize,
    ) -> impl Strategy<Value = (Dataset, BTreeSet<SymbolicState>, u64)> {
        let st = prop::collection::btree_set(0..2 * n, 0..=2 * n);
        let tr = prop::collection::vec(st, 1..5);
        (
            prop::collection::vec(tr.clone(), 1..5),
            prop::collection::vec(tr, 1..5),
            prop::collection::vec(any::<prop::sample::Index>(), 1..6),
            any::<u64>(),
        )
            .prop_map(|(pos, neg, picks, seed)| {
                let mk = |label, ts: Vec<Vec<BTreeSet<usize>>>| -> Vec<Trajectory> {
                    ts.into_iter()
                        .map(|t| {
                            let v: Vec<Vec<usize>> = t.into_iter().map(|s| s.into_iter().collect()).collect();
                            let r: Vec<&[usize]> = v.iter().map(|s| s.as_slice()).collect();
                            traj(label, &r)
                        })
                        .collect()
                };
                let data = Dataset {
                    positives: mk(Label::Positive, pos),
                    negatives: mk(Label::Negative, neg),
                };
                let states: Vec<&SymbolicState> =
                    data.positives.iter().flat_map(|t| &t.states).collect();
                let cands = picks.iter().map(|i| (*i.get(&states)).clone()).collect();
                (data, cands, seed)
            })
    }

    fn as_set(subs: &[Subtask]) -> BTreeSet<(BTreeSet<GroundAtom>, usize)> {
        subs.iter().map(|s| (s.atoms.clone(), s.level)).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn search_matches_brute_force((data, cands, seed) in (1usize..=8).prop_flat_map(instance), temp in prop::sample::select(vec![0.0, 0.5, 1.0, 5.0])) {
            let nv = vocab(8);
            let cfg = SearchConfig { neg_test_size: 10, softmax_temperature: temp, seed, ..SearchConfig::default() };
            let out = search(&cands, &data, &nv, &cfg).unwrap();
            prop_assert_ne!(out.status, SearchStatus::BudgetExhausted);
            let all: Vec<&Trajectory> = data.negatives.iter().collect();
            let oracle = brute_force_subtasks(&cands, &data, &nv, &all).unwrap();
            prop_assert_eq!(as_set(&out.subtasks), as_set(&oracle));
            // Re-check against the full negative set and for maximality per candidate.
            for s in &out.subtasks {
                let atoms = SymbolicState::new(s.atoms.iter().cloned());
                prop_assert!(verify_subtask(&atoms, &data.positives, &all));
            }
            // Each result has a witness candidate from which no larger
            // result also arises.
            let arises = |s: &Subtask, c: &SymbolicState| project_state(c, &s.preds).atoms == s.atoms;
            for a in &out.subtasks {
                let ok = cands.iter().any(|c| {
                    arises(a, c)
                        && !out.subtasks.iter().any(|b| {
                            b.atoms.len() > a.atoms.len() && b.atoms.is_superset(&a.atoms) && arises(b, c)
                        })
                });
                prop_assert!(ok, "{:?} is dominated in every witness", a.atoms);
            }
            // Determinism.
            prop_assert_eq!(search(&cands, &data, &nv, &cfg).unwrap(), out);
        }
    }
}
