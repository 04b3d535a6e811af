//! Stage-by-stage pipeline with on-disk artifacts.
//!
//! Each stage reads the artifacts of earlier stages from the output
//! directory and writes its own, so any stage can be re-run in isolation.
//! Every stage seed is derived from `global_seed`; seeds inside the
//! sub-configs are ignored.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, EnvConfig, EnvError};
use crate::forge::{self, FewShotExample, ForgeError, LlmBackendSpec, RefineConfig};
use crate::logic::{format_rule, parse_rule, project_state, AtomIndex, GroundAtom, LogicError, Rule};
use crate::logic::{SymbolicState, Vocabulary};
use crate::policy::{self, PolicyError, PolicyTrainConfig, RuleGroup, WeightedRuleSet};
use crate::scorer::{self, ScorerError, ScorerParams, TrainConfig};
use crate::search::{self, SearchConfig, SearchError, SearchStatus, Subtask};
use crate::seed::derive_seed;
use crate::trajectory::{self, CollectorSpec, Dataset, TrajectoryError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Collect,
    TrainScorer,
    FindSubtasks,
    GenRules,
    TrainPolicy,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Collect,
        Stage::TrainScorer,
        Stage::FindSubtasks,
        Stage::GenRules,
        Stage::TrainPolicy,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::TrainScorer => "train-scorer",
            Stage::FindSubtasks => "find-subtasks",
            Stage::GenRules => "gen-rules",
            Stage::TrainPolicy => "train-policy",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DATASET: &str = "dataset.jsonl";
pub const SCORER: &str = "scorer.json";
pub const LOSS: &str = "loss.csv";
pub const SUBTASKS: &str = "subtasks.json";
pub const RULES: &str = "rules.txt";
pub const POLICY: &str = "policy.json";
pub const RETURNS: &str = "returns.csv";
pub const EVAL: &str = "eval.csv";
pub const ABLATION: &str = "ablation.csv";
pub const HISTOGRAM: &str = "score_histogram.csv";
pub const PRECISION_RECALL: &str = "precision_recall.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const RUN_LOG: &str = "run.log";

/// Failure inside a stage.
#[derive(Debug, Error)]
pub enum StageFailure {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {file}: run the {stage} stage first")]
    MissingArtifact { stage: Stage, file: &'static str },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageFailure,
    },
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

trait Tag<T> {
    fn tag(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageFailure>> Tag<T> for Result<T, E> {
    fn tag(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            source: e.into(),
        })
    }
}

fn default_n_pos() -> usize {
    50
}

fn default_n_neg() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    #[serde(default = "default_n_pos")]
    pub n_pos: usize,
    #[serde(default = "default_n_neg")]
    pub n_neg: usize,
    #[serde(default)]
    pub collector: CollectorSpec,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            n_pos: default_n_pos(),
            n_neg: default_n_neg(),
            collector: CollectorSpec::default(),
        }
    }
}

fn default_eval_episodes() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_episodes")]
    pub n_episodes: usize,
    /// Also evaluate the policy with each subtask's rules removed.
    #[serde(default = "default_true")]
    pub ablation: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_episodes: default_eval_episodes(),
            ablation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub collect: CollectConfig,
    #[serde(default)]
    pub scorer: TrainConfig,
    #[serde(default)]
    pub search: SearchConfig,
    pub llm: LlmBackendSpec,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub policy: PolicyTrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub few_shot: Option<Vec<FewShotExample>>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub global_seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| PipelineError::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(p) = &cfg.llm.replay_path {
            cfg.llm.replay_path = Some(base.join(p));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |what: &str, e: &dyn std::fmt::Display| PipelineError::Config(format!("{what}: {e}"));
        self.env.validate().map_err(|e| bad("env", &e))?;
        self.scorer.validate().map_err(|e| bad("scorer", &e))?;
        self.search.validate().map_err(|e| bad("search", &e))?;
        self.llm.validate().map_err(|e| bad("llm", &e))?;
        self.policy.validate().map_err(|e| bad("policy", &e))?;
        if self.collect.n_pos == 0 {
            return Err(PipelineError::Config("collect.n_pos must be >= 1".into()));
        }
        if self.eval.n_episodes == 0 {
            return Err(PipelineError::Config("eval.n_episodes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, label: &str) -> u64 {
        derive_seed(self.global_seed, label)
    }

    pub fn env_config(&self) -> EnvConfig {
        self.env.with_seed(self.stage_seed("env"))
    }

    pub fn vocabulary(&self) -> Vocabulary {
        env::vocabulary(&self.env)
    }

    fn path(&self, file: &str) -> PathBuf {
        self.output_dir.join(file)
    }

    fn bank(&self) -> Vec<FewShotExample> {
        self.few_shot.clone().unwrap_or_else(forge::default_few_shot_bank)
    }
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> Result<T, StageFailure> {
    r.map_err(|source| StageFailure::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), StageFailure> {
    io(std::fs::write(path, text), path)
}

fn read_file(path: &Path) -> Result<String, StageFailure> {
    io(std::fs::read_to_string(path), path)
}

fn require(cfg: &PipelineConfig, stage: Stage, file: &'static str) -> Result<PathBuf, PipelineError> {
    let p = cfg.path(file);
    if p.exists() {
        Ok(p)
    } else {
        Err(PipelineError::MissingArtifact { stage, file })
    }
}

pub fn log_line(output_dir: &Path, message: &str) -> Result<(), StageFailure> {
    let path = output_dir.join(RUN_LOG);
    let stamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let mut f = io(OpenOptions::new().create(true).append(true).open(&path), &path)?;
    io(writeln!(f, "{stamp} {message}"), &path)
}

/// Mean index of the first state satisfying the subtask, over positives
/// that visit it.
fn mean_first_visit(dataset: &Dataset, atoms: &BTreeSet<GroundAtom>) -> f64 {
    let firsts: Vec<f64> = dataset
        .positives
        .iter()
        .filter_map(|t| t.states.iter().position(|s| s.satisfies(atoms)))
        .map(|i| i as f64)
        .collect();
    if firsts.is_empty() {
        f64::INFINITY
    } else {
        firsts.iter().sum::<f64>() / firsts.len() as f64
    }
}

/// Subtasks in the order positive trajectories achieve them.
pub fn order_subtasks(subtasks: Vec<Subtask>, dataset: &Dataset) -> Vec<Subtask> {
    let mut keyed: Vec<(f64, Subtask)> = subtasks
        .into_iter()
        .map(|s| (mean_first_visit(dataset, &s.atoms), s))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.atoms.cmp(&b.1.atoms)));
    keyed.into_iter().map(|(_, s)| s).collect()
}

fn stage_collect(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let s = Stage::Collect;
    let c = &cfg.collect;
    let data = trajectory::collect(&cfg.env_config(), &c.collector, c.n_pos, c.n_neg, cfg.stage_seed("collect")).tag(s)?;
    trajectory::save(&data, &cfg.path(DATASET)).tag(s)?;
    Ok(format!("{} positive, {} negative", data.positives.len(), data.negatives.len()))
}

fn load_dataset(cfg: &PipelineConfig, stage: Stage) -> Result<Dataset, PipelineError> {
    let p = require(cfg, Stage::Collect, DATASET)?;
    trajectory::load(&p).tag(stage)
}

fn load_scorer(cfg: &PipelineConfig, stage: Stage) -> Result<ScorerParams, PipelineError> {
    let p = require(cfg, Stage::TrainScorer, SCORER)?;
    ScorerParams::from_json(&read_file(&p).tag(stage)?).tag(stage)
}

fn stage_train_scorer(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let s = Stage::TrainScorer;
    let data = load_dataset(cfg, s)?;
    let index = AtomIndex::new(&cfg.vocabulary());
    let tc = TrainConfig {
        seed: cfg.stage_seed("train-scorer"),
        ..cfg.scorer.clone()
    };
    let trained = scorer::train(&data, &index, &tc).tag(s)?;
    write_file(&cfg.path(SCORER), &trained.params.to_json()).tag(s)?;
    write_file(&cfg.path(LOSS), &trained.loss_csv()).tag(s)?;
    let first = trained.loss_curve.first().copied().unwrap_or(f64::NAN);
    let last = trained.loss_curve.last().copied().unwrap_or(f64::NAN);
    Ok(format!("loss {first:.4} -> {last:.4}"))
}

fn stage_find_subtasks(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let s = Stage::FindSubtasks;
    let data = load_dataset(cfg, s)?;
    let params = load_scorer(cfg, s)?;
    let vocab = cfg.vocabulary();
    let index = AtomIndex::new(&vocab);
    let cands = scorer::candidates(&params, &index, &data, cfg.scorer.threshold).tag(s)?;
    let sc = SearchConfig {
        seed: cfg.stage_seed("find-subtasks"),
        ..cfg.search.clone()
    };
    let outcome = search::search(&cands, &data, &vocab, &sc).tag(s)?;
    let ordered = order_subtasks(outcome.subtasks, &data);
    search::save_subtasks(&ordered, &cfg.path(SUBTASKS)).tag(s)?;
    let warn = if outcome.status == SearchStatus::BudgetExhausted {
        " WARNING: expansion budget exhausted"
    } else {
        ""
    };
    Ok(format!(
        "{} candidates, {} subtasks, {} runs, {} expansions{warn}",
        cands.len(),
        ordered.len(),
        outcome.runs,
        outcome.expansions
    ))
}

fn load_subtasks(cfg: &PipelineConfig, stage: Stage) -> Result<Vec<Subtask>, PipelineError> {
    let p = require(cfg, Stage::FindSubtasks, SUBTASKS)?;
    search::load_subtasks(&p).tag(stage)
}

/// Rules grouped by subtask. Each group starts with a `% subtask k: ...`
/// comment line.
pub fn rules_to_text(groups: &[(BTreeSet<GroundAtom>, Vec<Rule>)]) -> String {
    let mut out = String::new();
    for (k, (atoms, rules)) in groups.iter().enumerate() {
        let _ = writeln!(out, "% subtask {}: {}", k + 1, forge::render_conjunction(atoms));
        for r in rules {
            let _ = writeln!(out, "{}", format_rule(r));
        }
    }
    out
}

/// Rules per group, parsed from `rules_to_text` output.
pub fn rules_from_text(text: &str, vocab: &Vocabulary) -> Result<Vec<Vec<Rule>>, StageFailure> {
    let mut groups: Vec<Vec<Rule>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.starts_with("% subtask") {
            groups.push(Vec::new());
        } else if !line.is_empty() && !line.starts_with('%') {
            let group = groups
                .last_mut()
                .ok_or_else(|| StageFailure::Format(format!("line {}: rule before first subtask header", i + 1)))?;
            group.push(parse_rule(line, vocab)?);
        }
    }
    Ok(groups)
}

fn stage_gen_rules(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let s = Stage::GenRules;
    let subtasks = load_subtasks(cfg, s)?;
    let vocab = cfg.vocabulary();
    let env_cfg = cfg.env_config();
    let bank = cfg.bank();
    let mut groups = Vec::new();
    let mut notes = Vec::new();
    for (k, st) in subtasks.iter().enumerate() {
        let forged = forge::forge_subtask_rules(&cfg.llm, &env_cfg, &vocab, &st.atoms, &bank, &cfg.refine).tag(s)?;
        let trail: Vec<String> = forged
            .history
            .iter()
            .map(|h| {
                let fb = if h.fell_back { " (fallback)" } else { "" };
                format!("{} {:.2}{fb}", h.directive.as_str(), h.success_rate)
            })
            .collect();
        notes.push(format!("subtask {}: {}", k + 1, trail.join(" -> ")));
        groups.push((st.atoms.clone(), forged.rules));
    }
    write_file(&cfg.path(RULES), &rules_to_text(&groups)).tag(s)?;
    Ok(notes.join("; "))
}

fn rule_groups(subtasks: &[Subtask]) -> Vec<RuleGroup> {
    subtasks
        .iter()
        .enumerate()
        .map(|(k, s)| RuleGroup {
            name: format!("subtask{}", k + 1),
            atoms: s.atoms.clone(),
        })
        .collect()
}

/// Unit-weight composite policy from per-subtask rules.
pub fn compose_from_rules(
    groups: &[RuleGroup],
    rules: &[Vec<Rule>],
    vocab: &Vocabulary,
) -> Result<WeightedRuleSet, PolicyError> {
    let parts = rules
        .iter()
        .map(|r| WeightedRuleSet::new(r.clone(), vec![1.0; r.len()], vocab))
        .collect::<Result<Vec<_>, _>>()?;
    policy::compose_subtask_policies(&parts, groups, vocab)
}

fn stage_train_policy(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let s = Stage::TrainPolicy;
    let subtasks = load_subtasks(cfg, s)?;
    let rules_path = require(cfg, Stage::GenRules, RULES)?;
    let vocab = cfg.vocabulary();
    let rules = rules_from_text(&read_file(&rules_path).tag(s)?, &vocab).tag(s)?;
    if rules.len() != subtasks.len() {
        return Err(PipelineError::Stage {
            stage: s,
            source: StageFailure::Format(format!(
                "{RULES} has {} groups but there are {} subtasks",
                rules.len(),
                subtasks.len()
            )),
        });
    }
    let initial = compose_from_rules(&rule_groups(&subtasks), &rules, &vocab).tag(s)?;
    let pc = PolicyTrainConfig {
        seed: cfg.stage_seed("train-policy"),
        ..cfg.policy.clone()
    };
    let trained = policy::train_reinforce(&initial, &cfg.env_config(), &pc).tag(s)?;
    policy::save_policy(&trained.ruleset, &cfg.path(POLICY)).tag(s)?;
    write_file(&cfg.path(RETURNS), &trained.returns_csv()).tag(s)?;
    let tail = &trained.returns[trained.returns.len().saturating_sub(20)..];
    Ok(format!(
        "{} rules, last-20 mean return {:.3}",
        trained.ruleset.len(),
        policy::mean_std(tail).0
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Index (1-based) of the subtask whose rules were removed; 0 = none.
    pub removed: usize,
    pub mean: f64,
    pub std: f64,
}

/// The policy with the rules guarded by `group` dropped.
pub fn without_group(ruleset: &WeightedRuleSet, group: usize) -> Result<WeightedRuleSet, PolicyError> {
    let keep: Vec<usize> = (0..ruleset.len()).filter(|&i| ruleset.guards[i] != Some(group)).collect();
    WeightedRuleSet::with_groups(
        keep.iter().map(|&i| ruleset.rules[i].clone()).collect(),
        keep.iter().map(|&i| ruleset.weights[i]).collect(),
        keep.iter().map(|&i| ruleset.guards[i]).collect(),
        ruleset.groups.clone(),
        ruleset.vocabulary(),
    )
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("removed_subtask,mean,std\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.removed, r.mean, r.std);
    }
    out
}

fn stage_evaluate(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let s = Stage::Evaluate;
    let p = require(cfg, Stage::TrainPolicy, POLICY)?;
    let ruleset = policy::load_policy(&p, &cfg.vocabulary()).tag(s)?;
    let env_cfg = cfg.env_config();
    let n = cfg.eval.n_episodes;
    let seed = cfg.stage_seed("evaluate");
    let (mean, std) = policy::evaluate(&ruleset, &env_cfg, n, seed).tag(s)?;
    write_file(&cfg.path(EVAL), &policy::eval_csv(n, mean, std)).tag(s)?;
    let mut rows = vec![AblationRow { removed: 0, mean, std }];
    if cfg.eval.ablation {
        for g in 0..ruleset.groups.len() {
            let partial = without_group(&ruleset, g).tag(s)?;
            let (m, sd) = policy::evaluate(&partial, &env_cfg, n, seed).tag(s)?;
            rows.push(AblationRow {
                removed: g + 1,
                mean: m,
                std: sd,
            });
        }
    }
    write_file(&cfg.path(ABLATION), &ablation_csv(&rows)).tag(s)?;
    Ok(format!("mean {mean:.3} std {std:.3} over {n} episodes"))
}

/// Runs one stage and appends its outcome to run.log.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<f64, PipelineError> {
    io(std::fs::create_dir_all(&cfg.output_dir), &cfg.output_dir).tag(stage)?;
    let t0 = Instant::now();
    let result = match stage {
        Stage::Collect => stage_collect(cfg),
        Stage::TrainScorer => stage_train_scorer(cfg),
        Stage::FindSubtasks => stage_find_subtasks(cfg),
        Stage::GenRules => stage_gen_rules(cfg),
        Stage::TrainPolicy => stage_train_policy(cfg),
        Stage::Evaluate => stage_evaluate(cfg),
    };
    let secs = t0.elapsed().as_secs_f64();
    let line = match &result {
        Ok(detail) => format!("stage={stage} status=ok seconds={secs:.3} {detail}"),
        Err(e) => format!("stage={stage} status=error seconds={secs:.3} {e}"),
    };
    log_line(&cfg.output_dir, &line).tag(stage)?;
    result.map(|_| secs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Candidate states against planted conjunctions: a candidate is correct
/// when its projection onto some conjunction's predicates equals it.
pub fn pre_search_metrics(cands: &BTreeSet<SymbolicState>, planted: &[BTreeSet<GroundAtom>]) -> PrecisionRecall {
    let matches = |c: &SymbolicState, p: &BTreeSet<GroundAtom>| {
        let preds: BTreeSet<String> = p.iter().map(|a| a.pred.clone()).collect();
        &project_state(c, &preds).atoms == p
    };
    let correct = cands.iter().filter(|c| planted.iter().any(|p| matches(c, p))).count();
    let covered = planted.iter().filter(|p| cands.iter().any(|c| matches(c, p))).count();
    PrecisionRecall {
        precision: ratio(correct, cands.len()),
        recall: ratio(covered, planted.len()),
    }
}

/// Exact set comparison of discovered and planted conjunctions.
pub fn post_search_metrics(found: &[Subtask], planted: &[BTreeSet<GroundAtom>]) -> PrecisionRecall {
    let found: BTreeSet<&BTreeSet<GroundAtom>> = found.iter().map(|s| &s.atoms).collect();
    let planted: BTreeSet<&BTreeSet<GroundAtom>> = planted.iter().collect();
    let hit = found.intersection(&planted).count();
    PrecisionRecall {
        precision: ratio(hit, found.len()),
        recall: ratio(hit, planted.len()),
    }
}

pub const HISTOGRAM_BINS: usize = 20;

/// Counts of candidate scores in equal-width bins over [0, 1].
pub fn histogram_csv(scores: &[f64]) -> String {
    let mut out = String::from("bin_low,bin_high,count\n");
    if scores.is_empty() {
        return out;
    }
    let mut counts = [0usize; HISTOGRAM_BINS];
    for &s in scores {
        let b = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[b] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        let lo = b as f64 / HISTOGRAM_BINS as f64;
        let hi = (b + 1) as f64 / HISTOGRAM_BINS as f64;
        let _ = writeln!(out, "{lo},{hi},{c}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub env_name: String,
    pub vocabulary: String,
    pub global_seed: u64,
    pub timings: Vec<StageTiming>,
    pub candidates: usize,
    pub pre_search: Option<PrecisionRecall>,
    pub post_search: Option<PrecisionRecall>,
    pub subtasks: Vec<String>,
    pub rules: Vec<String>,
    pub eval_mean: f64,
    pub eval_std: f64,
    pub ablation: Vec<AblationRow>,
}

fn read_ablation(text: &str) -> Result<Vec<AblationRow>, StageFailure> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || StageFailure::Format(format!("bad ablation row `{l}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(AblationRow {
                removed: f[0].parse().map_err(|_| bad())?,
                mean: f[1].parse().map_err(|_| bad())?,
                std: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes the score histogram and precision/recall CSVs and assembles the
/// report from the artifacts on disk.
pub fn report_metrics(cfg: &PipelineConfig, timings: Vec<StageTiming>) -> Result<RunReport, PipelineError> {
    let s = Stage::Evaluate;
    let data = load_dataset(cfg, s)?;
    let params = load_scorer(cfg, s)?;
    let subtasks = load_subtasks(cfg, s)?;
    let vocab = cfg.vocabulary();
    let index = AtomIndex::new(&vocab);
    let cands = scorer::candidates(&params, &index, &data, cfg.scorer.threshold).tag(s)?;
    let cand_scores: Vec<f64> = cands
        .iter()
        .map(|c| index.active(c).map(|a| params.score_active(&a)))
        .collect::<Result<_, _>>()
        .tag(s)?;
    write_file(&cfg.path(HISTOGRAM), &histogram_csv(&cand_scores)).tag(s)?;

    let planted = env::planted_conjunctions(&cfg.env);
    let (pre, post) = if !cfg.env.declare_ground_truth || planted.is_empty() {
        (None, None)
    } else {
        (
            Some(pre_search_metrics(&cands, &planted)),
            Some(post_search_metrics(&subtasks, &planted)),
        )
    };
    let mut pr = String::from("phase,precision,recall\n");
    if let (Some(a), Some(b)) = (pre, post) {
        let _ = writeln!(pr, "pre_search,{},{}", a.precision, a.recall);
        let _ = writeln!(pr, "post_search,{},{}", b.precision, b.recall);
    }
    write_file(&cfg.path(PRECISION_RECALL), &pr).tag(s)?;

    let rules_text = read_file(&require(cfg, Stage::GenRules, RULES)?).tag(s)?;
    let ablation = read_ablation(&read_file(&require(cfg, Stage::Evaluate, ABLATION)?).tag(s)?).tag(s)?;
    let full = ablation.first().cloned().unwrap_or(AblationRow {
        removed: 0,
        mean: f64::NAN,
        std: f64::NAN,
    });
    Ok(RunReport {
        env_name: cfg.env.env_name.as_str().to_string(),
        vocabulary: format!("{:?}", cfg.env.vocabulary).to_lowercase(),
        global_seed: cfg.global_seed,
        timings,
        candidates: cands.len(),
        pre_search: pre,
        post_search: post,
        subtasks: subtasks.iter().map(|s| forge::render_conjunction(&s.atoms)).collect(),
        rules: rules_text.lines().filter(|l| !l.starts_with('%') && !l.is_empty()).map(String::from).collect(),
        eval_mean: full.mean,
        eval_std: full.std,
        ablation,
    })
}

pub fn report_markdown(r: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run report: {} ({} vocabulary), seed {}\n", r.env_name, r.vocabulary, r.global_seed);
    let _ = writeln!(out, "| stage | seconds |\n|---|---|");
    for t in &r.timings {
        let _ = writeln!(out, "| {} | {:.2} |", t.stage, t.seconds);
    }
    let _ = writeln!(out, "\nCandidates above threshold: {}\n", r.candidates);
    if let (Some(a), Some(b)) = (r.pre_search, r.post_search) {
        let _ = writeln!(out, "| phase | precision | recall |\n|---|---|---|");
        let _ = writeln!(out, "| pre-search | {:.3} | {:.3} |", a.precision, a.recall);
        let _ = writeln!(out, "| post-search | {:.3} | {:.3} |\n", b.precision, b.recall);
    }
    let _ = writeln!(out, "## Subtasks\n");
    for (k, s) in r.subtasks.iter().enumerate() {
        let _ = writeln!(out, "{}. `{s}`", k + 1);
    }
    let _ = writeln!(out, "\n## Rules\n\n```");
    for rule in &r.rules {
        let _ = writeln!(out, "{rule}");
    }
    let _ = writeln!(out, "```\n\n## Evaluation\n");
    let _ = writeln!(out, "| removed subtask | mean | std |\n|---|---|---|");
    for row in &r.ablation {
        let removed = if row.removed == 0 { "none".to_string() } else { row.removed.to_string() };
        let _ = writeln!(out, "| {removed} | {:.3} | {:.3} |", row.mean, row.std);
    }
    out
}

/// All stages in order, then the report files. The first failing stage
/// aborts the run; artifacts written so far are kept.
pub fn run_all(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let mut timings = Vec::new();
    for stage in Stage::ALL {
        let seconds = run_stage(stage, cfg)?;
        timings.push(StageTiming { stage, seconds });
    }
    let report = report_metrics(cfg, timings)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&cfg.path(REPORT_JSON), &json).tag(Stage::Evaluate)?;
    write_file(&cfg.path(REPORT_MD), &report_markdown(&report)).tag(Stage::Evaluate)?;
    Ok(report)
}
