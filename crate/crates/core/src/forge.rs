//! Rule templates from a chat-completion backend.
//!
//! Prompts are assembled from an environment description, two example rule
//! sets from other environments and the subtask conjunction. Responses are
//! parsed with the rule grammar; failing templates are refined by asking the
//! backend to generalize or specialize them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{self, EnvConfig, EnvError, EnvState};
use crate::logic::{format_rule, parse_rule, GroundAtom, Rule, SymbolicState, Vocabulary};
use crate::policy::{self, PolicyError, WeightedRuleSet};
use crate::seed;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("need at least 2 few-shot examples from other environments, found {0}")]
    InsufficientExamples(usize),
    #[error("backend request timed out")]
    Timeout,
    #[error("backend returned HTTP status {0}")]
    HttpStatus(u16),
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("unexpected backend response: {0}")]
    BadResponse(String),
    #[error("no recorded response for prompt hash {0}")]
    MissingRecording(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("no rules parsed after {attempts} attempts: {last_error}")]
    NoRulesParsed { attempts: usize, last_error: String },
    #[error("specialize needs a failed state")]
    MissingFailedState,
    #[error("rule set is empty")]
    EmptyRules,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed replay store {path}: {message}")]
    ReplayFormat { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    Base,
    Generalize,
    Specialize,
}

impl Directive {
    pub fn as_str(self) -> &'static str {
        match self {
            Directive::Base => "base",
            Directive::Generalize => "generalize",
            Directive::Specialize => "specialize",
        }
    }
}

/// An example rule set shown to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub env: String,
    pub task: String,
    pub rules: String,
}

/// Built-in examples. Callers filter out the environment being prompted for.
pub fn default_few_shot_bank() -> Vec<FewShotExample> {
    let ex = |env: &str, task: &str, rules: &[&str]| FewShotExample {
        env: env.into(),
        task: task.into(),
        rules: rules.join("\n"),
    };
    vec![
        ex(
            "getout",
            "pick up the key",
            &[
                "move_right(X) :- on_left(X, key), type(key, key).",
                "move_left(X) :- on_right(X, key), type(key, key).",
            ],
        ),
        ex(
            "loot",
            "open the chest with its key",
            &[
                "move_right(X) :- have(X, key1), on_left(X, chest1).",
                "move_left(X) :- have(X, key1), on_right(X, chest1).",
            ],
        ),
        ex(
            "threefish",
            "eat the smaller fish",
            &[
                "up(X) :- above(X, fish), smaller(fish, X).",
                "down(X) :- below(X, fish), smaller(fish, X).",
            ],
        ),
        ex(
            "kangaroo",
            "climb the ladder",
            &[
                "move_right(X) :- on_left(X, ladder).",
                "up(X) :- closeby(X, ladder).",
            ],
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub constant_section: String,
    pub few_shot: Vec<String>,
    pub subtask_section: String,
    pub directive: Directive,
    pub current_rules: Option<String>,
    pub failed_state: Option<String>,
}

const OUTPUT_FORMAT: &str = "Answer with rules only, one per line, inside a single fenced block \
(```). Each rule has the form `action(X) :- pred(X, obj), ... .` where the head is one of the \
actions above, variables start with an upper-case letter and every constant appears in the \
object list.";

impl PromptBundle {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.constant_section);
        out.push('\n');
        for (i, ex) in self.few_shot.iter().enumerate() {
            let _ = write!(out, "\nExample {}:\n{ex}\n", i + 1);
        }
        let _ = write!(out, "\nSubtask: {}\n", self.subtask_section);
        match self.directive {
            Directive::Base => {
                out.push_str("\nWrite rules that make the agent achieve this subtask.\n");
            }
            Directive::Generalize | Directive::Specialize => {
                let rules = self.current_rules.as_deref().unwrap_or("");
                let _ = write!(out, "\nCurrent rules:\n```\n{rules}\n```\n");
                if let Some(state) = &self.failed_state {
                    let _ = write!(out, "\nThe rules failed in this state:\n{state}\n");
                }
                if self.directive == Directive::Generalize {
                    out.push_str(
                        "\nThe rules never achieved the subtask. Generalize them by removing \
                         predicates from rule bodies or adding rules.\n",
                    );
                } else {
                    out.push_str(
                        "\nThe rules achieved the subtask only sometimes. Specialize them by \
                         adding predicates or rules that handle the failed state.\n",
                    );
                }
            }
        }
        out.push('\n');
        out.push_str(OUTPUT_FORMAT);
        out.push('\n');
        out
    }

    pub fn hash(&self) -> String {
        prompt_hash(&self.render())
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Predicate definitions and an overview of the environment.
pub fn describe_env(config: &EnvConfig, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Environment: {} on a {}x{} grid. The agent moves left or right, jumps between lanes \
         and picks up objects next to it. Subtasks must be completed in order.",
        config.env_name.as_str(),
        config.grid_width,
        config.grid_height
    );
    out.push_str("Predicates:\n");
    for p in &vocab.predicates {
        let _ = writeln!(out, "  {}({})", p.name, p.arg_sorts.join(", "));
    }
    let actions: Vec<&str> = vocab.actions.iter().map(|a| a.name.as_str()).collect();
    let _ = writeln!(out, "Actions: {}", actions.join(", "));
    for (sort, consts) in &vocab.constants {
        let _ = writeln!(out, "Constants of sort {sort}: {}", consts.join(", "));
    }
    out
}

pub fn render_conjunction(atoms: &BTreeSet<GroundAtom>) -> String {
    atoms.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

pub fn build_base_prompt(
    subtask: &BTreeSet<GroundAtom>,
    env_name: &str,
    env_description: &str,
    bank: &[FewShotExample],
) -> Result<PromptBundle, ForgeError> {
    let others: Vec<&FewShotExample> = bank.iter().filter(|e| e.env != env_name).collect();
    if others.len() < 2 {
        return Err(ForgeError::InsufficientExamples(others.len()));
    }
    let few_shot = others[..2]
        .iter()
        .map(|e| format!("Environment {}, task: {}\n```\n{}\n```", e.env, e.task, e.rules))
        .collect();
    Ok(PromptBundle {
        constant_section: env_description.to_string(),
        few_shot,
        subtask_section: render_conjunction(subtask),
        directive: Directive::Base,
        current_rules: None,
        failed_state: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Replay,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    500
}

fn default_temperature() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmBackendSpec {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub replay_path: Option<PathBuf>,
    /// Replay misses are forwarded to `endpoint` and appended to the store.
    #[serde(default)]
    pub record: bool,
}

impl LlmBackendSpec {
    pub fn http(endpoint: &str, model: &str) -> Self {
        LlmBackendSpec {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            temperature: default_temperature(),
            replay_path: None,
            record: false,
        }
    }

    pub fn replay(path: &Path) -> Self {
        LlmBackendSpec {
            kind: BackendKind::Replay,
            endpoint: None,
            model: None,
            replay_path: Some(path.to_path_buf()),
            ..LlmBackendSpec::http("", "")
        }
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        let needs_http = self.kind == BackendKind::Http || self.record;
        if needs_http && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(ForgeError::InvalidSpec("endpoint and model are required".into()));
        }
        if self.kind == BackendKind::Replay && self.replay_path.is_none() {
            return Err(ForgeError::InvalidSpec("replay backend needs replay_path".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ForgeError::InvalidSpec("timeout_secs must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ForgeError::InvalidSpec("temperature must be in [0, 2]".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

fn http_once(spec: &LlmBackendSpec, prompt: &str) -> Result<String, ForgeError> {
    let endpoint = spec.endpoint.as_deref().unwrap_or_default();
    let body = ChatRequest {
        model: spec.model.as_deref().unwrap_or_default(),
        messages: [ChatMessage {
            role: "user",
            content: prompt,
        }],
        temperature: spec.temperature,
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(spec.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut req = agent.post(endpoint);
    if let Some(var) = &spec.api_key_env {
        let key = std::env::var(var).map_err(|_| ForgeError::MissingApiKey(var.clone()))?;
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(&body).map_err(transport_error)?;
    let status = resp.status().as_u16();
    if status != 200 {
        return Err(ForgeError::HttpStatus(status));
    }
    let value: serde_json::Value = resp.body_mut().read_json().map_err(transport_error)?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| ForgeError::BadResponse("missing choices[0].message.content".into()))
}

fn transport_error(e: ureq::Error) -> ForgeError {
    match e {
        ureq::Error::Timeout(_) => ForgeError::Timeout,
        other => ForgeError::Transport(other.to_string()),
    }
}

fn retryable(e: &ForgeError) -> bool {
    match e {
        ForgeError::Timeout | ForgeError::Transport(_) => true,
        ForgeError::HttpStatus(code) => *code == 429 || *code >= 500,
        _ => false,
    }
}

fn http_complete(spec: &LlmBackendSpec, prompt: &str) -> Result<String, ForgeError> {
    let mut attempt = 0;
    loop {
        match http_once(spec, prompt) {
            Err(e) if retryable(&e) && attempt < spec.max_retries => {
                std::thread::sleep(Duration::from_millis(spec.backoff_ms << attempt));
                attempt += 1;
            }
            other => return other,
        }
    }
}

fn load_store(path: &Path) -> Result<BTreeMap<String, String>, ForgeError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(source) => {
            return Err(ForgeError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    serde_json::from_str(&text).map_err(|e| ForgeError::ReplayFormat {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn save_store(path: &Path, store: &BTreeMap<String, String>) -> Result<(), ForgeError> {
    let text = serde_json::to_string_pretty(store).expect("string map serializes") + "\n";
    std::fs::write(path, text).map_err(|source| ForgeError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Response text for `prompt`.
pub fn complete(spec: &LlmBackendSpec, prompt: &str) -> Result<String, ForgeError> {
    spec.validate()?;
    match spec.kind {
        BackendKind::Http => http_complete(spec, prompt),
        BackendKind::Replay => {
            let path = spec.replay_path.as_deref().expect("validated");
            let mut store = load_store(path)?;
            let key = prompt_hash(prompt);
            if let Some(text) = store.get(&key) {
                return Ok(text.clone());
            }
            if !spec.record {
                return Err(ForgeError::MissingRecording(key));
            }
            let text = http_complete(spec, prompt)?;
            store.insert(key, text.clone());
            save_store(path, &store)?;
            Ok(text)
        }
    }
}

/// Body of the first ``` fenced block, if any.
pub fn first_fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // Skip an info string such as ```prolog.
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

fn parse_block(text: &str, vocab: &Vocabulary) -> (Vec<Rule>, Option<String>) {
    let Some(block) = first_fenced_block(text) else {
        return (Vec::new(), Some("no fenced block found".into()));
    };
    let mut rules = Vec::new();
    let mut error = None;
    for (i, line) in block.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        match parse_rule(line, vocab) {
            Ok(r) if !rules.contains(&r) => rules.push(r),
            Ok(_) => {}
            Err(e) => {
                if error.is_none() {
                    error = Some(format!("line {} `{line}`: {e}", i + 1));
                }
            }
        }
    }
    (rules, error)
}

/// Sends the bundle and parses the first fenced block of the reply. A parse
/// failure triggers one re-prompt carrying the error message.
pub fn generate_rules(
    spec: &LlmBackendSpec,
    bundle: &PromptBundle,
    vocab: &Vocabulary,
) -> Result<Vec<Rule>, ForgeError> {
    let prompt = bundle.render();
    let (rules, error) = parse_block(&complete(spec, &prompt)?, vocab);
    let Some(error) = error else {
        return if rules.is_empty() {
            Err(ForgeError::NoRulesParsed {
                attempts: 1,
                last_error: "empty rule block".into(),
            })
        } else {
            Ok(rules)
        };
    };
    let retry = format!(
        "{prompt}\nYour previous output failed to parse at {error}. Reply again with every rule \
         in the required format.\n"
    );
    let (rules, error) = parse_block(&complete(spec, &retry)?, vocab);
    if rules.is_empty() {
        return Err(ForgeError::NoRulesParsed {
            attempts: 2,
            last_error: error.unwrap_or_else(|| "empty rule block".into()),
        });
    }
    Ok(rules)
}

pub fn rules_text(rules: &[Rule]) -> String {
    rules.iter().map(format_rule).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub rules: Vec<Rule>,
    /// The backend produced nothing usable and the input rules were kept.
    pub fell_back: bool,
}

pub fn refine_rules(
    spec: &LlmBackendSpec,
    base: &PromptBundle,
    rules: &[Rule],
    failed_state: Option<&SymbolicState>,
    direction: Directive,
    vocab: &Vocabulary,
) -> Result<Refinement, ForgeError> {
    if direction == Directive::Base {
        return Err(ForgeError::InvalidSpec("refinement direction must not be base".into()));
    }
    if direction == Directive::Specialize && failed_state.is_none() {
        return Err(ForgeError::MissingFailedState);
    }
    let bundle = PromptBundle {
        directive: direction,
        current_rules: Some(rules_text(rules)),
        failed_state: failed_state.map(ToString::to_string),
        ..base.clone()
    };
    match generate_rules(spec, &bundle, vocab) {
        Ok(rules) => Ok(Refinement {
            rules,
            fell_back: false,
        }),
        Err(ForgeError::NoRulesParsed { .. }) => Ok(Refinement {
            rules: rules.to_vec(),
            fell_back: true,
        }),
        Err(e) => Err(e),
    }
}

/// Completed-subtask count the subtask starts from: the first planted
/// conjunction that contains it, or 0 when none does.
pub fn start_progress(config: &EnvConfig, subtask: &BTreeSet<GroundAtom>) -> usize {
    env::planted_conjunctions(config)
        .iter()
        .position(|p| subtask.is_subset(p))
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateEval {
    pub success_rate: f64,
    pub failed_state: SymbolicState,
}

fn template_episode(
    policy: &WeightedRuleSet,
    start: EnvState,
    subtask: &BTreeSet<GroundAtom>,
) -> Result<(bool, f64, SymbolicState), ForgeError> {
    let mut state = start;
    let mut total = 0.0;
    loop {
        let sym = env::symbolize(&state);
        if sym.satisfies(subtask) {
            return Ok((true, total, sym));
        }
        if state.terminal.is_some() {
            return Ok((false, total, sym));
        }
        let action = policy::greedy_action(policy, &sym)?;
        let (next, reward, _) = env::step(&state, action)?;
        total += reward;
        state = next;
    }
}

/// Greedy unit-weight policy on the environment truncated at `subtask`.
/// Returns the success rate and the final state of the lowest-return
/// episode (earliest on ties).
pub fn evaluate_templates(
    rules: &[Rule],
    config: &EnvConfig,
    vocab: &Vocabulary,
    subtask: &BTreeSet<GroundAtom>,
    n_episodes: usize,
) -> Result<TemplateEval, ForgeError> {
    if rules.is_empty() {
        return Err(ForgeError::EmptyRules);
    }
    let policy = WeightedRuleSet::new(rules.to_vec(), vec![1.0; rules.len()], vocab)?;
    let progress = start_progress(config, subtask);
    if n_episodes == 0 {
        let start = env::reset_with_progress(config, progress)?;
        return Ok(TemplateEval {
            success_rate: 0.0,
            failed_state: env::symbolize(&start),
        });
    }
    let mut successes = 0usize;
    let mut worst: Option<(f64, SymbolicState)> = None;
    for ep in 0..n_episodes {
        let cfg = config.with_seed(seed::stream_seed(config.seed, ep as u64));
        let start = env::reset_with_progress(&cfg, progress)?;
        let (ok, ret, last) = template_episode(&policy, start, subtask)?;
        successes += usize::from(ok);
        if worst.as_ref().is_none_or(|(w, _)| ret < *w) {
            worst = Some((ret, last));
        }
    }
    Ok(TemplateEval {
        success_rate: successes as f64 / n_episodes as f64,
        failed_state: worst.expect("at least one episode").1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub max_refinements: usize,
    pub eval_episodes: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_refinements: 5,
            eval_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeStep {
    pub directive: Directive,
    pub rules: Vec<Rule>,
    pub success_rate: f64,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgedRules {
    pub rules: Vec<Rule>,
    pub history: Vec<ForgeStep>,
}

/// Base prompt, then refinement until the templates always achieve the
/// subtask or the refinement budget runs out. Specialize when some episodes
/// succeed, generalize when none do.
pub fn forge_subtask_rules(
    spec: &LlmBackendSpec,
    config: &EnvConfig,
    vocab: &Vocabulary,
    subtask: &BTreeSet<GroundAtom>,
    bank: &[FewShotExample],
    refine: &RefineConfig,
) -> Result<ForgedRules, ForgeError> {
    let description = describe_env(config, vocab);
    let base = build_base_prompt(subtask, config.env_name.as_str(), &description, bank)?;
    let mut rules = generate_rules(spec, &base, vocab)?;
    let mut eval = evaluate_templates(&rules, config, vocab, subtask, refine.eval_episodes)?;
    let mut history = vec![ForgeStep {
        directive: Directive::Base,
        rules: rules.clone(),
        success_rate: eval.success_rate,
        fell_back: false,
    }];
    for _ in 0..refine.max_refinements {
        if eval.success_rate >= 1.0 {
            break;
        }
        let direction = if eval.success_rate > 0.0 {
            Directive::Specialize
        } else {
            Directive::Generalize
        };
        let step = refine_rules(spec, &base, &rules, Some(&eval.failed_state), direction, vocab)?;
        rules = step.rules;
        eval = evaluate_templates(&rules, config, vocab, subtask, refine.eval_episodes)?;
        history.push(ForgeStep {
            directive: direction,
            rules: rules.clone(),
            success_rate: eval.success_rate,
            fell_back: step.fell_back,
        });
    }
    Ok(ForgedRules { rules, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvName, ObjectSpec, SubtaskSpec, VocabularyMode};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    type Handler = Box<dyn Fn(usize, &str) -> (u16, String) + Send>;

    /// Minimal chat-completion server. The handler sees the call index and
    /// the prompt and returns a status and the message content.
    struct Stub {
        url: String,
        prompts: Arc<Mutex<Vec<String>>>,
    }

    fn stub(handler: Handler) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let prompts = Arc::new(Mutex::new(Vec::new()));
        let seen = prompts.clone();
        std::thread::spawn(move || {
            for (i, conn) in listener.incoming().enumerate() {
                let Ok(mut conn) = conn else { break };
                let mut reader = BufReader::new(conn.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                let prompt = req["messages"][0]["content"].as_str().unwrap().to_string();
                seen.lock().unwrap().push(prompt.clone());
                let (status, content) = handler(i, &prompt);
                let payload = serde_json::json!({
                    "choices": [{"message": {"role": "assistant", "content": content}}]
                })
                .to_string();
                let _ = write!(
                    conn,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        Stub { url, prompts }
    }

    fn http_spec(url: &str) -> LlmBackendSpec {
        LlmBackendSpec {
            backoff_ms: 1,
            timeout_secs: 5.0,
            ..LlmBackendSpec::http(url, "test-model")
        }
    }

    fn fenced(lines: &[&str]) -> String {
        format!("Here you go:\n```prolog\n{}\n```\n", lines.join("\n"))
    }

    fn getout() -> (EnvConfig, Vocabulary) {
        let cfg = EnvConfig::getout_mini();
        let v = env::vocabulary(&cfg);
        (cfg, v)
    }

    fn coin_bundle() -> PromptBundle {
        let (cfg, v) = getout();
        let coin = &env::planted_conjunctions(&cfg)[0];
        build_base_prompt(coin, "getout", &describe_env(&cfg, &v), &default_few_shot_bank()).unwrap()
    }

    #[test]
    fn base_prompt_sections() {
        let (cfg, v) = getout();
        let b = coin_bundle();
        assert_eq!(b.few_shot.len(), 2);
        assert!(b.few_shot.iter().all(|e| !e.contains("Environment getout")));
        assert!(b.subtask_section.contains("picked(coin1), picked(coin2)"));
        let text = b.render();
        let order: Vec<usize> = ["Predicates:", "Example 1:", "Example 2:", "Subtask:", "fenced block"]
            .iter()
            .map(|s| text.find(s).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(coin_bundle().render(), text);
        assert_eq!(coin_bundle().hash(), b.hash());

        let star = EnvConfig::getout_star();
        let coin = &env::planted_conjunctions(&star)[0];
        let sb = build_base_prompt(coin, "getout", &describe_env(&star, &env::vocabulary(&star)), &default_few_shot_bank()).unwrap();
        assert!(sb.subtask_section.contains("closeby(agent, coin1), closeby(agent, coin2)"));
        assert!(!sb.subtask_section.contains("picked"));

        let one = &default_few_shot_bank()[..2];
        let err = build_base_prompt(coin, "getout", &describe_env(&cfg, &v), one).unwrap_err();
        assert!(matches!(err, ForgeError::InsufficientExamples(1)));
    }

    #[test]
    fn fenced_block_extraction() {
        assert_eq!(first_fenced_block("a\n```\nx.\n```\nb"), Some("x.\n"));
        assert_eq!(first_fenced_block("```prolog\ny.\n```\n```\nz.\n```"), Some("y.\n"));
        assert_eq!(first_fenced_block("no block"), None);
        assert_eq!(first_fenced_block("```\nunterminated"), None);
    }

    #[test]
    fn replay_returns_recordings_and_reports_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.json");
        let mut store = BTreeMap::new();
        store.insert(prompt_hash("hello"), "recorded text".to_string());
        save_store(&path, &store).unwrap();
        let spec = LlmBackendSpec::replay(&path);
        assert_eq!(complete(&spec, "hello").unwrap(), "recorded text");
        match complete(&spec, "other") {
            Err(ForgeError::MissingRecording(h)) => assert_eq!(h, prompt_hash("other")),
            other => panic!("{other:?}"),
        }
        assert!(LlmBackendSpec { replay_path: None, ..spec }.validate().is_err());
        assert!(LlmBackendSpec { endpoint: None, ..http_spec("x") }.validate().is_err());
    }

    #[test]
    fn http_backend_against_stub() {
        let s = stub(Box::new(|_, _| (200, "fixed text".into())));
        assert_eq!(complete(&http_spec(&s.url), "prompt one").unwrap(), "fixed text");
        assert_eq!(s.prompts.lock().unwrap().as_slice(), ["prompt one"]);
    }

    #[test]
    fn http_retries_server_errors_then_gives_up() {
        let s = stub(Box::new(|i, _| if i < 2 { (503, String::new()) } else { (200, "ok".into()) }));
        assert_eq!(complete(&http_spec(&s.url), "p").unwrap(), "ok");
        assert_eq!(s.prompts.lock().unwrap().len(), 3);

        let s = stub(Box::new(|_, _| (500, String::new())));
        let spec = LlmBackendSpec { max_retries: 2, ..http_spec(&s.url) };
        assert!(matches!(complete(&spec, "p"), Err(ForgeError::HttpStatus(500))));
        assert_eq!(s.prompts.lock().unwrap().len(), 3);

        let s = stub(Box::new(|_, _| (404, String::new())));
        assert!(matches!(complete(&http_spec(&s.url), "p"), Err(ForgeError::HttpStatus(404))));
        assert_eq!(s.prompts.lock().unwrap().len(), 1);
    }

    #[test]
    fn http_timeout() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let hold = std::thread::spawn(move || {
            let conns: Vec<_> = listener.incoming().take(1).collect();
            std::thread::sleep(Duration::from_millis(1500));
            drop(conns);
        });
        let spec = LlmBackendSpec {
            timeout_secs: 0.3,
            max_retries: 0,
            ..http_spec(&url)
        };
        assert!(matches!(complete(&spec, "p"), Err(ForgeError::Timeout)));
        hold.join().unwrap();
    }

    #[test]
    fn missing_api_key_variable() {
        let spec = LlmBackendSpec {
            api_key_env: Some("LANDMARK_TEST_UNSET_KEY".into()),
            ..http_spec("http://127.0.0.1:9/")
        };
        assert!(matches!(complete(&spec, "p"), Err(ForgeError::MissingApiKey(_))));
    }

    #[test]
    fn generate_rules_with_reprompt() {
        let (_, v) = getout();
        let b = coin_bundle();
        let s = stub(Box::new(|_, _| (200, fenced(&["move_right(X) :- on_left(X, coin1)."]))));
        let rules = generate_rules(&http_spec(&s.url), &b, &v).unwrap();
        assert_eq!(rules_text(&rules), "move_right(X) :- on_left(X, coin1).");

        let good = [
            "move_right(X) :- on_left(X, coin1).",
            "move_left(X) :- on_right(X, coin1).",
            "jump(X) :- closeby(X, coin2).",
        ];
        let s = stub(Box::new(move |i, _| {
            if i == 0 {
                let mut lines = good.to_vec();
                lines.insert(1, "move_right(X) :- on_left(X, unicorn).");
                (200, fenced(&lines))
            } else {
                (200, fenced(&good))
            }
        }));
        let rules = generate_rules(&http_spec(&s.url), &b, &v).unwrap();
        assert_eq!(rules.len(), 3);
        let prompts = s.prompts.lock().unwrap();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[1].contains("failed to parse at line 2"));
        // Grammar closure: every rule re-formats and re-parses to itself.
        for r in &rules {
            assert_eq!(&parse_rule(&format_rule(r), &v).unwrap(), r);
        }

        let s = stub(Box::new(|_, _| (200, "I cannot help with that.".into())));
        match generate_rules(&http_spec(&s.url), &b, &v) {
            Err(ForgeError::NoRulesParsed { attempts: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn refine_rules_directions() {
        let (_, v) = getout();
        let b = coin_bundle();
        let start = vec![parse_rule("move_right(X) :- closeby(X, coin1), on_left(X, coin1).", &v).unwrap()];
        let s = stub(Box::new(|_, p| {
            assert!(p.contains("Generalize"));
            assert!(p.contains("move_right(X) :- closeby(X, coin1), on_left(X, coin1)."));
            (200, fenced(&["move_right(X) :- on_left(X, coin1)."]))
        }));
        let out = refine_rules(&http_spec(&s.url), &b, &start, None, Directive::Generalize, &v).unwrap();
        assert_eq!(rules_text(&out.rules), "move_right(X) :- on_left(X, coin1).");
        assert!(!out.fell_back);

        assert!(matches!(
            refine_rules(&http_spec(&s.url), &b, &start, None, Directive::Specialize, &v),
            Err(ForgeError::MissingFailedState)
        ));

        let s = stub(Box::new(|_, _| (200, "```\n```".into())));
        let failed = SymbolicState::new([GroundAtom::new("on_left", &["agent", "coin1"])]);
        let out = refine_rules(&http_spec(&s.url), &b, &start, Some(&failed), Directive::Specialize, &v).unwrap();
        assert!(out.fell_back);
        assert_eq!(out.rules, start);
        assert!(s.prompts.lock().unwrap()[0].contains("on_left(agent, coin1)"));
    }

    /// One flag, agent on the left or right of it depending on the seed.
    fn corridor(start: i32) -> EnvConfig {
        EnvConfig {
            env_name: EnvName::GetOut,
            vocabulary: VocabularyMode::Full,
            grid_width: 9,
            grid_height: 2,
            agent_start: [start, 0],
            object_layout: vec![ObjectSpec {
                name: "flag".into(),
                kind: "flag".into(),
                pos: [4, 0],
            }],
            subtask_spec: vec![SubtaskSpec {
                id: "flag".into(),
                objects: vec!["flag".into()],
            }],
            max_steps: 30,
            shuffle_layout: false,
            ..EnvConfig::getout_mini()
        }
    }

    #[test]
    fn template_evaluation_by_simulation() {
        let cfg = corridor(0);
        let v = env::vocabulary(&cfg);
        let goal = env::planted_conjunctions(&cfg)[0].clone();
        let right = vec![parse_rule("move_right(X) :- on_left(X, flag).", &v).unwrap()];
        let e = evaluate_templates(&right, &cfg, &v, &goal, 5).unwrap();
        assert_eq!(e.success_rate, 1.0);
        assert!(e.failed_state.satisfies(&goal));

        // Both sides: the agent starts left or right of the flag.
        let both = EnvConfig {
            shuffle_layout: true,
            object_layout: vec![ObjectSpec {
                name: "flag".into(),
                kind: "flag".into(),
                pos: [2, 0],
            }],
            agent_start: [7, 0],
            ..cfg.clone()
        };
        let bare = vec![parse_rule("move_right(X).", &v).unwrap()];
        let e = evaluate_templates(&bare, &both, &v, &goal, 40).unwrap();
        assert!(e.success_rate > 0.0 && e.success_rate < 1.0, "{}", e.success_rate);
        assert!(!e.failed_state.satisfies(&goal));

        let e = evaluate_templates(&bare, &both, &v, &goal, 0).unwrap();
        assert_eq!(e.success_rate, 0.0);
        assert_eq!(e.failed_state, env::symbolize(&env::reset(&both).unwrap()));
        assert!(matches!(evaluate_templates(&[], &both, &v, &goal, 3), Err(ForgeError::EmptyRules)));
    }

    #[test]
    fn start_progress_follows_planted_order() {
        let (cfg, _) = getout();
        let planted = env::planted_conjunctions(&cfg);
        for (k, p) in planted.iter().enumerate() {
            assert_eq!(start_progress(&cfg, p), k);
        }
    }

    /// Stub policy: a partial first answer, complete rules on refinement.
    fn scripted(_: usize, prompt: &str) -> (u16, String) {
        let subtask = prompt.lines().find_map(|l| l.strip_prefix("Subtask: ")).unwrap_or("");
        let mut objects: Vec<&str> = subtask
            .split("), ")
            .filter_map(|a| a.strip_prefix("closeby(agent, "))
            .map(|o| o.trim_end_matches(')'))
            .collect();
        objects.dedup();
        let mut lines = Vec::new();
        for o in objects {
            lines.push(format!("move_right(X) :- on_left(X, {o})."));
            if prompt.contains("Current rules:") {
                lines.push(format!("move_left(X) :- on_right(X, {o})."));
            }
        }
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        (200, fenced(&refs))
    }

    #[test]
    fn record_then_replay_reproduces_the_session() {
        let (cfg, v) = getout();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.json");
        let s = stub(Box::new(scripted));
        let record = LlmBackendSpec {
            record: true,
            replay_path: Some(path.clone()),
            kind: BackendKind::Replay,
            ..http_spec(&s.url)
        };
        let bank = default_few_shot_bank();
        let rc = RefineConfig::default();
        let flag = env::planted_conjunctions(&cfg)[1].clone();
        let live = forge_subtask_rules(&record, &cfg, &v, &flag, &bank, &rc).unwrap();
        assert_eq!(live.history[0].directive, Directive::Base);
        assert!(live.history[0].success_rate < 1.0);
        assert_eq!(live.history.last().unwrap().success_rate, 1.0);
        assert!(live.history.len() >= 2);
        let calls = s.prompts.lock().unwrap().len();
        assert_eq!(calls, live.history.len());
        let recorded = std::fs::read(&path).unwrap();

        let replay = LlmBackendSpec::replay(&path);
        let again = forge_subtask_rules(&replay, &cfg, &v, &flag, &bank, &rc).unwrap();
        assert_eq!(again, live);
        assert_eq!(s.prompts.lock().unwrap().len(), calls);
        assert_eq!(std::fs::read(&path).unwrap(), recorded);
    }
}
