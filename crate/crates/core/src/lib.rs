//! Subtask discovery and rule-policy learning for symbolic RL tasks.

pub mod env;
pub mod forge;
pub mod logic;
pub mod pipeline;
pub mod policy;
pub mod scorer;
pub mod search;
pub mod seed;
pub mod trajectory;

pub use env::{Action, EnvConfig, EnvState};
pub use forge::{LlmBackendSpec, PromptBundle};
pub use logic::{
    format_rule, ground_body, parse_rule, project_state, state_to_vector, AtomIndex, GroundAtom,
    LogicError, PredicateSig, Rule, SymbolicState, Vocabulary,
};
pub use pipeline::{PipelineConfig, RunReport, Stage};
pub use policy::{PolicyTrainConfig, WeightedRuleSet};
pub use scorer::{ScorerParams, TrainConfig};
pub use search::{SearchConfig, Subtask};
pub use trajectory::{CollectorSpec, Dataset, Label, Trajectory};
