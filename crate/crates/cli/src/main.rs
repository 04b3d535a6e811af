use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use landmark_core::pipeline::{self, PipelineConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "landmark", version, about = "Subtask discovery and rule-policy pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Harvest positive and negative trajectories.
    Collect(Common),
    /// Train the contrastive state scorer.
    TrainScorer(Common),
    /// Search candidate states for subtask conjunctions.
    FindSubtasks(Common),
    /// Ask the language-model backend for rule templates.
    GenRules(Common),
    /// Fine-tune rule weights with REINFORCE.
    TrainPolicy(Common),
    /// Evaluate the trained policy, with subtask ablations.
    Evaluate(Common),
    /// Run every stage and write report.json / report.md.
    RunAll(Common),
}

fn load(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(command: &Command) -> Result<(), PipelineError> {
    let (stage, common) = match command {
        Command::Collect(c) => (Some(Stage::Collect), c),
        Command::TrainScorer(c) => (Some(Stage::TrainScorer), c),
        Command::FindSubtasks(c) => (Some(Stage::FindSubtasks), c),
        Command::GenRules(c) => (Some(Stage::GenRules), c),
        Command::TrainPolicy(c) => (Some(Stage::TrainPolicy), c),
        Command::Evaluate(c) => (Some(Stage::Evaluate), c),
        Command::RunAll(c) => (None, c),
    };
    let cfg = load(common)?;
    match stage {
        Some(stage) => {
            let secs = pipeline::run_stage(stage, &cfg)?;
            eprintln!("{stage} finished in {secs:.2}s");
        }
        None => {
            let report = pipeline::run_all(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
