//! `autoplan`: search operator-partitioning, data-parallel and pipeline plans.

mod plan;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use autoplan::agent::AgentError;
use autoplan::dataproc::DataError;
use autoplan::envs::{EnvError, RewardShape};
use autoplan::ir::GraphError;
use autoplan::pipecost::PipeError;
use autoplan::topology::TopologyError;
use clap::{Parser, ValueEnum};
use thiserror::Error;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Opp,
    Adp,
    PpTrain,
    PpInfer,
    GenData,
    Validate,
}

#[derive(Debug, Clone, Parser, serde::Serialize)]
#[command(
    name = "autoplan",
    version,
    about = "Search parallelization plans for training graphs"
)]
pub struct Args {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Graph JSON file, or a bundled graph name (attention_block, t5_block, vgg, uniform_chain).
    #[arg(long)]
    pub graph: Option<String>,
    /// Preset (configA, configB, configC) or topology JSON file.
    #[arg(long, default_value = "configA")]
    pub topology: String,
    #[arg(long, default_value_t = 2)]
    pub stages: usize,
    #[arg(long, default_value_t = 3)]
    pub radius: usize,
    #[arg(long, default_value_t = 8)]
    pub micro_batches: usize,
    #[arg(long, default_value_t = 1)]
    pub micro_batch_size: usize,
    /// Training episodes; per generated environment for pp-infer.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for plan.json, curve.csv and summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Second search stage from the best strategy (opp), or on the target profile (pp-infer).
    #[arg(long)]
    pub finetune: bool,
    #[arg(long)]
    pub finetune_episodes: Option<usize>,
    #[arg(long, default_value = "inv")]
    pub reward_shape: RewardShape,
    /// JSON-lines episode trace file.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Plan file to check (validate).
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Target profile for pp-infer (JSON or CSV with C, A, W).
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Generator distribution: uniform, normal or binomial.
    #[arg(long, default_value = "uniform")]
    pub dist: String,
    /// Number of generated environments (gen-data).
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Raw profile length of generated environments.
    #[arg(long, default_value_t = 1024)]
    pub length: usize,
    /// Generated training environments for pp-infer.
    #[arg(long, default_value_t = 20)]
    pub train_envs: usize,
    /// Device memory in GiB; enables the memory check in pp-train.
    #[arg(long)]
    pub mem_per_device_gib: Option<f64>,
    #[arg(long, default_value_t = autoplan::pipecost::DEFAULT_BACKWARD_MULTIPLIER)]
    pub backward_multiplier: f64,
    /// Linkage group cache file (opp).
    #[arg(long)]
    pub linkage_cache: Option<PathBuf>,
    /// Writes the trained agent here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub buffer: Option<usize>,
    #[arg(long)]
    pub eps_start: Option<f64>,
    #[arg(long)]
    pub eps_end: Option<f64>,
    #[arg(long)]
    pub eps_decay: Option<u64>,
    #[arg(long)]
    pub target_sync: Option<u64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

/// Failures that map to a dedicated exit status.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("plan is inconsistent: {0}")]
    Invalid(String),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => 2,
                Failure::Infeasible(_) => 3,
                Failure::Invalid(_) => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<AgentError>() {
            return if matches!(e, AgentError::Divergence(_)) { 4 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<EnvError>() {
            return match e {
                EnvError::Infeasible(_) | EnvError::NoStrategy(_) => 3,
                EnvError::Pipe(p) => pipe_code(p),
                _ => 1,
            };
        }
        if let Some(p) = cause.downcast_ref::<PipeError>() {
            return pipe_code(p);
        }
        if cause.is::<GraphError>() || cause.is::<TopologyError>() || cause.is::<DataError>() {
            return 2;
        }
    }
    1
}

fn pipe_code(p: &PipeError) -> u8 {
    match p {
        PipeError::NoCandidates | PipeError::TooManyStages { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
