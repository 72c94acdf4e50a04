//! Markov decision environments for the three search tasks.

mod decision;
mod pp_infer;
mod pp_train;

pub use decision::{adp_candidates, DecisionEnv, DecisionOutcome, Rewards, ACTION_PARTITION, ACTION_REPLICATE};
pub use pp_infer::{boundary_to_pivot, coarse_length, InferOutcome, PipeInferConfig, PipeInferEnv};
pub use pp_train::{PipeTrainConfig, PipeTrainEnv, RewardShape, TrainOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipecost::PipeError;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode is already done")]
    StepAfterDone,
    #[error("action {0} is masked in the current state")]
    MaskedAction(usize),
    #[error("action {action} is outside the action space of {count}")]
    ActionOutOfRange { action: usize, count: usize },
    #[error("no completed strategy to finetune: {0}")]
    NoStrategy(String),
    #[error("no action is available: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Pipe(#[from] PipeError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub conflict: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_feasible: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Quality of a finished plan; higher is better.
pub trait Scored {
    fn score(&self) -> f64;
}

/// Uniform reset/step/mask interface driven by the search loop.
pub trait Environment {
    /// Summary of a finished episode.
    type Outcome: Clone + Scored;

    fn state_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    fn reset(&mut self) -> Vec<f64>;
    fn state(&self) -> Vec<f64>;
    fn action_mask(&self) -> Vec<bool>;
    fn step(&mut self, action: usize) -> Result<StepResult, EnvError>;
    fn is_done(&self) -> bool;
    /// The finished episode's plan, `None` while running or after a failure.
    fn outcome(&self) -> Option<Self::Outcome>;
}

pub(crate) fn check_action(mask: &[bool], action: usize) -> Result<(), EnvError> {
    match mask.get(action) {
        None => Err(EnvError::ActionOutOfRange {
            action,
            count: mask.len(),
        }),
        Some(false) => Err(EnvError::MaskedAction(action)),
        Some(true) => Ok(()),
    }
}
