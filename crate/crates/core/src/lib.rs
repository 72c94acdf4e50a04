//! Plan exploration for distributed training over HLO-like graphs.
//!
//! A pruned deep Q-learning search proposes operator-partitioning,
//! data-parallel and pipeline plans; propagation and a pipeline cost model
//! score them.

pub mod agent;
pub mod dataproc;
pub mod envs;
pub mod ir;
pub mod linkage;
pub mod pipecost;
pub mod scalar;
pub mod search;
pub mod sharding;
pub mod synthetic;
pub mod topology;

pub use scalar::Scalar;

pub type QNetworkF32 = agent::QNetwork<f32>;
pub type QNetworkF64 = agent::QNetwork<f64>;
pub type DqnAgentF32 = agent::DqnAgent<f32>;
pub type DqnAgentF64 = agent::DqnAgent<f64>;
pub type TransitionF32 = agent::Transition<f32>;
pub type TransitionF64 = agent::Transition<f64>;
