//! Pipeline plans, stage metrics and the pipeline-length cost model.

mod profile;

pub use profile::{stage_metrics, PipelineProfile, DEFAULT_BACKWARD_MULTIPLIER};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::InstrId;
use crate::topology::{DeviceGroup, DeviceTopology};

pub const DEFAULT_OPTIMIZER_MULTIPLIER: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipeError {
    #[error("profile has no forward positions")]
    EmptyProfile,
    #[error("profile arrays differ in length")]
    LengthMismatch,
    #[error("profile costs must be finite and nonnegative")]
    NegativeCost,
    #[error("pivots must be strictly increasing")]
    PivotOrder,
    #[error("pivot {0} leaves an empty trailing stage")]
    PivotOutOfRange(usize),
    #[error("instruction {0} is not in the forward subgraph")]
    PivotNotForward(InstrId),
    #[error("device cuts {cuts:?} are invalid for {devices} devices")]
    DeviceCuts { cuts: Vec<usize>, devices: usize },
    #[error("{stages} stages cannot be placed on {devices} devices")]
    TooManyStages { stages: usize, devices: usize },
    #[error("plan has {pivots} pivots but {cuts} device cuts")]
    StageCountMismatch { pivots: usize, cuts: usize },
    #[error("no pivot satisfies the pruning constraints")]
    NoCandidates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub compute_ms: f64,
    pub activation_bytes: f64,
    pub param_bytes: f64,
    pub num_variables: usize,
}

/// Cuts of the forward order and of the linearized device list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinePlan {
    /// Positions in the forward order after which the pipeline is cut.
    pub pivots: Vec<usize>,
    pub device_cuts: Vec<usize>,
    pub micro_batches: usize,
    pub micro_batch_size: usize,
}

impl PipelinePlan {
    pub fn stages(&self) -> usize {
        self.pivots.len() + 1
    }
}

/// Device group of each stage given the cuts.
pub fn stage_groups(device_cuts: &[usize], devices: usize) -> Result<Vec<DeviceGroup>, PipeError> {
    let mut bounds = Vec::with_capacity(device_cuts.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(device_cuts);
    bounds.push(devices);
    if bounds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PipeError::DeviceCuts {
            cuts: device_cuts.to_vec(),
            devices,
        });
    }
    Ok(bounds.windows(2).map(|w| DeviceGroup::new(w[0], w[1])).collect())
}

/// Per-stage time components in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTimes {
    pub compute: Vec<f64>,
    pub activation: Vec<f64>,
    pub allreduce: Vec<f64>,
}

pub fn stage_times(
    metrics: &[StageMetrics],
    device_cuts: &[usize],
    topo: &DeviceTopology,
) -> Result<StageTimes, PipeError> {
    if metrics.len() != device_cuts.len() + 1 {
        return Err(PipeError::StageCountMismatch {
            pivots: metrics.len().saturating_sub(1),
            cuts: device_cuts.len(),
        });
    }
    let groups = stage_groups(device_cuts, topo.num_devices())?;
    let mut t = StageTimes {
        compute: Vec::with_capacity(metrics.len()),
        activation: Vec::with_capacity(metrics.len()),
        allreduce: Vec::with_capacity(metrics.len()),
    };
    for (s, (m, g)) in metrics.iter().zip(&groups).enumerate() {
        t.compute.push(m.compute_ms / 1000.0 / g.len() as f64);
        t.allreduce.push(topo.allreduce_time(m.param_bytes, *g));
        if let Some(next) = groups.get(s + 1) {
            t.activation
                .push(topo.transfer_time(m.activation_bytes, g.hi - 1, next.lo));
        }
    }
    Ok(t)
}

/// Fill-drain pipeline length: (M-1)·max t + Σt + Σa + max r, in seconds.
pub fn pipeline_length(
    micro_batches: usize,
    metrics: &[StageMetrics],
    device_cuts: &[usize],
    topo: &DeviceTopology,
) -> Result<f64, PipeError> {
    let t = stage_times(metrics, device_cuts, topo)?;
    Ok(length_from_times(micro_batches, &t))
}

pub fn length_from_times(micro_batches: usize, t: &StageTimes) -> f64 {
    let max_t = t.compute.iter().copied().fold(0.0, f64::max);
    let max_r = t.allreduce.iter().copied().fold(0.0, f64::max);
    let sum_t: f64 = t.compute.iter().sum();
    let sum_a: f64 = t.activation.iter().sum();
    micro_batches.saturating_sub(1) as f64 * max_t + sum_t + sum_a + max_r
}

pub fn plan_length(plan: &PipelinePlan, profile: &PipelineProfile, topo: &DeviceTopology) -> Result<f64, PipeError> {
    let metrics = profile.stage_metrics(&plan.pivots)?;
    pipeline_length(plan.micro_batches, &metrics, &plan.device_cuts, topo)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub mem_per_device: f64,
    pub optimizer_multiplier: f64,
}

impl MemoryModel {
    pub fn new(mem_per_device: f64) -> Self {
        MemoryModel {
            mem_per_device,
            optimizer_multiplier: DEFAULT_OPTIMIZER_MULTIPLIER,
        }
    }
}

/// Per device: sharded parameter state plus the micro-batch activations
/// entering and leaving the stage must fit.
pub fn memory_feasible(
    micro_batches: usize,
    metrics: &[StageMetrics],
    device_cuts: &[usize],
    devices: usize,
    mem: MemoryModel,
) -> Result<bool, PipeError> {
    let groups = stage_groups(device_cuts, devices)?;
    if groups.len() != metrics.len() {
        return Err(PipeError::StageCountMismatch {
            pivots: metrics.len().saturating_sub(1),
            cuts: device_cuts.len(),
        });
    }
    Ok(metrics.iter().zip(&groups).enumerate().all(|(s, (m, g))| {
        let n = g.len() as f64;
        let act_in = if s > 0 { metrics[s - 1].activation_bytes } else { 0.0 };
        let need =
            m.param_bytes / n * mem.optimizer_multiplier + micro_batches as f64 * (act_in + m.activation_bytes) / n;
        need <= mem.mem_per_device
    }))
}

/// Device counts proportional to stage compute (largest remainder, ties to the
/// lower stage, every stage at least one device), returned as cut positions.
pub fn proportional_device_cuts(compute: &[f64], devices: usize) -> Result<Vec<usize>, PipeError> {
    let k = compute.len();
    if k == 0 || k > devices {
        return Err(PipeError::TooManyStages { stages: k, devices });
    }
    let total: f64 = compute.iter().sum();
    let ideal: Vec<f64> = if total > 0.0 {
        compute.iter().map(|c| c / total * devices as f64).collect()
    } else {
        vec![devices as f64 / k as f64; k]
    };
    let mut counts: Vec<usize> = ideal.iter().map(|x| (x.floor() as usize).max(1)).collect();
    let rem = |s: usize, counts: &[usize]| ideal[s] - counts[s] as f64;
    let mut assigned: usize = counts.iter().sum();
    while assigned < devices {
        let best = (0..k)
            .max_by(|&a, &b| rem(a, &counts).total_cmp(&rem(b, &counts)).then(b.cmp(&a)))
            .expect("non-empty");
        counts[best] += 1;
        assigned += 1;
    }
    while assigned > devices {
        let worst = (0..k)
            .filter(|&s| counts[s] > 1)
            .min_by(|&a, &b| rem(a, &counts).total_cmp(&rem(b, &counts)).then(b.cmp(&a)))
            .expect("k <= devices leaves a reducible stage");
        counts[worst] -= 1;
        assigned -= 1;
    }
    let mut cuts = Vec::with_capacity(k - 1);
    let mut acc = 0;
    for c in &counts[..k - 1] {
        acc += c;
        cuts.push(acc);
    }
    Ok(cuts)
}

/// Device cuts within `radius` of an interior server boundary.
pub fn permitted_device_cuts(topo: &DeviceTopology, radius: usize) -> BTreeSet<usize> {
    let d = topo.num_devices();
    let g = topo.gpus_per_server;
    (1..d)
        .filter(|&c| {
            (1..topo.num_servers).any(|m| {
                let center = m * g;
                c.abs_diff(center) <= radius
            })
        })
        .collect()
}

/// Pivots whose two-stage split maps near a server boundary and leaves
/// trainable variables on both sides.
pub fn candidate_pivots(
    profile: &PipelineProfile,
    topo: &DeviceTopology,
    stages: usize,
    radius: usize,
) -> Result<Vec<usize>, PipeError> {
    if stages > topo.num_devices() {
        return Err(PipeError::TooManyStages {
            stages,
            devices: topo.num_devices(),
        });
    }
    let allowed = permitted_device_cuts(topo, radius);
    let n = profile.len();
    let total = profile.total_compute_ms();
    let mut out = Vec::new();
    for p in 0..n.saturating_sub(1) {
        if profile.vars_between(0, p + 1) == 0 || profile.vars_between(p + 1, n) == 0 {
            continue;
        }
        let prefix = profile.compute_between(0, p + 1);
        let cut = proportional_device_cuts(&[prefix, total - prefix], topo.num_devices())?[0];
        if allowed.contains(&cut) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(PipeError::NoCandidates);
    }
    Ok(out)
}

/// Serialized plan with its evaluated stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub pivots: Vec<String>,
    pub device_cuts: Vec<usize>,
    pub stages: Vec<StageReport>,
    pub pipeline_length_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub compute_ms: f64,
    pub activation_bytes: f64,
    pub param_bytes: f64,
    pub devices: usize,
}

pub fn plan_report(
    plan: &PipelinePlan,
    profile: &PipelineProfile,
    topo: &DeviceTopology,
) -> Result<PlanReport, PipeError> {
    let metrics = profile.stage_metrics(&plan.pivots)?;
    let length = pipeline_length(plan.micro_batches, &metrics, &plan.device_cuts, topo)?;
    let groups = stage_groups(&plan.device_cuts, topo.num_devices())?;
    Ok(PlanReport {
        pivots: plan.pivots.iter().map(|&p| profile.names[p].clone()).collect(),
        device_cuts: plan.device_cuts.clone(),
        stages: metrics
            .iter()
            .zip(&groups)
            .map(|(m, g)| StageReport {
                compute_ms: m.compute_ms,
                activation_bytes: m.activation_bytes,
                param_bytes: m.param_bytes,
                devices: g.len(),
            })
            .collect(),
        pipeline_length_s: length,
    })
}
