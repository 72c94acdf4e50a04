//! Plan files written by the search tasks and checked by `validate`.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use autoplan::dataproc::CoarsenedArrays;
use autoplan::envs::{coarse_length, DecisionOutcome, PipeInferConfig};
use autoplan::ir::{DimIndex, HloGraph};
use autoplan::pipecost::{plan_length, PipelinePlan, PipelineProfile, StageReport};
use autoplan::sharding::{DimStatus, Outcome, Propagator};
use autoplan::topology::{DeviceTopology, TopologyConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum PlanFile {
    Opp(ShardingPlan),
    Adp(ShardingPlan),
    PpTrain(PipelinePlanFile),
    PpInfer(InferPlanFile),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DimDecision {
    pub instruction: String,
    pub dim: usize,
    pub status: DimStatus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShardingPlan {
    pub graph: String,
    pub partition_count: usize,
    pub replicate_count: usize,
    pub score: f64,
    pub partitioned: Vec<String>,
    pub dims: Vec<DimDecision>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelinePlanFile {
    pub graph: String,
    pub topology: TopologyConfig,
    pub backward_multiplier: f64,
    pub pivots: Vec<String>,
    pub pivot_positions: Vec<usize>,
    pub device_cuts: Vec<usize>,
    pub micro_batches: usize,
    pub micro_batch_size: usize,
    pub stages: Vec<StageReport>,
    pub pipeline_length_s: f64,
    pub memory_feasible: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferPlanFile {
    pub topology: TopologyConfig,
    pub config: PipeInferConfig,
    pub boundaries: Vec<usize>,
    pub device_cuts: Vec<usize>,
    /// Instruction after which each stage ends, when the profile carries names.
    pub pivots: Vec<String>,
    pub pipeline_length_s: f64,
    pub arrays: CoarsenedArrays<f64>,
}

impl ShardingPlan {
    pub fn new(graph_name: &str, g: &HloGraph, prop: &Propagator, out: &DecisionOutcome) -> Self {
        let dims: Vec<DimDecision> = prop
            .candidates()
            .iter()
            .zip(&out.statuses)
            .map(|(d, s)| DimDecision {
                instruction: g.instruction(d.instruction).expect("candidate").name.clone(),
                dim: d.dim,
                status: *s,
            })
            .collect();
        ShardingPlan {
            graph: graph_name.to_string(),
            partition_count: out.partitioned(),
            replicate_count: out.replicated(),
            score: out.score,
            partitioned: dims
                .iter()
                .filter(|d| d.status == DimStatus::Partitioned)
                .map(|d| format!("{}.{}", d.instruction, d.dim))
                .collect(),
            dims,
        }
    }
}

pub fn write_plan(path: &Path, plan: &PlanFile) -> Result<()> {
    let text = serde_json::to_string_pretty(plan)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_plan(path: &Path) -> Result<PlanFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Re-propagates a sharding plan; data-parallel plans keep weights replicated.
pub fn check_sharding(g: &HloGraph, plan: &ShardingPlan, weights_replicated: bool) -> Result<String> {
    let mut seeds = Vec::with_capacity(plan.dims.len());
    let mut dims = Vec::with_capacity(plan.dims.len());
    for d in &plan.dims {
        let node = g
            .node_by_name(&d.instruction)
            .with_context(|| format!("plan names unknown instruction `{}`", d.instruction))?;
        let id = g.node(node).id;
        ensure!(
            d.dim < g.sharding_rank(node),
            "`{}` has no dim {}",
            d.instruction,
            d.dim
        );
        ensure!(d.status.is_decided(), "`{}` dim {} is undecided", d.instruction, d.dim);
        let index = DimIndex {
            flat_index: dims.len(),
            instruction: id,
            dim: d.dim,
        };
        dims.push(index);
        seeds.push((index, d.status));
    }
    if weights_replicated {
        seeds.extend(g.trainable_dims().into_iter().map(|d| (d, DimStatus::Replicated)));
    }
    let result = Propagator::new(g, dims).propagate(&seeds);
    match result.outcome {
        Outcome::Complete => {}
        Outcome::Conflict => bail!(
            "propagation conflicts at {}",
            result
                .conflict_site
                .and_then(|id| g.instruction(id))
                .map_or("an unknown site".to_string(), |i| i.name.clone())
        ),
        Outcome::Incomplete => bail!("plan leaves dims undecided"),
    }
    let p = plan.dims.iter().filter(|d| d.status == DimStatus::Partitioned).count();
    ensure!(
        p == plan.partition_count,
        "partition count {} but {p} dims are partitioned",
        plan.partition_count
    );
    Ok(format!(
        "{} dims, {p} partitioned, propagation complete",
        plan.dims.len()
    ))
}

pub fn check_pipeline(g: &HloGraph, plan: &PipelinePlanFile) -> Result<String> {
    let profile = PipelineProfile::from_graph(g, plan.backward_multiplier)?;
    for (name, &pos) in plan.pivots.iter().zip(&plan.pivot_positions) {
        ensure!(
            profile.names.get(pos) == Some(name),
            "pivot `{name}` is not at forward position {pos}"
        );
    }
    let topo = DeviceTopology::from_config(plan.topology.clone())?;
    let p = PipelinePlan {
        pivots: plan.pivot_positions.clone(),
        device_cuts: plan.device_cuts.clone(),
        micro_batches: plan.micro_batches,
        micro_batch_size: plan.micro_batch_size,
    };
    let length = plan_length(&p, &profile, &topo)?;
    ensure!(
        close(length, plan.pipeline_length_s),
        "recorded pipeline length {} but the cost model gives {length}",
        plan.pipeline_length_s
    );
    Ok(format!("{} stages, pipeline length {length:.6} s", p.stages()))
}

pub fn check_infer(plan: &InferPlanFile) -> Result<String> {
    let topo = DeviceTopology::from_config(plan.topology.clone())?;
    let length = coarse_length(&plan.arrays, &plan.boundaries, &plan.device_cuts, &topo, &plan.config)?;
    ensure!(
        close(length, plan.pipeline_length_s),
        "recorded pipeline length {} but the cost model gives {length}",
        plan.pipeline_length_s
    );
    Ok(format!(
        "{} stages, pipeline length {length:.6} s",
        plan.boundaries.len() + 1
    ))
}
