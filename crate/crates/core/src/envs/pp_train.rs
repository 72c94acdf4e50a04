use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_action, EnvError, Environment, Scored, StepInfo, StepResult};
use crate::pipecost::{
    candidate_pivots, memory_feasible, pipeline_length, proportional_device_cuts, stage_times, MemoryModel, PipeError,
    PipelinePlan, PipelineProfile,
};
use crate::topology::DeviceTopology;

/// Terminal reward as a function of the pipeline length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardShape {
    #[default]
    Inv,
    InvSqrt,
}

impl RewardShape {
    pub fn reward(self, length: f64, feasible: bool) -> f64 {
        if !feasible {
            return -1.0 / length.sqrt();
        }
        match self {
            RewardShape::Inv => 1.0 / length,
            RewardShape::InvSqrt => 1.0 / length.sqrt(),
        }
    }
}

impl FromStr for RewardShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inv" => Ok(RewardShape::Inv),
            "inv-sqrt" => Ok(RewardShape::InvSqrt),
            other => Err(format!("unknown reward shape `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipeTrainConfig {
    pub stages: usize,
    pub radius: usize,
    pub micro_batches: usize,
    pub micro_batch_size: usize,
    pub reward_shape: RewardShape,
    /// No memory check when absent.
    pub memory: Option<MemoryModel>,
}

impl Default for PipeTrainConfig {
    fn default() -> Self {
        PipeTrainConfig {
            stages: 2,
            radius: 3,
            micro_batches: 8,
            micro_batch_size: 1,
            reward_shape: RewardShape::Inv,
            memory: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub plan: PipelinePlan,
    pub pipeline_length: f64,
    pub memory_feasible: bool,
    pub reward: f64,
}

/// Chooses K-1 pivots among the pruned candidates, one per step.
#[derive(Clone)]
pub struct PipeTrainEnv {
    profile: Arc<PipelineProfile>,
    topo: Arc<DeviceTopology>,
    config: PipeTrainConfig,
    candidates: Vec<usize>,
    /// reach[r][j]: after cutting at candidate j, r more cuts can still be placed.
    reach: Vec<Vec<bool>>,
    chosen: Vec<usize>,
    outcome: Option<TrainOutcome>,
}

impl PipeTrainEnv {
    pub fn new(
        profile: Arc<PipelineProfile>,
        topo: Arc<DeviceTopology>,
        config: PipeTrainConfig,
    ) -> Result<Self, EnvError> {
        if config.stages < 2 {
            return Err(EnvError::Infeasible("a pipeline needs at least two stages".into()));
        }
        let candidates = candidate_pivots(&profile, &topo, config.stages, config.radius)?;
        let n = profile.len();
        let c = candidates.len();
        let mut reach = vec![vec![false; c]; config.stages - 1];
        for j in 0..c {
            reach[0][j] = profile.vars_between(candidates[j] + 1, n) > 0;
        }
        for r in 1..config.stages - 1 {
            for j in 0..c {
                reach[r][j] = (j + 1..c)
                    .any(|k| reach[r - 1][k] && profile.vars_between(candidates[j] + 1, candidates[k] + 1) > 0);
            }
        }
        let env = PipeTrainEnv {
            profile,
            topo,
            config,
            candidates,
            reach,
            chosen: Vec::new(),
            outcome: None,
        };
        if env.action_mask().iter().all(|m| !m) {
            return Err(EnvError::Infeasible(format!(
                "no placement of {} stages keeps a variable in every stage",
                env.config.stages
            )));
        }
        Ok(env)
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn profile(&self) -> &PipelineProfile {
        &self.profile
    }

    pub fn config(&self) -> &PipeTrainConfig {
        &self.config
    }

    /// Pivot positions chosen so far.
    pub fn pivots(&self) -> Vec<usize> {
        self.chosen.iter().map(|&j| self.candidates[j]).collect()
    }

    /// Evaluates pivots with proportional device cuts.
    pub fn evaluate(&self, pivots: &[usize]) -> Result<TrainOutcome, PipeError> {
        let metrics = self.profile.stage_metrics(pivots)?;
        let compute: Vec<f64> = metrics.iter().map(|m| m.compute_ms).collect();
        let cuts = proportional_device_cuts(&compute, self.topo.num_devices())?;
        let length = pipeline_length(self.config.micro_batches, &metrics, &cuts, &self.topo)?;
        let feasible = match self.config.memory {
            Some(mem) => memory_feasible(self.config.micro_batches, &metrics, &cuts, self.topo.num_devices(), mem)?,
            None => true,
        };
        Ok(TrainOutcome {
            plan: PipelinePlan {
                pivots: pivots.to_vec(),
                device_cuts: cuts,
                micro_batches: self.config.micro_batches,
                micro_batch_size: self.config.micro_batch_size,
            },
            pipeline_length: length,
            memory_feasible: feasible,
            reward: self.config.reward_shape.reward(length, feasible),
        })
    }

    /// Allreduce, activation and balance features of cutting at one candidate next.
    fn features(&self, j: usize) -> [f64; 3] {
        let mut pivots = self.pivots();
        if !self.chosen.contains(&j) {
            pivots.push(self.candidates[j]);
            pivots.sort_unstable();
        }
        let times = self.profile.stage_metrics(&pivots).ok().and_then(|m| {
            let compute: Vec<f64> = m.iter().map(|s| s.compute_ms).collect();
            let cuts = proportional_device_cuts(&compute, self.topo.num_devices()).ok()?;
            stage_times(&m, &cuts, &self.topo).ok()
        });
        let Some(t) = times else {
            return [0.0; 3];
        };
        let max = |xs: &[f64]| xs.iter().copied().fold(0.0, f64::max);
        let min_t = t.compute.iter().copied().fold(f64::INFINITY, f64::min);
        let max_t = max(&t.compute);
        let balance = if max_t > 0.0 { min_t / max_t } else { 1.0 };
        [max(&t.allreduce), max(&t.activation), balance]
    }
}

impl Environment for PipeTrainEnv {
    type Outcome = TrainOutcome;

    fn state_dim(&self) -> usize {
        4 * self.candidates.len()
    }

    fn action_count(&self) -> usize {
        self.candidates.len()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.chosen.clear();
        self.outcome = None;
        self.state()
    }

    fn state(&self) -> Vec<f64> {
        let c = self.candidates.len();
        let feats: Vec<[f64; 3]> = (0..c).map(|j| self.features(j)).collect();
        let norm = |k: usize| feats.iter().map(|f| f[k]).fold(0.0, f64::max);
        let (ar, act) = (norm(0), norm(1));
        let scale = |x: f64, m: f64| if m > 0.0 { x / m } else { 0.0 };
        let mut s = Vec::with_capacity(4 * c);
        for f in &feats {
            s.push(scale(f[0], ar));
            s.push(scale(f[1], act));
            s.push(f[2]);
        }
        s.extend((0..c).map(|j| if self.chosen.contains(&j) { 1.0 } else { 0.0 }));
        s
    }

    fn action_mask(&self) -> Vec<bool> {
        let c = self.candidates.len();
        if self.outcome.is_some() {
            return vec![false; c];
        }
        let remaining = self.config.stages - 1 - self.chosen.len();
        let (start, lo) = match self.chosen.last() {
            Some(&j) => (j + 1, self.candidates[j] + 1),
            None => (0, 0),
        };
        (0..c)
            .map(|j| {
                j >= start && self.profile.vars_between(lo, self.candidates[j] + 1) > 0 && self.reach[remaining - 1][j]
            })
            .collect()
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.outcome.is_some() {
            return Err(EnvError::StepAfterDone);
        }
        check_action(&self.action_mask(), action)?;
        self.chosen.push(action);
        if self.chosen.len() < self.config.stages - 1 {
            return Ok(StepResult {
                next_state: self.state(),
                reward: 0.0,
                done: false,
                info: StepInfo::default(),
            });
        }
        let out = self.evaluate(&self.pivots())?;
        let reward = out.reward;
        let info = StepInfo {
            conflict: false,
            pipeline_length: Some(out.pipeline_length),
            memory_feasible: Some(out.memory_feasible),
        };
        self.outcome = Some(out);
        Ok(StepResult {
            next_state: self.state(),
            reward,
            done: true,
            info,
        })
    }

    fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    fn outcome(&self) -> Option<TrainOutcome> {
        self.outcome.clone().filter(|o| o.memory_feasible)
    }
}

impl Scored for TrainOutcome {
    fn score(&self) -> f64 {
        self.reward
    }
}
