use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_action, EnvError, Environment, Scored, StepInfo, StepResult};
use crate::dataproc::CoarsenedArrays;
use crate::pipecost::{pipeline_length, PipeError, StageMetrics};
use crate::topology::DeviceTopology;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipeInferConfig {
    pub stages: usize,
    pub micro_batches: usize,
    /// Milliseconds represented by a normalized compute value of 1.
    pub compute_unit_ms: f64,
    /// Bytes represented by a normalized activation or parameter value of 1.
    pub byte_unit: f64,
}

impl Default for PipeInferConfig {
    fn default() -> Self {
        PipeInferConfig {
            stages: 2,
            micro_batches: 8,
            compute_unit_ms: 1000.0,
            byte_unit: 1e9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOutcome {
    /// Stage ends on the coarse grid, each in `1..granularity`.
    pub boundaries: Vec<usize>,
    pub device_cuts: Vec<usize>,
    pub pipeline_length: f64,
    pub reward: f64,
}

/// Position in the original profile after which a coarse boundary cuts.
pub fn boundary_to_pivot(boundary: usize, original_len: usize, granularity: usize) -> usize {
    (boundary * original_len / granularity).max(1) - 1
}

/// Pipeline length of a plan over coarsened prefix arrays.
pub fn coarse_length(
    arrays: &CoarsenedArrays<f64>,
    boundaries: &[usize],
    device_cuts: &[usize],
    topo: &DeviceTopology,
    config: &PipeInferConfig,
) -> Result<f64, PipeError> {
    let g = arrays.c.len();
    let prefix = |xs: &[f64], b: usize| if b == 0 { 0.0 } else { xs[b - 1] };
    let mut bounds = vec![0];
    bounds.extend_from_slice(boundaries);
    bounds.push(g);
    if bounds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PipeError::PivotOrder);
    }
    let k = bounds.len() - 1;
    let metrics: Vec<StageMetrics> = (0..k)
        .map(|s| StageMetrics {
            compute_ms: (prefix(&arrays.c, bounds[s + 1]) - prefix(&arrays.c, bounds[s])) * config.compute_unit_ms,
            activation_bytes: if s + 1 < k {
                arrays.a[bounds[s + 1] - 1] * config.byte_unit
            } else {
                0.0
            },
            param_bytes: (prefix(&arrays.w, bounds[s + 1]) - prefix(&arrays.w, bounds[s])) * config.byte_unit,
            num_variables: 0,
        })
        .collect();
    pipeline_length(config.micro_batches, &metrics, device_cuts, topo)
}

/// Partition boundaries then device cuts, chosen from one shared action space.
#[derive(Clone)]
pub struct PipeInferEnv {
    arrays: Arc<CoarsenedArrays<f64>>,
    topo: Arc<DeviceTopology>,
    config: PipeInferConfig,
    topo_features: Vec<f64>,
    boundaries: Vec<usize>,
    cuts: Vec<usize>,
    outcome: Option<InferOutcome>,
}

impl PipeInferEnv {
    pub fn new(
        arrays: Arc<CoarsenedArrays<f64>>,
        topo: Arc<DeviceTopology>,
        config: PipeInferConfig,
    ) -> Result<Self, EnvError> {
        let g = arrays.c.len();
        let d = topo.num_devices();
        if arrays.a.len() != g || arrays.w.len() != g {
            return Err(PipeError::LengthMismatch.into());
        }
        if config.stages < 2 || config.stages > g || config.stages > d {
            return Err(PipeError::TooManyStages {
                stages: config.stages,
                devices: d,
            }
            .into());
        }
        let topo_features = topo.scaled_matrix();
        Ok(PipeInferEnv {
            arrays,
            topo,
            config,
            topo_features,
            boundaries: Vec::new(),
            cuts: Vec::new(),
            outcome: None,
        })
    }

    pub fn granularity(&self) -> usize {
        self.arrays.c.len()
    }

    fn boundary_actions(&self) -> usize {
        self.granularity() - 1
    }

    pub fn config(&self) -> &PipeInferConfig {
        &self.config
    }

    pub fn arrays(&self) -> &CoarsenedArrays<f64> {
        &self.arrays
    }

    /// Action that selects boundary `b`.
    pub fn boundary_action(&self, b: usize) -> usize {
        b - 1
    }

    /// Action that selects device cut `c`.
    pub fn cut_action(&self, c: usize) -> usize {
        self.boundary_actions() + c - 1
    }

    pub fn length_of(&self, boundaries: &[usize], cuts: &[usize]) -> Result<f64, PipeError> {
        coarse_length(&self.arrays, boundaries, cuts, &self.topo, &self.config)
    }
}

impl Environment for PipeInferEnv {
    type Outcome = InferOutcome;

    fn state_dim(&self) -> usize {
        3 * self.granularity() + self.topo_features.len() + self.boundary_actions() + self.topo.num_devices() - 1
    }

    fn action_count(&self) -> usize {
        self.boundary_actions() + self.topo.num_devices() - 1
    }

    fn reset(&mut self) -> Vec<f64> {
        self.boundaries.clear();
        self.cuts.clear();
        self.outcome = None;
        self.state()
    }

    fn state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.state_dim());
        s.extend_from_slice(&self.arrays.c);
        s.extend_from_slice(&self.arrays.a);
        s.extend_from_slice(&self.arrays.w);
        s.extend_from_slice(&self.topo_features);
        s.extend((1..=self.boundary_actions()).map(|b| f64::from(u8::from(self.boundaries.contains(&b)))));
        s.extend((1..self.topo.num_devices()).map(|c| f64::from(u8::from(self.cuts.contains(&c)))));
        s
    }

    fn action_mask(&self) -> Vec<bool> {
        let nb = self.boundary_actions();
        let nc = self.topo.num_devices() - 1;
        let mut mask = vec![false; nb + nc];
        if self.outcome.is_some() {
            return mask;
        }
        let need = self.config.stages - 1;
        if self.boundaries.len() < need {
            let last = self.boundaries.last().copied().unwrap_or(0);
            let after = need - self.boundaries.len() - 1;
            for b in last + 1..=nb - after {
                mask[b - 1] = true;
            }
        } else {
            let last = self.cuts.last().copied().unwrap_or(0);
            let after = need - self.cuts.len() - 1;
            for c in last + 1..=nc - after {
                mask[nb + c - 1] = true;
            }
        }
        mask
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.outcome.is_some() {
            return Err(EnvError::StepAfterDone);
        }
        check_action(&self.action_mask(), action)?;
        let nb = self.boundary_actions();
        if action < nb {
            self.boundaries.push(action + 1);
        } else {
            self.cuts.push(action - nb + 1);
        }
        if self.cuts.len() < self.config.stages - 1 {
            return Ok(StepResult {
                next_state: self.state(),
                reward: 0.0,
                done: false,
                info: StepInfo::default(),
            });
        }
        let length = self.length_of(&self.boundaries, &self.cuts)?;
        let reward = 1.0 / length;
        self.outcome = Some(InferOutcome {
            boundaries: self.boundaries.clone(),
            device_cuts: self.cuts.clone(),
            pipeline_length: length,
            reward,
        });
        Ok(StepResult {
            next_state: self.state(),
            reward,
            done: true,
            info: StepInfo {
                pipeline_length: Some(length),
                ..StepInfo::default()
            },
        })
    }

    fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    fn outcome(&self) -> Option<InferOutcome> {
        self.outcome.clone()
    }
}

impl Scored for InferOutcome {
    fn score(&self) -> f64 {
        self.reward
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(g: usize) -> Arc<CoarsenedArrays<f64>> {
        let c: Vec<f64> = (1..=g).map(|i| i as f64 / g as f64).collect();
        Arc::new(CoarsenedArrays {
            c,
            a: vec![0.0; g],
            w: vec![0.0; g],
        })
    }

    #[test]
    fn phases_and_masks() {
        let topo = Arc::new(DeviceTopology::preset("configA").unwrap());
        let cfg = PipeInferConfig {
            stages: 3,
            ..PipeInferConfig::default()
        };
        let mut env = PipeInferEnv::new(uniform(128), topo, cfg).unwrap();
        assert_eq!(env.action_count(), 127 + 15);
        assert_eq!(env.state().len(), env.state_dim());
        let mask = env.action_mask();
        assert!(mask[0] && !mask[126] && !mask[127]);
        env.step(env.boundary_action(10)).unwrap();
        assert!(matches!(
            env.step(env.boundary_action(10)),
            Err(EnvError::MaskedAction(_))
        ));
        env.step(env.boundary_action(20)).unwrap();
        let mask = env.action_mask();
        assert!(mask[..127].iter().all(|m| !m));
        assert!(mask[env.cut_action(14)] && !mask[env.cut_action(15)]);
        env.step(env.cut_action(4)).unwrap();
        let r = env.step(env.cut_action(12)).unwrap();
        assert!(r.done);
        let out = env.outcome().unwrap();
        assert_eq!(out.boundaries, vec![10, 20]);
        assert_eq!(out.device_cuts, vec![4, 12]);
        assert!((out.reward * out.pipeline_length - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_two_stage_optimum_is_midpoint() {
        let topo = Arc::new(DeviceTopology::preset("configA").unwrap());
        let env = PipeInferEnv::new(uniform(128), topo, PipeInferConfig::default()).unwrap();
        let best = (1..128)
            .min_by(|&a, &b| {
                let la = env.length_of(&[a], &[8]).unwrap();
                let lb = env.length_of(&[b], &[8]).unwrap();
                la.total_cmp(&lb)
            })
            .unwrap();
        assert_eq!(best, 64);
    }

    #[test]
    fn boundary_maps_to_original_pivot() {
        assert_eq!(boundary_to_pivot(64, 512, 128), 255);
        assert_eq!(boundary_to_pivot(1, 128, 128), 0);
    }
}
