use std::sync::Arc;

use autoplan::dataproc::{process, ProfileArrays, GRANULARITY};
use autoplan::envs::{coarse_length, Environment, PipeInferConfig, PipeInferEnv, PipeTrainConfig, PipeTrainEnv};
use autoplan::pipecost::{memory_feasible, plan_length, MemoryModel, PipelineProfile, StageMetrics};
use autoplan::synthetic::uniform_chain;
use autoplan::topology::DeviceTopology;

/// Embedding-like head with no compute, uniform layers, and a heavier output point.
fn bert_like() -> ProfileArrays<f64> {
    let mut c = vec![1.0; GRANULARITY];
    c[0] = 0.0;
    c[1] = 0.0;
    c[GRANULARITY - 1] = 3.0;
    ProfileArrays::new(c, vec![0.0; GRANULARITY], vec![1e-3; GRANULARITY]).unwrap()
}

#[test]
fn bert_like_profile_balances_four_stages() {
    let arrays = process(&bert_like(), GRANULARITY);
    let topo = DeviceTopology::preset("configC").unwrap();
    let cfg = PipeInferConfig {
        stages: 4,
        ..PipeInferConfig::default()
    };
    let mut best = (f64::INFINITY, vec![]);
    for b1 in 1..GRANULARITY {
        for b2 in b1 + 1..GRANULARITY {
            for b3 in b2 + 1..GRANULARITY {
                let l = coarse_length(&arrays, &[b1, b2, b3], &[8, 16, 24], &topo, &cfg).unwrap();
                if l < best.0 {
                    best = (l, vec![b1, b2, b3]);
                }
            }
        }
    }
    assert_eq!(best.1, vec![34, 66, 98]);

    let mut best_cuts = (f64::INFINITY, vec![]);
    for c1 in 1..32 {
        for c2 in c1 + 1..32 {
            for c3 in c2 + 1..32 {
                let l = coarse_length(&arrays, &[34, 66, 98], &[c1, c2, c3], &topo, &cfg).unwrap();
                if l < best_cuts.0 {
                    best_cuts = (l, vec![c1, c2, c3]);
                }
            }
        }
    }
    assert_eq!(best_cuts.1, vec![8, 16, 24]);
}

#[test]
fn infer_env_reports_the_length_it_was_steered_to() {
    let arrays = Arc::new(process(&bert_like(), GRANULARITY));
    let topo = Arc::new(DeviceTopology::preset("configC").unwrap());
    let cfg = PipeInferConfig {
        stages: 4,
        ..PipeInferConfig::default()
    };
    let mut env = PipeInferEnv::new(arrays.clone(), topo.clone(), cfg.clone()).unwrap();
    env.reset();
    for b in [34, 66, 98] {
        env.step(env.boundary_action(b)).unwrap();
    }
    for c in [8, 16, 24] {
        env.step(env.cut_action(c)).unwrap();
    }
    assert!(env.is_done());
    let out = env.outcome().unwrap();
    let l = coarse_length(&arrays, &[34, 66, 98], &[8, 16, 24], &topo, &cfg).unwrap();
    assert_eq!(out.pipeline_length, l);
    assert_eq!(out.reward, 1.0 / l);
}

#[test]
fn forty_four_gigabytes_need_four_stages() {
    // weights only, one 16 GB device per stage, 0.2 GB activations per cut and micro-batch
    let mem = MemoryModel {
        mem_per_device: 16e9,
        optimizer_multiplier: 1.0,
    };
    for k in 1..=4usize {
        let metrics: Vec<StageMetrics> = (0..k)
            .map(|s| StageMetrics {
                compute_ms: 1.0,
                activation_bytes: if s + 1 < k { 0.2e9 } else { 0.0 },
                param_bytes: 44e9 / k as f64,
                num_variables: 1,
            })
            .collect();
        let cuts: Vec<usize> = (1..k).collect();
        let fits = memory_feasible(8, &metrics, &cuts, k, mem).unwrap();
        assert_eq!(fits, k == 4, "{k} stages");
    }
}

#[test]
fn train_env_outcome_matches_cost_model() {
    let g = uniform_chain(32, 8, 64);
    let profile = Arc::new(PipelineProfile::from_graph(&g, 2.0).unwrap());
    let topo = Arc::new(DeviceTopology::preset("configB").unwrap());
    let cfg = PipeTrainConfig {
        stages: 3,
        radius: 8,
        ..PipeTrainConfig::default()
    };
    let mut env = PipeTrainEnv::new(profile.clone(), topo.clone(), cfg).unwrap();
    env.reset();
    while !env.is_done() {
        let a = env.action_mask().iter().rposition(|&m| m).unwrap();
        env.step(a).unwrap();
    }
    let out = env.outcome().unwrap();
    assert_eq!(out.plan.stages(), 3);
    assert_eq!(plan_length(&out.plan, &profile, &topo).unwrap(), out.pipeline_length);
}
