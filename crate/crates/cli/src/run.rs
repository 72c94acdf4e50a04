use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use autoplan::agent::{AgentConfig, DqnAgent};
use autoplan::dataproc::{
    generate_environment, load_profile, process, write_dataset, Distribution, ProfileArrays, GRANULARITY,
};
use autoplan::envs::{
    boundary_to_pivot, DecisionEnv, Environment, PipeInferConfig, PipeInferEnv, PipeTrainConfig, PipeTrainEnv,
};
use autoplan::ir::{load_graph, HloGraph};
use autoplan::linkage::{extract_cached, sorted_decision_order};
use autoplan::pipecost::{plan_report, MemoryModel, PipelineProfile};
use autoplan::search::{self, CurveRow, Progress, SearchReport};
use autoplan::sharding::Propagator;
use autoplan::synthetic;
use autoplan::topology::DeviceTopology;
use serde::Serialize;
use serde_json::json;

use crate::plan::{
    check_infer, check_pipeline, check_sharding, read_plan, write_plan, InferPlanFile, PipelinePlanFile, PlanFile,
    ShardingPlan,
};
use crate::{Args, Failure, Task};

const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

pub fn run(args: &Args) -> Result<()> {
    match args.task {
        Task::Opp | Task::Adp => run_sharding(args),
        Task::PpTrain => run_pp_train(args),
        Task::PpInfer => run_pp_infer(args),
        Task::GenData => run_gen_data(args),
        Task::Validate => run_validate(args),
    }
}

fn threads() -> usize {
    std::env::var("AUTOPLAN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn task_name(task: Task) -> String {
    clap::ValueEnum::to_possible_value(&task).map_or_else(String::new, |v| v.get_name().to_string())
}

fn graph_arg(args: &Args) -> Result<(String, HloGraph)> {
    let name = args
        .graph
        .clone()
        .ok_or_else(|| Failure::Config(format!("--graph is required for {}", task_name(args.task))))?;
    if let Some(g) = synthetic::bundled(&name) {
        return Ok((name, g));
    }
    let g = load_graph(&name).with_context(|| format!("loading graph {name}"))?;
    Ok((name, g))
}

fn out_dir(args: &Args) -> Result<PathBuf> {
    let dir = args
        .out
        .clone()
        .ok_or_else(|| Failure::Config("--out is required".into()))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn agent_config(args: &Args, base: AgentConfig) -> Result<AgentConfig> {
    let mut c = base.with_seed(args.seed);
    if let Some(v) = args.gamma {
        c.gamma = v;
    }
    if let Some(v) = args.lr {
        c.lr = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = args.buffer {
        c.buffer_capacity = v;
    }
    if let Some(v) = args.eps_start {
        c.eps_start = v;
    }
    if let Some(v) = args.eps_end {
        c.eps_end = v;
    }
    if let Some(v) = args.eps_decay {
        c.eps_decay_iters = v;
    }
    if let Some(v) = args.target_sync {
        c.target_sync_every = v;
    }
    if let Some(h) = &args.hidden {
        c.hidden = h.clone();
    }
    c.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(c)
}

/// Training-curve CSV flushed after every episode.
struct Curve {
    writer: csv::Writer<File>,
    offset: usize,
    rows: usize,
    started: Instant,
    best_score: f64,
    time_to_best: Option<f64>,
}

impl Curve {
    fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Curve {
            writer,
            offset: 0,
            rows: 0,
            started: Instant::now(),
            best_score: f64::NEG_INFINITY,
            time_to_best: None,
        })
    }

    fn record<O>(&mut self, p: &Progress<'_, O>) -> ControlFlow<()> {
        self.rows += 1;
        let row = CurveRow {
            episode: p.row.episode + self.offset,
            ..p.row.clone()
        };
        if let Some(b) = p.best {
            if b.score > self.best_score {
                self.best_score = b.score;
                self.time_to_best = Some(self.started.elapsed().as_secs_f64());
            }
        }
        // a failed write only loses the log line; the search goes on
        if self
            .writer
            .serialize(&row)
            .and_then(|_| Ok(self.writer.flush()?))
            .is_err()
        {
            eprintln!("warning: could not write training curve");
        }
        ControlFlow::Continue(())
    }

    fn advance(&mut self, episodes: usize) {
        self.offset += episodes;
    }
}

fn trace_file(args: &Args) -> Result<Option<BufWriter<File>>> {
    args.log
        .as_ref()
        .map(|p| {
            File::create(p)
                .map(BufWriter::new)
                .with_context(|| format!("creating {}", p.display()))
        })
        .transpose()
}

fn write_summary(dir: &Path, summary: serde_json::Value) -> Result<()> {
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn summary<O>(
    args: &Args,
    agent: &AgentConfig,
    env: impl Serialize,
    report: &SearchReport<O>,
    curve: &Curve,
) -> serde_json::Value {
    json!({
        "task": args.task,
        "seed": args.seed,
        "episodes_run": curve.rows,
        "best_score": report.best.as_ref().map(|b| b.score),
        "best_episode": report.best.as_ref().map(|b| b.episode),
        "time_to_best_s": curve.time_to_best,
        "elapsed_s": curve.started.elapsed().as_secs_f64(),
        "agent": agent,
        "environment": env,
        "arguments": args,
    })
}

fn save_agent(args: &Args, agent: &DqnAgent<f32>) -> Result<()> {
    if let Some(path) = &args.checkpoint {
        agent.save(path)?;
    }
    Ok(())
}

fn run_sharding(args: &Args) -> Result<()> {
    let (name, g) = graph_arg(args)?;
    let dir = out_dir(args)?;
    let adp = args.task == Task::Adp;
    let mut env = if adp {
        DecisionEnv::adp(&g)?
    } else {
        let prop = Arc::new(Propagator::new(&g, g.trainable_dims()));
        let linkage = match &args.linkage_cache {
            Some(path) => extract_cached(&g, &prop, path, threads())?,
            None => autoplan::linkage::extract_linkage_groups(&prop, threads()),
        };
        let order = sorted_decision_order(&linkage);
        DecisionEnv::new(prop, Arc::new(linkage), order, &[])?
    };
    if env.is_empty() {
        return Err(Failure::Infeasible("graph has no decision dims".into()).into());
    }
    let base = if adp { AgentConfig::adp() } else { AgentConfig::opp() };
    let config = agent_config(args, base)?;
    let mut agent = DqnAgent::<f32>::new(config.clone(), env.state_dim(), env.action_count())?;
    let episodes = args.episodes.unwrap_or(if adp { 500 } else { 2000 });
    let mut curve = Curve::create(&dir.join("curve.csv"))?;
    let mut trace = trace_file(args)?;
    let mut report = search::run(
        &mut agent,
        &mut env,
        episodes,
        trace.as_mut().map(|w| w as &mut dyn Write),
        |p| curve.record(&p),
    )?;
    let mut stages = vec![json!({"stage": 1, "episodes": report.episodes_run,
        "best_partition_count": report.best.as_ref().map(|b| b.outcome.partitioned())})];
    if args.finetune && !adp {
        curve.advance(report.episodes_run);
        let episodes = args.finetune_episodes.unwrap_or(episodes / 2);
        let reverted = report
            .best
            .as_ref()
            .map(|b| {
                let mut probe = env.clone();
                probe.finetune_reset(&b.outcome.statuses).map(|_| probe.open_dims())
            })
            .transpose()?;
        let second = search::finetune(
            &mut agent,
            &mut env,
            &report,
            episodes,
            trace.as_mut().map(|w| w as &mut dyn Write),
            |p| curve.record(&p),
        )?;
        stages.push(
            json!({"stage": 2, "episodes": second.episodes_run, "reverted_dims": reverted,
            "best_partition_count": second.best.as_ref().map(|b| b.outcome.partitioned())}),
        );
        report = second;
    }
    if let Some(w) = trace.as_mut() {
        w.flush()?;
    }
    save_agent(args, &agent)?;
    let best = report
        .best
        .as_ref()
        .ok_or_else(|| Failure::Infeasible(format!("no conflict-free strategy in {episodes} episodes")))?;
    let plan = ShardingPlan::new(&name, &g, env.propagator(), &best.outcome);
    let plan = if adp { PlanFile::Adp(plan) } else { PlanFile::Opp(plan) };
    write_plan(&dir.join("plan.json"), &plan)?;
    let mut s = summary(args, &config, json!({"decision_dims": env.len()}), &report, &curve);
    s["stages"] = json!(stages);
    write_summary(&dir, s)?;
    println!(
        "best score {:.3} with {} partitioned dims",
        best.score,
        best.outcome.partitioned()
    );
    Ok(())
}

fn run_pp_train(args: &Args) -> Result<()> {
    let (name, g) = graph_arg(args)?;
    let dir = out_dir(args)?;
    let topo = Arc::new(DeviceTopology::load(&args.topology)?);
    let profile = Arc::new(PipelineProfile::from_graph(&g, args.backward_multiplier)?);
    let cfg = PipeTrainConfig {
        stages: args.stages,
        radius: args.radius,
        micro_batches: args.micro_batches,
        micro_batch_size: args.micro_batch_size,
        reward_shape: args.reward_shape,
        memory: args.mem_per_device_gib.map(|gib| MemoryModel::new(gib * GIB)),
    };
    let mut env = PipeTrainEnv::new(profile.clone(), topo.clone(), cfg.clone())?;
    let config = agent_config(args, AgentConfig::pipeline())?;
    let mut agent = DqnAgent::<f32>::new(config.clone(), env.state_dim(), env.action_count())?;
    let episodes = args.episodes.unwrap_or(2000);
    let mut curve = Curve::create(&dir.join("curve.csv"))?;
    let mut trace = trace_file(args)?;
    let report = search::run(
        &mut agent,
        &mut env,
        episodes,
        trace.as_mut().map(|w| w as &mut dyn Write),
        |p| curve.record(&p),
    )?;
    if let Some(w) = trace.as_mut() {
        w.flush()?;
    }
    save_agent(args, &agent)?;
    let best = report.best.as_ref().ok_or_else(|| {
        Failure::Infeasible(format!(
            "no memory-feasible pipeline plan with {} stages in {episodes} episodes",
            args.stages
        ))
    })?;
    let r = plan_report(&best.outcome.plan, &profile, &topo)?;
    let plan = PlanFile::PpTrain(PipelinePlanFile {
        graph: name,
        topology: topo.to_config(),
        backward_multiplier: args.backward_multiplier,
        pivots: r.pivots,
        pivot_positions: best.outcome.plan.pivots.clone(),
        device_cuts: r.device_cuts,
        micro_batches: best.outcome.plan.micro_batches,
        micro_batch_size: best.outcome.plan.micro_batch_size,
        stages: r.stages,
        pipeline_length_s: r.pipeline_length_s,
        memory_feasible: best.outcome.memory_feasible,
    });
    write_plan(&dir.join("plan.json"), &plan)?;
    let env_summary = json!({"config": cfg, "candidate_pivots": env.candidates().len()});
    write_summary(&dir, summary(args, &config, env_summary, &report, &curve))?;
    println!(
        "pipeline length {:.6} s with device cuts {:?}",
        best.outcome.pipeline_length, best.outcome.plan.device_cuts
    );
    Ok(())
}

fn target_profile(args: &Args) -> Result<ProfileArrays<f64>> {
    if let Some(path) = &args.profile {
        return Ok(load_profile(path)?);
    }
    if args.graph.is_some() {
        let (_, g) = graph_arg(args)?;
        let p = PipelineProfile::from_graph(&g, args.backward_multiplier)?;
        return Ok(ProfileArrays {
            names: p.names.clone(),
            c: p.compute_ms.clone(),
            a: p.activation_bytes.clone(),
            w: p.param_bytes.clone(),
        });
    }
    Err(Failure::Config("pp-infer needs --profile or --graph as the target".into()).into())
}

fn distribution(args: &Args) -> Result<Distribution> {
    args.dist
        .parse()
        .map_err(|e: autoplan::dataproc::DataError| Failure::Config(e.to_string()).into())
}

fn run_pp_infer(args: &Args) -> Result<()> {
    let dir = out_dir(args)?;
    let topo = Arc::new(DeviceTopology::load(&args.topology)?);
    let dist = distribution(args)?;
    let target = target_profile(args)?;
    target.validate()?;
    let arrays = Arc::new(process(&target, GRANULARITY));
    let cfg = PipeInferConfig {
        stages: args.stages,
        micro_batches: args.micro_batches,
        ..PipeInferConfig::default()
    };
    let mut target_env = PipeInferEnv::new(arrays.clone(), topo.clone(), cfg.clone())?;
    let config = agent_config(args, AgentConfig::pipeline())?;
    let mut agent = DqnAgent::<f32>::new(config.clone(), target_env.state_dim(), target_env.action_count())?;
    let per_env = args.episodes.unwrap_or(50);
    let mut curve = Curve::create(&dir.join("curve.csv"))?;
    let mut trace = trace_file(args)?;
    let mut last = None;
    for k in 0..args.train_envs as u64 {
        let env_seed = args.seed.wrapping_mul(1_000_003).wrapping_add(k + 1);
        let generated = Arc::new(generate_environment(dist, args.length.max(GRANULARITY), env_seed)?);
        let mut env = PipeInferEnv::new(generated, topo.clone(), cfg.clone())?;
        let report = search::run(
            &mut agent,
            &mut env,
            per_env,
            trace.as_mut().map(|w| w as &mut dyn Write),
            |p| curve.record(&p),
        )?;
        curve.advance(report.episodes_run);
        last = Some(report);
    }
    let mut outcome = search::greedy_rollout(&agent, &mut target_env)?;
    let mut report = last.unwrap_or(SearchReport {
        curve: Vec::new(),
        best: None,
        greedy: None,
        episodes_run: 0,
        stopped_early: false,
    });
    if args.finetune {
        let episodes = args.finetune_episodes.unwrap_or(per_env);
        let tuned = search::run(
            &mut agent,
            &mut target_env,
            episodes,
            trace.as_mut().map(|w| w as &mut dyn Write),
            |p| curve.record(&p),
        )?;
        if let Some(b) = &tuned.best {
            if outcome.as_ref().is_none_or(|o| b.outcome.reward > o.reward) {
                outcome = Some(b.outcome.clone());
            }
        }
        report = tuned;
    }
    if let Some(w) = trace.as_mut() {
        w.flush()?;
    }
    save_agent(args, &agent)?;
    let outcome = outcome.ok_or_else(|| Failure::Infeasible("greedy rollout produced no plan".into()))?;
    let pivots = if target.names.is_empty() {
        Vec::new()
    } else {
        outcome
            .boundaries
            .iter()
            .map(|&b| target.names[boundary_to_pivot(b, target.len(), GRANULARITY).min(target.len() - 1)].clone())
            .collect()
    };
    let plan = PlanFile::PpInfer(InferPlanFile {
        topology: topo.to_config(),
        config: cfg.clone(),
        boundaries: outcome.boundaries.clone(),
        device_cuts: outcome.device_cuts.clone(),
        pivots,
        pipeline_length_s: outcome.pipeline_length,
        arrays: (*arrays).clone(),
    });
    write_plan(&dir.join("plan.json"), &plan)?;
    let env_summary = json!({"config": cfg, "train_envs": args.train_envs, "distribution": dist});
    write_summary(&dir, summary(args, &config, env_summary, &report, &curve))?;
    println!(
        "boundaries {:?} device cuts {:?} pipeline length {:.6} s",
        outcome.boundaries, outcome.device_cuts, outcome.pipeline_length
    );
    Ok(())
}

fn run_gen_data(args: &Args) -> Result<()> {
    let dir = out_dir(args)?;
    let dist = distribution(args)?;
    let path = dir.join("dataset.jsonl");
    let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    write_dataset(&mut out, dist, args.length, args.count, args.seed)?;
    out.flush()?;
    write_summary(
        &dir,
        json!({"task": args.task, "seed": args.seed, "count": args.count, "length": args.length,
            "distribution": dist, "granularity": GRANULARITY, "arguments": args}),
    )?;
    println!("wrote {} environments to {}", args.count, path.display());
    Ok(())
}

fn run_validate(args: &Args) -> Result<()> {
    let path = args
        .plan
        .as_ref()
        .ok_or_else(|| Failure::Config("--plan is required for validate".into()))?;
    let plan = read_plan(path).map_err(|e| Failure::Config(format!("{e:#}")))?;
    let graph_for = |recorded: &str| -> Result<HloGraph> {
        let mut a = args.clone();
        if a.graph.is_none() {
            a.graph = Some(recorded.to_string());
        }
        Ok(graph_arg(&a)?.1)
    };
    let checked = match &plan {
        PlanFile::Opp(p) => check_sharding(&graph_for(&p.graph)?, p, false),
        PlanFile::Adp(p) => check_sharding(&graph_for(&p.graph)?, p, true),
        PlanFile::PpTrain(p) => check_pipeline(&graph_for(&p.graph)?, p),
        PlanFile::PpInfer(p) => check_infer(p),
    };
    let msg = checked.map_err(|e| Failure::Invalid(format!("{e:#}")))?;
    println!("plan is consistent: {msg}");
    Ok(())
}
