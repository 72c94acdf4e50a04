//! Episode loop tying a DQN agent to an environment.

use std::io::Write;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{AgentError, DqnAgent, Transition};
use crate::envs::{DecisionEnv, DecisionOutcome, EnvError, Environment, Scored};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("trace output: {0}")]
    Trace(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    /// Mean training loss over the episode; NaN before training starts.
    pub loss: f64,
    pub total_score: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub state_digest: String,
    pub action: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeTrace<'a, O> {
    pub episode: usize,
    pub steps: &'a [TraceStep],
    pub outcome: Option<&'a O>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Best<O> {
    pub outcome: O,
    pub score: f64,
    pub episode: usize,
}

/// What the callback sees after every episode.
pub struct Progress<'a, O> {
    pub row: &'a CurveRow,
    pub outcome: Option<&'a O>,
    pub best: Option<&'a Best<O>>,
}

#[derive(Clone, Debug)]
pub struct SearchReport<O> {
    pub curve: Vec<CurveRow>,
    pub best: Option<Best<O>>,
    /// Outcome of the greedy rollout after training.
    pub greedy: Option<O>,
    pub episodes_run: usize,
    pub stopped_early: bool,
}

pub fn state_digest(state: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in state {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn convert<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| lit(x)).collect()
}

fn offer<O: Scored + Clone>(best: &mut Option<Best<O>>, outcome: &O, episode: usize) {
    let score = outcome.score();
    if best.as_ref().is_none_or(|b| score > b.score) {
        *best = Some(Best {
            outcome: outcome.clone(),
            score,
            episode,
        });
    }
}

/// Runs `episodes` training episodes, one gradient step per environment step
/// once the buffer holds a batch. The callback may stop the search early.
pub fn run<T, E, F>(
    agent: &mut DqnAgent<T>,
    env: &mut E,
    episodes: usize,
    mut trace: Option<&mut dyn Write>,
    mut on_episode: F,
) -> Result<SearchReport<E::Outcome>, SearchError>
where
    T: Scalar,
    E: Environment,
    E::Outcome: Serialize,
    F: FnMut(Progress<'_, E::Outcome>) -> ControlFlow<()>,
{
    let mut report = SearchReport {
        curve: Vec::with_capacity(episodes),
        best: None,
        greedy: None,
        episodes_run: 0,
        stopped_early: false,
    };
    let mut steps = Vec::new();
    for episode in 0..episodes {
        let mut state = env.reset();
        let epsilon = agent.epsilon();
        let mut total = 0.0;
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        steps.clear();
        while !env.is_done() {
            let s: Vec<T> = convert(&state);
            let action = agent.select_action(&s, &env.action_mask())?;
            let r = env.step(action)?;
            total += r.reward;
            if trace.is_some() {
                steps.push(TraceStep {
                    state_digest: state_digest(&state),
                    action,
                    reward: r.reward,
                });
            }
            agent.observe(Transition {
                state: s,
                action,
                reward: lit(r.reward),
                next_state: convert(&r.next_state),
                done: r.done,
                mask_next: env.action_mask(),
            });
            if agent.ready() {
                loss_sum += agent.train_step()?.to_f64_lossy();
                loss_n += 1;
            }
            state = r.next_state;
        }
        let outcome = env.outcome();
        if let Some(o) = &outcome {
            offer(&mut report.best, o, episode);
        }
        if let Some(w) = trace.as_deref_mut() {
            let line = EpisodeTrace {
                episode,
                steps: &steps,
                outcome: outcome.as_ref(),
            };
            serde_json::to_writer(&mut *w, &line).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        report.curve.push(CurveRow {
            episode,
            loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            total_score: total,
            epsilon,
        });
        report.episodes_run = episode + 1;
        let flow = on_episode(Progress {
            row: report.curve.last().expect("just pushed"),
            outcome: outcome.as_ref(),
            best: report.best.as_ref(),
        });
        if flow.is_break() {
            report.stopped_early = true;
            break;
        }
    }
    report.greedy = greedy_rollout(agent, env)?;
    if let Some(o) = &report.greedy {
        offer(&mut report.best, o, report.episodes_run);
    }
    Ok(report)
}

/// One episode following the online network's masked argmax, without learning.
pub fn greedy_rollout<T: Scalar, E: Environment>(
    agent: &DqnAgent<T>,
    env: &mut E,
) -> Result<Option<E::Outcome>, SearchError> {
    let mut state = env.reset();
    while !env.is_done() {
        let action = agent.greedy_action(&convert::<T>(&state), &env.action_mask())?;
        state = env.step(action)?.next_state;
    }
    Ok(env.outcome())
}

/// Two-stage operator partitioning: a regular search, then a finetuning
/// search restarted from the best strategy with revertible replications undone.
pub fn finetune<T, F>(
    agent: &mut DqnAgent<T>,
    env: &mut DecisionEnv,
    first: &SearchReport<DecisionOutcome>,
    episodes: usize,
    trace: Option<&mut dyn Write>,
    on_episode: F,
) -> Result<SearchReport<DecisionOutcome>, SearchError>
where
    T: Scalar,
    F: FnMut(Progress<'_, DecisionOutcome>) -> ControlFlow<()>,
{
    let start = first
        .best
        .as_ref()
        .ok_or_else(|| EnvError::NoStrategy("first stage found no conflict-free strategy".into()))?;
    env.finetune_reset(&start.outcome.statuses)?;
    // exploration restarts for the reduced problem
    agent.iterations = 0;
    let mut report = run(agent, env, episodes, trace, on_episode)?;
    env.clear_start();
    if report.best.as_ref().is_none_or(|b| b.score < start.score) {
        report.best = Some(start.clone());
    }
    Ok(report)
}
