use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_action, EnvError, Environment, Scored, StepInfo, StepResult};
use crate::ir::{DimIndex, HloGraph, InstrId, Opcode};
use crate::linkage::{sorted_decision_order, LinkageGroups};
use crate::sharding::{Closure, DimStatus, Outcome, Propagator};

pub const ACTION_REPLICATE: usize = 0;
pub const ACTION_PARTITION: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rewards {
    pub partition: f64,
    pub replicate: f64,
    pub conflict: f64,
}

impl Default for Rewards {
    fn default() -> Self {
        Rewards {
            partition: 0.4,
            replicate: 0.1,
            conflict: -1.0,
        }
    }
}

/// A conflict-free, fully decided strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub statuses: Vec<DimStatus>,
    /// Decisions taken by the agent, in episode order.
    pub decisions: Vec<(usize, DimStatus)>,
    pub total_reward: f64,
    /// Reward value of the whole strategy, independent of where the episode started.
    pub score: f64,
}

impl DecisionOutcome {
    pub fn partitioned(&self) -> usize {
        self.statuses.iter().filter(|s| **s == DimStatus::Partitioned).count()
    }

    pub fn replicated(&self) -> usize {
        self.statuses.iter().filter(|s| **s == DimStatus::Replicated).count()
    }
}

/// Per-dimension partition/replicate decisions with propagation, shared by
/// operator partitioning (with linkage) and data parallelism (without).
#[derive(Clone)]
pub struct DecisionEnv {
    prop: Arc<Propagator>,
    linkage: Arc<LinkageGroups>,
    order: Vec<usize>,
    rewards: Rewards,
    /// Closure every episode starts from.
    start: Closure,
    base: Closure,
    closure: Closure,
    cursor: usize,
    done: bool,
    conflict: bool,
    decisions: Vec<(usize, DimStatus)>,
    total_reward: f64,
}

impl DecisionEnv {
    /// Environment over `prop`'s candidates, deciding in `order` (flat indices).
    pub fn new(
        prop: Arc<Propagator>,
        linkage: Arc<LinkageGroups>,
        order: Vec<usize>,
        fixed: &[(DimIndex, DimStatus)],
    ) -> Result<Self, EnvError> {
        assert_eq!(order.len(), prop.candidates().len(), "order must cover every candidate");
        let mut base = prop.closure();
        for (d, s) in fixed {
            let var = prop.var_of(d).expect("fixed dim belongs to graph");
            if base.decide(&prop, var, *s).is_err() {
                return Err(EnvError::Infeasible("fixed decisions conflict".into()));
            }
        }
        let mut env = DecisionEnv {
            start: base.clone(),
            closure: base.clone(),
            base,
            prop,
            linkage,
            order,
            rewards: Rewards::default(),
            cursor: 0,
            done: false,
            conflict: false,
            decisions: Vec::new(),
            total_reward: 0.0,
        };
        env.reset();
        Ok(env)
    }

    /// Operator partitioning over the trainable variables, ordered by linkage size.
    pub fn opp(g: &HloGraph, threads: usize) -> Self {
        let prop = Arc::new(Propagator::new(g, g.trainable_dims()));
        let linkage = crate::linkage::extract_linkage_groups(&prop, threads);
        Self::opp_with(prop, Arc::new(linkage))
    }

    pub fn opp_with(prop: Arc<Propagator>, linkage: Arc<LinkageGroups>) -> Self {
        let order = sorted_decision_order(&linkage);
        Self::new(prop, linkage, order, &[]).expect("no fixed decisions")
    }

    /// Data parallelism over the non-trainable inputs, weights held replicated.
    pub fn adp(g: &HloGraph) -> Result<Self, EnvError> {
        let names: Vec<String> = adp_candidates(g)
            .iter()
            .map(|id| g.instruction(*id).expect("candidate").name.clone())
            .collect();
        let dims = g.decision_dims(&names).expect("candidates exist");
        let fixed: Vec<(DimIndex, DimStatus)> = g
            .trainable_dims()
            .into_iter()
            .map(|d| (d, DimStatus::Replicated))
            .collect();
        let linkage = Arc::new(LinkageGroups::none(&dims));
        let order = (0..dims.len()).collect();
        Self::new(Arc::new(Propagator::new(g, dims)), linkage, order, &fixed)
    }

    pub fn with_rewards(mut self, rewards: Rewards) -> Self {
        self.rewards = rewards;
        self
    }

    pub fn propagator(&self) -> &Arc<Propagator> {
        &self.prop
    }

    pub fn linkage(&self) -> &Arc<LinkageGroups> {
        &self.linkage
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn statuses(&self) -> Vec<DimStatus> {
        (0..self.len())
            .map(|i| self.closure.candidate_status(&self.prop, i))
            .collect()
    }

    pub fn closure(&self) -> &Closure {
        &self.closure
    }

    /// Flat index of the dim to decide next.
    pub fn current_dim(&self) -> Option<usize> {
        (!self.done).then(|| self.order[self.cursor])
    }

    pub fn is_conflict(&self) -> bool {
        self.conflict
    }

    pub fn classification(&self) -> Outcome {
        if self.conflict {
            return Outcome::Conflict;
        }
        self.prop.outcome(&self.closure)
    }

    /// Decisions taken so far in this episode.
    pub fn decisions(&self) -> &[(usize, DimStatus)] {
        &self.decisions
    }

    fn advance(&mut self) {
        while self.cursor < self.order.len()
            && self
                .closure
                .candidate_status(&self.prop, self.order[self.cursor])
                .is_decided()
        {
            self.cursor += 1;
        }
        self.done = self.cursor >= self.order.len();
    }

    /// Reverts replicated dims that could have been partitioned and makes
    /// the result the starting point of subsequent episodes.
    pub fn finetune_reset(&mut self, strategy: &[DimStatus]) -> Result<Vec<f64>, EnvError> {
        if strategy.len() != self.len() || strategy.iter().any(|s| !s.is_decided()) {
            return Err(EnvError::NoStrategy("strategy is not fully decided".into()));
        }
        let mut start = self.base.clone();
        for (flat, &s) in strategy.iter().enumerate() {
            let revert = s == DimStatus::Replicated && self.linkage.get(flat, DimStatus::Partitioned).feasible;
            if revert {
                continue;
            }
            if start.decide(&self.prop, self.prop.candidate_var(flat), s).is_err() {
                return Err(EnvError::NoStrategy("strategy conflicts under propagation".into()));
            }
        }
        self.start = start;
        Ok(self.reset())
    }

    /// 0.4 per partitioned and 0.1 per replicated candidate with the default rewards.
    pub fn strategy_score(&self) -> f64 {
        self.statuses()
            .iter()
            .map(|s| match s {
                DimStatus::Partitioned => self.rewards.partition,
                DimStatus::Replicated => self.rewards.replicate,
                DimStatus::Undecided => 0.0,
            })
            .sum()
    }

    /// Forgets any finetune starting point.
    pub fn clear_start(&mut self) {
        self.start = self.base.clone();
    }

    /// Number of dims an episode from the current start has to decide.
    pub fn open_dims(&self) -> usize {
        (0..self.len())
            .filter(|&i| !self.start.candidate_status(&self.prop, i).is_decided())
            .count()
    }
}

/// Parameters that are neither trainable nor constants, in id order.
pub fn adp_candidates(g: &HloGraph) -> Vec<InstrId> {
    g.instructions()
        .iter()
        .enumerate()
        .filter(|(n, i)| i.opcode == Opcode::Parameter && !g.is_trainable(*n))
        .map(|(_, i)| i.id)
        .collect()
}

impl Scored for DecisionOutcome {
    fn score(&self) -> f64 {
        self.score
    }
}

impl Environment for DecisionEnv {
    type Outcome = DecisionOutcome;

    fn state_dim(&self) -> usize {
        self.len() + 1
    }

    fn action_count(&self) -> usize {
        2
    }

    fn reset(&mut self) -> Vec<f64> {
        self.closure = self.start.clone();
        self.cursor = 0;
        self.conflict = false;
        self.decisions.clear();
        self.total_reward = 0.0;
        self.advance();
        self.state()
    }

    fn state(&self) -> Vec<f64> {
        let n = self.len();
        let mut s: Vec<f64> = (0..n)
            .map(|i| f64::from(self.closure.candidate_status(&self.prop, i).as_i8()))
            .collect();
        let pos = self.current_dim().unwrap_or(n);
        s.push(if n == 0 { 1.0 } else { pos as f64 / n as f64 });
        s
    }

    fn action_mask(&self) -> Vec<bool> {
        vec![true, true]
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        check_action(&self.action_mask(), action)?;
        let flat = self.order[self.cursor];
        let status = if action == ACTION_PARTITION {
            DimStatus::Partitioned
        } else {
            DimStatus::Replicated
        };
        self.decisions.push((flat, status));
        let mark = self.closure.trail().len();
        let group = self.linkage.get(flat, status);
        let mut ok = group.feasible
            && self
                .closure
                .decide(&self.prop, self.prop.candidate_var(flat), status)
                .is_ok();
        for (d, s) in &group.implied {
            if !ok {
                break;
            }
            ok = self
                .closure
                .decide(&self.prop, self.prop.candidate_var(d.flat_index), *s)
                .is_ok();
        }
        if !ok {
            self.conflict = true;
            self.done = true;
            self.total_reward += self.rewards.conflict;
            return Ok(StepResult {
                next_state: self.state(),
                reward: self.rewards.conflict,
                done: true,
                info: StepInfo {
                    conflict: true,
                    ..StepInfo::default()
                },
            });
        }
        let mut reward = 0.0;
        for &v in &self.closure.trail()[mark..] {
            if self.prop.candidate_of_var(v).is_some() {
                reward += match self.closure.status(v) {
                    DimStatus::Partitioned => self.rewards.partition,
                    _ => self.rewards.replicate,
                };
            }
        }
        self.total_reward += reward;
        self.advance();
        Ok(StepResult {
            next_state: self.state(),
            reward,
            done: self.done,
            info: StepInfo::default(),
        })
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn outcome(&self) -> Option<DecisionOutcome> {
        (self.done && !self.conflict).then(|| DecisionOutcome {
            statuses: self.statuses(),
            decisions: self.decisions.clone(),
            total_reward: self.total_reward,
            score: self.strategy_score(),
        })
    }
}
