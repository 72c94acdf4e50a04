//! Dueling double DQN with prioritized replay and ε-greedy exploration.

mod adam;
mod network;
mod replay;

pub use adam::Adam;
pub use network::{huber, ForwardCache, Layer, QNetwork};
pub use replay::{PrioritizedReplayBuffer, Sample, Transition};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Scalar};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("state has {found} entries, network expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("every action is masked")]
    AllMasked,
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    BufferUnderfull { have: usize, need: usize },
    #[error("training diverged: non-finite parameters after step {0}")]
    Divergence(u64),
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_iters: u64,
    pub target_sync_every: u64,
    pub buffer_capacity: usize,
    pub alpha: f64,
    pub beta: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.6,
            batch_size: 64,
            lr: 5e-4,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_decay_iters: 2000,
            target_sync_every: 100,
            buffer_capacity: 2000,
            alpha: 0.2,
            beta: 0.6,
            hidden: vec![256, 256],
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn opp() -> Self {
        Self::default()
    }

    pub fn adp() -> Self {
        AgentConfig {
            eps_decay_iters: 500,
            ..Self::default()
        }
    }

    pub fn pipeline() -> Self {
        AgentConfig {
            lr: 1e-3,
            eps_decay_iters: 10_000,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_hidden(mut self, hidden: &[usize]) -> Self {
        self.hidden = hidden.to_vec();
        self
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0 <= self.eps_end && self.eps_end <= self.eps_start && self.eps_start <= 1.0) {
            return bad("need 0 <= eps_end <= eps_start <= 1");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch size must be positive and fit in the buffer");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.target_sync_every == 0 {
            return bad("learning rate and target sync period must be positive");
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bad("replay exponents must be nonnegative");
        }
        Ok(())
    }
}

/// Linear decay from `eps_start` to `eps_end` over `eps_decay_iters`, then flat.
pub fn epsilon_at(iter: u64, config: &AgentConfig) -> f64 {
    if config.eps_decay_iters == 0 || iter >= config.eps_decay_iters {
        return config.eps_end;
    }
    let frac = iter as f64 / config.eps_decay_iters as f64;
    config.eps_start + (config.eps_end - config.eps_start) * frac
}

/// Index of the largest allowed value; ties go to the lowest index.
pub fn masked_argmax<T: Scalar>(values: &[T], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in values.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// ε-greedy choice among the allowed actions.
pub fn act<T: Scalar, R: Rng>(
    net: &QNetwork<T>,
    state: &[T],
    mask: &[bool],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize, AgentError> {
    let allowed = mask.iter().filter(|&&m| m).count();
    if allowed == 0 {
        return Err(AgentError::AllMasked);
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        let k = rng.random_range(0..allowed);
        return Ok(mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .nth(k)
            .map(|(i, _)| i)
            .expect("k < allowed"));
    }
    let q = net.forward(state)?;
    Ok(masked_argmax(&q, mask).expect("some action allowed"))
}

pub struct DqnAgent<T> {
    pub config: AgentConfig,
    pub online: QNetwork<T>,
    pub target: QNetwork<T>,
    pub optimizer: Adam<T>,
    pub buffer: PrioritizedReplayBuffer<T>,
    rng: ChaCha8Rng,
    /// Gradient updates performed.
    pub train_steps: u64,
    /// Environment steps observed; drives the ε schedule.
    pub iterations: u64,
}

impl<T: Scalar> DqnAgent<T> {
    pub fn new(config: AgentConfig, state_dim: usize, actions: usize) -> Result<Self, AgentError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let online = QNetwork::new(state_dim, &config.hidden, actions, &mut rng);
        Ok(DqnAgent {
            target: online.clone(),
            optimizer: Adam::new(online.num_params()),
            buffer: PrioritizedReplayBuffer::new(config.buffer_capacity, config.alpha, config.beta),
            online,
            rng,
            train_steps: 0,
            iterations: 0,
            config,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.online.input_dim
    }

    pub fn actions(&self) -> usize {
        self.online.actions
    }

    pub fn epsilon(&self) -> f64 {
        epsilon_at(self.iterations, &self.config)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// ε-greedy action under the current schedule.
    pub fn select_action(&mut self, state: &[T], mask: &[bool]) -> Result<usize, AgentError> {
        let eps = self.epsilon();
        act(&self.online, state, mask, eps, &mut self.rng)
    }

    pub fn greedy_action(&self, state: &[T], mask: &[bool]) -> Result<usize, AgentError> {
        if !mask.iter().any(|&m| m) {
            return Err(AgentError::AllMasked);
        }
        let q = self.online.forward(state)?;
        Ok(masked_argmax(&q, mask).expect("some action allowed"))
    }

    pub fn q_values(&self, state: &[T]) -> Result<Vec<T>, AgentError> {
        self.online.forward(state)
    }

    pub fn observe(&mut self, t: Transition<T>) {
        self.iterations += 1;
        self.buffer.push(t);
    }

    pub fn ready(&self) -> bool {
        self.buffer.len() >= self.config.batch_size
    }

    /// One double-DQN update on a prioritized minibatch.
    pub fn train_step(&mut self) -> Result<T, AgentError> {
        let b = self.config.batch_size;
        if self.buffer.len() < b {
            return Err(AgentError::BufferUnderfull {
                have: self.buffer.len(),
                need: b,
            });
        }
        let sample = self.buffer.sample(b, &mut self.rng);
        let dim = self.state_dim();
        let na = self.actions();
        let mut states = Vec::with_capacity(b * dim);
        let mut next = Vec::with_capacity(b * dim);
        let mut actions = Vec::with_capacity(b);
        for &i in &sample.indices {
            let t = self.buffer.get(i);
            states.extend_from_slice(&t.state);
            next.extend_from_slice(&t.next_state);
            actions.push(t.action);
        }
        let online_next = self.online.forward_batch(&next, b).q;
        let target_next = self.target.forward_batch(&next, b).q;
        let gamma = lit::<T>(self.config.gamma);
        let targets: Vec<T> = sample
            .indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let t = self.buffer.get(i);
                if t.done {
                    return t.reward;
                }
                match masked_argmax(&online_next[k * na..(k + 1) * na], &t.mask_next) {
                    Some(a) => t.reward + gamma * target_next[k * na + a],
                    None => t.reward,
                }
            })
            .collect();
        let (loss, grad, td) = self.online.loss_and_grad(&states, &actions, &targets, &sample.weights);
        self.optimizer.step(&mut self.online.params, &grad, self.config.lr);
        self.train_steps += 1;
        if !self.online.is_finite() || !loss.is_finite() {
            return Err(AgentError::Divergence(self.train_steps));
        }
        for (&i, d) in sample.indices.iter().zip(&td) {
            self.buffer.update_priority(i, d.abs().to_f64_lossy() + 1e-6);
        }
        if self.train_steps.is_multiple_of(self.config.target_sync_every) {
            self.sync_target();
        }
        Ok(loss)
    }

    pub fn sync_target(&mut self) {
        self.target.params.clone_from(&self.online.params);
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            online: self.online.clone(),
            target: self.target.clone(),
            optimizer: self.optimizer.clone(),
            train_steps: self.train_steps,
            iterations: self.iterations,
            rng: self.rng.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        std::fs::write(path, serde_json::to_string(&self.checkpoint())?)?;
        Ok(())
    }

    /// Restores an agent, rejecting checkpoints built for other dimensions.
    pub fn load(path: &Path, state_dim: usize, actions: usize) -> Result<Self, AgentError> {
        let cp: Checkpoint<T> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(cp, state_dim, actions)
    }

    pub fn from_checkpoint(cp: Checkpoint<T>, state_dim: usize, actions: usize) -> Result<Self, AgentError> {
        let mismatch = |m: String| Err(AgentError::CheckpointMismatch(m));
        if cp.version != CHECKPOINT_VERSION {
            return mismatch(format!("version {}", cp.version));
        }
        if cp.online.input_dim != state_dim || cp.online.actions != actions {
            return mismatch(format!(
                "network is {}x{}, environment needs {}x{}",
                cp.online.input_dim, cp.online.actions, state_dim, actions
            ));
        }
        let expected = QNetwork::<T>::zeros(state_dim, &cp.config.hidden, actions);
        for (name, net) in [("online", &cp.online), ("target", &cp.target)] {
            if !net.same_shape(&expected)
                || net.num_params() != expected.num_params()
                || net.layers() != expected.layers()
            {
                return mismatch(format!("{name} parameters do not match the configured layout"));
            }
        }
        if cp.optimizer.m.len() != expected.num_params() || cp.optimizer.v.len() != expected.num_params() {
            return mismatch("optimizer state length".into());
        }
        cp.config.validate()?;
        Ok(DqnAgent {
            buffer: PrioritizedReplayBuffer::new(cp.config.buffer_capacity, cp.config.alpha, cp.config.beta),
            config: cp.config,
            online: cp.online,
            target: cp.target,
            optimizer: cp.optimizer,
            rng: cp.rng,
            train_steps: cp.train_steps,
            iterations: cp.iterations,
        })
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub version: u32,
    pub config: AgentConfig,
    pub online: QNetwork<T>,
    pub target: QNetwork<T>,
    pub optimizer: Adam<T>,
    pub train_steps: u64,
    pub iterations: u64,
    pub rng: ChaCha8Rng,
}
