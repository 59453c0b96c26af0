//! Double-DQN learning machinery: a tiny fully connected Q-network with
//! analytic gradients, a bounded replay buffer, the linearly decaying
//! epsilon schedule, and the training-phase update rule.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum DqnError {
    #[error("invalid transition: reward ({reward}) must equal next_state ({next_state})")]
    RewardStateMismatch { reward: u8, next_state: u8 },
    #[error("episode index {n} outside schedule range [1, {total}]")]
    EpisodeOutOfRange { n: u32, total: u32 },
    #[error("invalid hyperparameter {field}: {reason}")]
    InvalidHyperparam { field: &'static str, reason: String },
    #[error("checkpoint architecture mismatch: expected {expected:?}, found {found:?}")]
    ArchMismatch { expected: Architecture, found: Architecture },
    #[error("checkpoint layer {layer} has {found} values, expected {expected}")]
    BadCheckpointShape { layer: &'static str, expected: usize, found: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
}

/// Training hyperparameters. Defaults mirror the reference deployment:
/// two end devices, 500 episodes of 20 transmissions, batch 16, sync 10.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub gamma: f64,
    pub episodes: u32,
    pub steps_per_episode: u32,
    pub batch_size: usize,
    pub sync_period: u32,
    pub buffer_capacity: usize,
    pub hidden_units: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            gamma: 0.6,
            episodes: 500,
            steps_per_episode: 20,
            batch_size: 16,
            sync_period: 10,
            buffer_capacity: 10_000,
            hidden_units: 16,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), DqnError> {
        let bad = |field: &'static str, reason: String| {
            Err(DqnError::InvalidHyperparam { field, reason })
        };
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", format!("must be in [0, 1], got {}", self.gamma));
        }
        if self.episodes < 2 {
            return bad("episodes", format!("must be >= 2, got {}", self.episodes));
        }
        if self.steps_per_episode == 0 {
            return bad("steps_per_episode", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.sync_period == 0 {
            return bad("sync_period", "must be positive".into());
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity", "must be positive".into());
        }
        if self.batch_size > self.buffer_capacity {
            return bad(
                "batch_size",
                format!("{} exceeds buffer_capacity {}", self.batch_size, self.buffer_capacity),
            );
        }
        if self.hidden_units == 0 {
            return bad("hidden_units", "must be positive".into());
        }
        Ok(())
    }
}

/// One experience tuple. `reward == next_state` always: both are the ACK bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: u8,
    pub action: usize,
    pub reward: u8,
    pub next_state: u8,
}

impl Transition {
    pub fn new(state: u8, action: usize, reward: u8, next_state: u8) -> Result<Self, DqnError> {
        if reward != next_state {
            return Err(DqnError::RewardStateMismatch { reward, next_state });
        }
        debug_assert!(state <= 1 && reward <= 1);
        Ok(Self { state, action, reward, next_state })
    }

    /// Build directly from the ACK bit, which is both reward and next state.
    pub fn from_ack(state: u8, action: usize, ack: bool) -> Self {
        let bit = ack as u8;
        Self { state, action, reward: bit, next_state: bit }
    }
}

/// Bounded FIFO of transitions with uniform without-replacement sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    storage: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self { storage: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, t: Transition) -> Result<(), DqnError> {
        if t.reward != t.next_state {
            return Err(DqnError::RewardStateMismatch { reward: t.reward, next_state: t.next_state });
        }
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.storage.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    /// Uniform sample of `batch_size` distinct transitions, or `None` while
    /// the buffer holds fewer than `batch_size` (no update that step).
    pub fn sample_minibatch(
        &self,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<Vec<Transition>> {
        if self.storage.len() < batch_size {
            return None;
        }
        let picked = rand::seq::index::sample(rng, self.storage.len(), batch_size);
        Some(picked.iter().map(|i| self.storage[i]).collect())
    }
}

/// Linear decay eps(n) = 1 - (n-1)/(N-1) over episodes 1..=N.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonSchedule {
    pub total_episodes: u32,
}

impl EpsilonSchedule {
    pub fn new(total_episodes: u32) -> Self {
        assert!(total_episodes >= 2, "epsilon schedule needs at least 2 episodes");
        Self { total_episodes }
    }

    pub fn epsilon_at(&self, n: u32) -> Result<f64, DqnError> {
        if n < 1 || n > self.total_episodes {
            return Err(DqnError::EpisodeOutOfRange { n, total: self.total_episodes });
        }
        let eps = 1.0 - (n - 1) as f64 / (self.total_episodes - 1) as f64;
        Ok(eps.clamp(0.0, 1.0))
    }
}

/// Network shape: one-hot binary state in, one linear Q-value per channel out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Architecture {
    pub fn new(hidden_dim: usize, num_actions: usize) -> Self {
        Self { input_dim: 2, hidden_dim, output_dim: num_actions }
    }
}

/// Weights of one two-layer MLP: hidden = relu(w1 x + b1), q = w2 hidden + b2.
/// Matrices are stored row-major, one row per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

impl Weights {
    fn zeros(arch: Architecture) -> Self {
        Self {
            w1: vec![vec![0.0; arch.input_dim]; arch.hidden_dim],
            b1: vec![0.0; arch.hidden_dim],
            w2: vec![vec![0.0; arch.hidden_dim]; arch.output_dim],
            b2: vec![0.0; arch.output_dim],
        }
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| {
                let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                z.max(0.0)
            })
            .collect();
        self.w2
            .iter()
            .zip(&self.b2)
            .map(|(row, b)| row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.w1.iter().flatten().all(|w| w.is_finite())
            && self.b1.iter().all(|w| w.is_finite())
            && self.w2.iter().flatten().all(|w| w.is_finite())
            && self.b2.iter().all(|w| w.is_finite())
    }
}

/// Main and target networks. The target is a periodically synchronized copy
/// used only to evaluate bootstrap values.
#[derive(Debug, Clone)]
pub struct QNetwork {
    pub arch: Architecture,
    pub theta: Weights,
    pub theta_target: Weights,
    pub init_seed: u64,
}

/// Which set of weights a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichNet {
    Main,
    Target,
}

fn one_hot(state: u8) -> [f64; 2] {
    if state == 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

/// Greedy argmax with ties broken by the lowest channel index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl QNetwork {
    /// Seeded init: weights uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// biases zero, target an exact copy of the main network.
    pub fn init(seed: u64, arch: Architecture) -> Self {
        let mut gen = rng::derive(seed, 0);
        let mut theta = Weights::zeros(arch);
        let k1 = 1.0 / (arch.input_dim as f64).sqrt();
        for row in &mut theta.w1 {
            for w in row {
                *w = gen.random_range(-k1..k1);
            }
        }
        let k2 = 1.0 / (arch.hidden_dim as f64).sqrt();
        for row in &mut theta.w2 {
            for w in row {
                *w = gen.random_range(-k2..k2);
            }
        }
        let theta_target = theta.clone();
        Self { arch, theta, theta_target, init_seed: seed }
    }

    pub fn forward(&self, state: u8, which: WhichNet) -> Vec<f64> {
        let weights = match which {
            WhichNet::Main => &self.theta,
            WhichNet::Target => &self.theta_target,
        };
        weights.forward(&one_hot(state))
    }

    pub fn num_actions(&self) -> usize {
        self.arch.output_dim
    }

    /// Epsilon-greedy action. Always consumes exactly one uniform draw for
    /// the explore/exploit decision, plus one index draw when exploring.
    pub fn select_action(&self, state: u8, epsilon: f64, rng: &mut ChaCha8Rng) -> usize {
        debug_assert!((0.0..=1.0).contains(&epsilon));
        if rng.random::<f64>() < epsilon {
            rng.random_range(0..self.num_actions())
        } else {
            argmax(&self.forward(state, WhichNet::Main))
        }
    }

    /// Double-DQN target: the main network picks the bootstrap action at s',
    /// the target network evaluates it.
    pub fn double_dqn_target(&self, t: &Transition, gamma: f64) -> f64 {
        let next_main = self.forward(t.next_state, WhichNet::Main);
        let a_star = argmax(&next_main);
        let next_target = self.forward(t.next_state, WhichNet::Target);
        t.reward as f64 + gamma * next_target[a_star]
    }

    /// Mean squared error between fixed targets and the main network's
    /// Q(s, a) over the batch. Only the taken action contributes per sample.
    pub fn batch_loss(&self, batch: &[Transition], targets: &[f64]) -> f64 {
        assert_eq!(batch.len(), targets.len());
        let sum: f64 = batch
            .iter()
            .zip(targets)
            .map(|(t, target)| {
                let q = self.theta.forward(&one_hot(t.state))[t.action];
                (target - q) * (target - q)
            })
            .sum();
        sum / batch.len() as f64
    }

    /// Loss and its analytic gradient w.r.t. the main-network weights,
    /// with targets held constant.
    pub fn loss_and_gradient(&self, batch: &[Transition], targets: &[f64]) -> (f64, Weights) {
        assert!(!batch.is_empty());
        assert_eq!(batch.len(), targets.len());
        let mut grad = Weights::zeros(self.arch);
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;

        for (t, &target) in batch.iter().zip(targets) {
            let x = one_hot(t.state);
            let pre: Vec<f64> = self
                .theta
                .w1
                .iter()
                .zip(&self.theta.b1)
                .map(|(row, b)| row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>() + b)
                .collect();
            let hidden: Vec<f64> = pre.iter().map(|z| z.max(0.0)).collect();
            let q = self.theta.w2[t.action]
                .iter()
                .zip(&hidden)
                .map(|(w, h)| w * h)
                .sum::<f64>()
                + self.theta.b2[t.action];

            let err = q - target;
            loss += scale * err * err;

            // d(loss)/dq for the taken action; other outputs get no gradient.
            let g = 2.0 * scale * err;
            for (j, h) in hidden.iter().enumerate() {
                grad.w2[t.action][j] += g * h;
            }
            grad.b2[t.action] += g;
            for (j, z) in pre.iter().enumerate() {
                if *z > 0.0 {
                    let dh = g * self.theta.w2[t.action][j];
                    for (k, xi) in x.iter().enumerate() {
                        grad.w1[j][k] += dh * xi;
                    }
                    grad.b1[j] += dh;
                }
            }
        }
        (loss, grad)
    }

    /// One full-batch SGD step on the Double-DQN loss. Targets are computed
    /// from the pre-step weights and held constant through the update.
    /// Returns the pre-step loss. The target network is untouched.
    pub fn train_step(&mut self, batch: &[Transition], hp: &Hyperparams) -> f64 {
        let targets: Vec<f64> =
            batch.iter().map(|t| self.double_dqn_target(t, hp.gamma)).collect();
        let (loss, grad) = self.loss_and_gradient(batch, &targets);
        let lr = hp.learning_rate;
        for (row, grow) in self.theta.w1.iter_mut().zip(&grad.w1) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= lr * g;
            }
        }
        for (b, g) in self.theta.b1.iter_mut().zip(&grad.b1) {
            *b -= lr * g;
        }
        for (row, grow) in self.theta.w2.iter_mut().zip(&grad.w2) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= lr * g;
            }
        }
        for (b, g) in self.theta.b2.iter_mut().zip(&grad.b2) {
            *b -= lr * g;
        }
        loss
    }

    pub fn sync_target(&mut self) {
        self.theta_target = self.theta.clone();
    }

    pub fn weights_finite(&self) -> bool {
        self.theta.is_finite() && self.theta_target.is_finite()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), DqnError> {
        let ckpt = Checkpoint::from_network(self);
        fs::write(path, serde_json::to_string_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, DqnError> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        ckpt.into_network()
    }
}

/// On-disk network format: architecture, flat row-major weight arrays per
/// layer for both networks, and the init seed.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub seed: u64,
    pub theta: CheckpointLayers,
    pub theta_target: CheckpointLayers,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointLayers {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl CheckpointLayers {
    fn from_weights(w: &Weights) -> Self {
        Self {
            w1: w.w1.iter().flatten().copied().collect(),
            b1: w.b1.clone(),
            w2: w.w2.iter().flatten().copied().collect(),
            b2: w.b2.clone(),
        }
    }

    fn into_weights(self, arch: Architecture) -> Result<Weights, DqnError> {
        let check = |layer: &'static str, expected: usize, found: usize| {
            if expected != found {
                Err(DqnError::BadCheckpointShape { layer, expected, found })
            } else {
                Ok(())
            }
        };
        check("w1", arch.hidden_dim * arch.input_dim, self.w1.len())?;
        check("b1", arch.hidden_dim, self.b1.len())?;
        check("w2", arch.output_dim * arch.hidden_dim, self.w2.len())?;
        check("b2", arch.output_dim, self.b2.len())?;
        Ok(Weights {
            w1: self.w1.chunks(arch.input_dim).map(|c| c.to_vec()).collect(),
            b1: self.b1,
            w2: self.w2.chunks(arch.hidden_dim).map(|c| c.to_vec()).collect(),
            b2: self.b2,
        })
    }
}

impl Checkpoint {
    pub fn from_network(net: &QNetwork) -> Self {
        Self {
            arch: net.arch,
            seed: net.init_seed,
            theta: CheckpointLayers::from_weights(&net.theta),
            theta_target: CheckpointLayers::from_weights(&net.theta_target),
        }
    }

    pub fn into_network(self) -> Result<QNetwork, DqnError> {
        Ok(QNetwork {
            arch: self.arch,
            theta: self.theta.into_weights(self.arch)?,
            theta_target: self.theta_target.into_weights(self.arch)?,
            init_seed: self.seed,
        })
    }
}
