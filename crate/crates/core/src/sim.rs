//! Training, testing, and baseline loops across multiple independent
//! learners coupled only through the shared slot.
//!
//! Each slot is a barrier: all agents pick actions, the joint choice is
//! resolved at once, then every agent applies its own update. The slot
//! resolution is abstracted behind [`SlotBackend`] so the same loop can run
//! in-process or through the framed device protocol.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dqn::{
    argmax, Architecture, DqnError, EpsilonSchedule, Hyperparams, QNetwork, ReplayBuffer,
    Transition, WhichNet,
};
use crate::env::{self, ChannelPlan, EnvError, LinkModel};
use crate::rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dqn(#[from] DqnError),
    #[error("invalid config: num_agents must be positive")]
    NoAgents,
    #[error(
        "training diverged: agent {agent}, episode {episode}, step {step}, loss {loss}"
    )]
    Diverged { agent: usize, episode: u32, step: u32, loss: f64 },
    #[error("slot backend: {0}")]
    Backend(String),
}

/// Everything a run needs: hyperparameters, channel plan, link model,
/// agent count, master seed, and the two fidelity flags.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub hp: Hyperparams,
    pub plan: ChannelPlan,
    pub link: LinkModel,
    pub num_agents: usize,
    pub master_seed: u64,
    pub reset_buffer_per_episode: bool,
    pub reset_state_per_episode: bool,
}

impl SimParams {
    pub fn new(hp: Hyperparams, num_agents: usize, master_seed: u64) -> Self {
        Self {
            hp,
            plan: ChannelPlan::default(),
            link: LinkModel::default(),
            num_agents,
            master_seed,
            reset_buffer_per_episode: false,
            reset_state_per_episode: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.hp.validate()?;
        self.plan.validate()?;
        self.link.validate()?;
        if self.num_agents == 0 {
            return Err(SimError::NoAgents);
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(self.hp.hidden_units, self.plan.num_channels())
    }
}

/// One learner: its networks, replay buffer, ACK-derived state, and the
/// RNG streams it owns.
#[derive(Debug)]
pub struct AgentState {
    pub id: usize,
    pub net: QNetwork,
    pub buffer: ReplayBuffer,
    pub state: u8,
    pub policy_rng: ChaCha8Rng,
    pub sampler_rng: ChaCha8Rng,
}

impl AgentState {
    /// Freshly initialized learner with its RNG streams derived from the
    /// master seed and agent id.
    pub fn new(id: usize, params: &SimParams) -> Self {
        let net_seed: u64 = rng::agent_init(params.master_seed, id).random();
        Self {
            id,
            net: QNetwork::init(net_seed, params.architecture()),
            buffer: ReplayBuffer::new(params.hp.buffer_capacity),
            state: 0,
            policy_rng: rng::agent_policy(params.master_seed, id),
            sampler_rng: rng::agent_sampler(params.master_seed, id),
        }
    }

    /// The action a greedy (epsilon = 0) policy takes in each state.
    pub fn greedy_actions(&self) -> [usize; 2] {
        [
            argmax(&self.net.forward(0, WhichNet::Main)),
            argmax(&self.net.forward(1, WhichNet::Main)),
        ]
    }
}

/// Per-episode bookkeeping behind the FSR-over-episodes plot.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: u32,
    pub successes: Vec<u32>,
    pub fsr: Vec<f64>,
    pub mean_fsr: f64,
    pub epsilon: f64,
}

impl EpisodeMetrics {
    fn new(episode: u32, successes: Vec<u32>, steps: u32, epsilon: f64) -> Self {
        let fsr: Vec<f64> = successes.iter().map(|&s| s as f64 / steps as f64).collect();
        let mean_fsr = fsr.iter().sum::<f64>() / fsr.len() as f64;
        Self { episode, successes, fsr, mean_fsr, epsilon }
    }
}

/// Per-slot trace row for diagnostics output.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub slot: u64,
    pub agent: usize,
    pub channel: usize,
    pub success: bool,
    pub cause: &'static str,
}

/// Resolves one synchronized slot: takes every agent's channel choice,
/// returns every agent's ACK bit.
pub trait SlotBackend {
    fn transmit(&mut self, choices: &[usize]) -> Result<Vec<bool>, SimError>;
}

/// In-process backend: resolves slots directly against the channel plan.
pub struct EnvBackend {
    plan: ChannelPlan,
    link: LinkModel,
    rng: ChaCha8Rng,
    slot: u64,
    trace: Option<Vec<TraceRow>>,
}

impl EnvBackend {
    pub fn new(plan: ChannelPlan, link: LinkModel, rng: ChaCha8Rng) -> Self {
        Self { plan, link, rng, slot: 0, trace: None }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.trace.take().unwrap_or_default()
    }
}

impl SlotBackend for EnvBackend {
    fn transmit(&mut self, choices: &[usize]) -> Result<Vec<bool>, SimError> {
        let outcome = env::resolve_slot(&self.plan, &self.link, choices, &mut self.rng)?;
        if let Some(trace) = &mut self.trace {
            for (agent, a) in outcome.agents.iter().enumerate() {
                trace.push(TraceRow {
                    slot: self.slot,
                    agent,
                    channel: a.channel,
                    success: a.success,
                    cause: a.cause.as_str(),
                });
            }
        }
        self.slot += 1;
        Ok(outcome.agents.iter().map(|a| a.success).collect())
    }
}

const LOSS_DIVERGENCE_LIMIT: f64 = 1e6;

/// Run the full training phase in-process.
pub fn run_training(
    params: &SimParams,
) -> Result<(Vec<AgentState>, Vec<EpisodeMetrics>), SimError> {
    let mut backend = EnvBackend::new(
        params.plan.clone(),
        params.link.clone(),
        rng::env_stream(params.master_seed),
    );
    run_training_with_backend(params, &mut backend)
}

/// Training phase against an arbitrary slot backend. N episodes of T slots;
/// epsilon decays linearly across episodes; each agent stores its ACK
/// transition, samples a minibatch when the buffer is ready, takes one SGD
/// step, and syncs its target every `sync_period` environment steps.
pub fn run_training_with_backend(
    params: &SimParams,
    backend: &mut dyn SlotBackend,
) -> Result<(Vec<AgentState>, Vec<EpisodeMetrics>), SimError> {
    params.validate()?;
    let hp = &params.hp;
    let schedule = EpsilonSchedule::new(hp.episodes);
    let mut agents: Vec<AgentState> =
        (0..params.num_agents).map(|id| AgentState::new(id, params)).collect();
    let mut metrics = Vec::with_capacity(hp.episodes as usize);

    for n in 1..=hp.episodes {
        let epsilon = schedule.epsilon_at(n)?;
        if params.reset_buffer_per_episode {
            for agent in &mut agents {
                agent.buffer.clear();
            }
        }
        if params.reset_state_per_episode {
            for agent in &mut agents {
                agent.state = 0;
            }
        }
        let mut successes = vec![0u32; params.num_agents];

        for t in 1..=hp.steps_per_episode {
            let choices: Vec<usize> = agents
                .iter_mut()
                .map(|a| a.net.select_action(a.state, epsilon, &mut a.policy_rng))
                .collect();
            let acks = backend.transmit(&choices)?;

            for (agent, (&action, &ack)) in agents.iter_mut().zip(choices.iter().zip(&acks)) {
                let transition = Transition::from_ack(agent.state, action, ack);
                agent.buffer.push(transition)?;
                agent.state = transition.next_state;
                if ack {
                    successes[agent.id] += 1;
                }
                if let Some(batch) =
                    agent.buffer.sample_minibatch(hp.batch_size, &mut agent.sampler_rng)
                {
                    let loss = agent.net.train_step(&batch, hp);
                    if !loss.is_finite() || loss > LOSS_DIVERGENCE_LIMIT {
                        return Err(SimError::Diverged {
                            agent: agent.id,
                            episode: n,
                            step: t,
                            loss,
                        });
                    }
                }
            }

            // line-11 placement: counted in environment steps, buffer-ready or not
            if t % hp.sync_period == 0 {
                for agent in &mut agents {
                    agent.net.sync_target();
                }
            }
        }
        metrics.push(EpisodeMetrics::new(n, successes, hp.steps_per_episode, epsilon));
    }
    Ok((agents, metrics))
}

/// Testing phase: pure greedy channel selection, no buffer pushes, no
/// weight updates. Agent state still tracks the ACK bit between slots.
pub fn run_testing(
    agents: &mut [AgentState],
    params: &SimParams,
    episodes: u32,
) -> Result<Vec<EpisodeMetrics>, SimError> {
    params.validate()?;
    let mut env_rng = rng::test_env_stream(params.master_seed);
    let mut metrics = Vec::with_capacity(episodes as usize);

    for n in 1..=episodes {
        let mut successes = vec![0u32; agents.len()];
        for _ in 1..=params.hp.steps_per_episode {
            let choices: Vec<usize> = agents
                .iter()
                .map(|a| argmax(&a.net.forward(a.state, WhichNet::Main)))
                .collect();
            let outcome = env::resolve_slot(&params.plan, &params.link, &choices, &mut env_rng)?;
            for (i, agent) in agents.iter_mut().enumerate() {
                let (next_state, reward) = env::feedback(&outcome, i);
                agent.state = next_state;
                successes[i] += reward as u32;
            }
        }
        metrics.push(EpisodeMetrics::new(n, successes, params.hp.steps_per_episode, 0.0));
    }
    Ok(metrics)
}

/// Untrained baseline: freshly initialized agents acting epsilon-greedily
/// (epsilon = 1 is uniform random) with no learning.
pub fn run_baseline_untrained(
    params: &SimParams,
    episodes: u32,
    epsilon: f64,
) -> Result<Vec<EpisodeMetrics>, SimError> {
    params.validate()?;
    assert!((0.0..=1.0).contains(&epsilon), "baseline epsilon must be in [0, 1]");
    let mut agents: Vec<AgentState> =
        (0..params.num_agents).map(|id| AgentState::new(id, params)).collect();
    let mut policy_rngs: Vec<ChaCha8Rng> = (0..params.num_agents)
        .map(|id| rng::baseline_policy(params.master_seed, id))
        .collect();
    let mut env_rng = rng::baseline_env_stream(params.master_seed);
    let mut metrics = Vec::with_capacity(episodes as usize);

    for n in 1..=episodes {
        let mut successes = vec![0u32; params.num_agents];
        for _ in 1..=params.hp.steps_per_episode {
            let choices: Vec<usize> = agents
                .iter()
                .zip(&mut policy_rngs)
                .map(|(a, rng)| a.net.select_action(a.state, epsilon, rng))
                .collect();
            let outcome = env::resolve_slot(&params.plan, &params.link, &choices, &mut env_rng)?;
            for (i, agent) in agents.iter_mut().enumerate() {
                let (next_state, reward) = env::feedback(&outcome, i);
                agent.state = next_state;
                successes[i] += reward as u32;
            }
        }
        metrics.push(EpisodeMetrics::new(n, successes, params.hp.steps_per_episode, epsilon));
    }
    Ok(metrics)
}

/// Mean of per-episode mean FSR over a slice of episodes.
pub fn mean_fsr(metrics: &[EpisodeMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(|m| m.mean_fsr).sum::<f64>() / metrics.len() as f64
}
