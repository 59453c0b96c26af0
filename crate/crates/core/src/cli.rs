//! Run configuration, metrics/summary emission, and the subcommand
//! implementations behind the binary. Config comes from an optional JSON
//! file with CLI flags (and their env-var forms) taking precedence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::dqn::{Hyperparams, QNetwork};
use crate::env::{ChannelPlan, LinkModel};
use crate::hil;
use crate::sim::{self, AgentState, EpisodeMetrics, SimError, SimParams};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Diverged(_) => EXIT_DIVERGED,
            _ => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Diverged { .. } => CliError::Diverged(e.to_string()),
            SimError::Backend(msg) => CliError::Other(msg),
            other => CliError::Config(other.to_string()),
        }
    }
}

/// Fully resolved run configuration. Every field has a default mirroring
/// the reference deployment, so an empty config file is a valid run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub episodes: u32,
    pub steps_per_episode: u32,
    pub batch_size: usize,
    pub sync_period: u32,
    pub buffer_capacity: usize,
    pub hidden_units: usize,
    pub num_agents: usize,
    pub channel_plan: ChannelPlan,
    pub loss_probability: f64,
    pub ack_always_delivered: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub reset_buffer_per_episode: bool,
    pub reset_state_per_episode: bool,
    pub baseline_epsilon: f64,
    pub test_episodes: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        Self {
            learning_rate: hp.learning_rate,
            gamma: hp.gamma,
            episodes: hp.episodes,
            steps_per_episode: hp.steps_per_episode,
            batch_size: hp.batch_size,
            sync_period: hp.sync_period,
            buffer_capacity: hp.buffer_capacity,
            hidden_units: hp.hidden_units,
            num_agents: 2,
            channel_plan: ChannelPlan::default(),
            loss_probability: 0.0,
            ack_always_delivered: true,
            seed: 1,
            out_dir: PathBuf::from("out"),
            reset_buffer_per_episode: false,
            reset_state_per_episode: false,
            baseline_epsilon: 1.0,
            test_episodes: 100,
        }
    }
}

/// Flag-level overrides; a set flag wins over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub episodes: Option<u32>,
    pub steps: Option<u32>,
    pub agents: Option<usize>,
    pub loss_prob: Option<f64>,
    pub baseline_epsilon: Option<f64>,
    pub out: Option<PathBuf>,
    pub test_episodes: Option<u32>,
    pub reset_buffer_per_episode: bool,
    pub reset_state_per_episode: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.episodes {
            self.episodes = v;
        }
        if let Some(v) = o.steps {
            self.steps_per_episode = v;
        }
        if let Some(v) = o.agents {
            self.num_agents = v;
        }
        if let Some(v) = o.loss_prob {
            self.loss_probability = v;
        }
        if let Some(v) = o.baseline_epsilon {
            self.baseline_epsilon = v;
        }
        if let Some(v) = &o.out {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.test_episodes {
            self.test_episodes = v;
        }
        if o.reset_buffer_per_episode {
            self.reset_buffer_per_episode = true;
        }
        if o.reset_state_per_episode {
            self.reset_state_per_episode = true;
        }
        self
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            gamma: self.gamma,
            episodes: self.episodes,
            steps_per_episode: self.steps_per_episode,
            batch_size: self.batch_size,
            sync_period: self.sync_period,
            buffer_capacity: self.buffer_capacity,
            hidden_units: self.hidden_units,
        }
    }

    pub fn sim_params(&self) -> Result<SimParams, CliError> {
        if !(0.0..=1.0).contains(&self.baseline_epsilon) {
            return Err(CliError::Config(format!(
                "invalid config baseline_epsilon: must be in [0, 1], got {}",
                self.baseline_epsilon
            )));
        }
        let params = SimParams {
            hp: self.hyperparams(),
            plan: self.channel_plan.clone(),
            link: LinkModel {
                loss_probability: self.loss_probability,
                ack_always_delivered: self.ack_always_delivered,
            },
            num_agents: self.num_agents,
            master_seed: self.seed,
            reset_buffer_per_episode: self.reset_buffer_per_episode,
            reset_state_per_episode: self.reset_state_per_episode,
        };
        params.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(params)
    }
}

/// Fixed metrics schema: one row per (episode, agent).
pub fn metrics_csv(metrics: &[EpisodeMetrics]) -> String {
    let mut out = String::from("episode,agent_id,successes,fsr,mean_fsr,epsilon\n");
    for m in metrics {
        for (agent, (&successes, &fsr)) in m.successes.iter().zip(&m.fsr).enumerate() {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                m.episode, agent, successes, fsr, m.mean_fsr, m.epsilon
            )
            .unwrap();
        }
    }
    out
}

/// Per-episode rows with a trailing rolling-window mean column, matching
/// the every-100-episodes averages drawn on the training plot.
pub fn episode_csv_with_rolling(metrics: &[EpisodeMetrics], window: usize) -> String {
    let rolling = rolling_mean_fsr(metrics, window);
    let mut out = String::from("episode,mean_fsr,epsilon,rolling_fsr\n");
    for (m, r) in metrics.iter().zip(&rolling) {
        writeln!(out, "{},{:.6},{:.6},{:.6}", m.episode, m.mean_fsr, m.epsilon, r).unwrap();
    }
    out
}

/// Trailing rolling mean of per-episode mean FSR (window shrinks at the
/// start of the run).
pub fn rolling_mean_fsr(metrics: &[EpisodeMetrics], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(metrics.len());
    let mut sum = 0.0;
    for (i, m) in metrics.iter().enumerate() {
        sum += m.mean_fsr;
        if i >= window {
            sum -= metrics[i - window].mean_fsr;
        }
        out.push(sum / (i.min(window - 1) + 1) as f64);
    }
    out
}

/// Mean FSR over the last `window` episodes (or all of them, if fewer).
pub fn window_mean(metrics: &[EpisodeMetrics], window: usize) -> f64 {
    let start = metrics.len().saturating_sub(window);
    sim::mean_fsr(&metrics[start..])
}

/// Mean FSR over the first `window` episodes.
pub fn first_window_mean(metrics: &[EpisodeMetrics], window: usize) -> f64 {
    sim::mean_fsr(&metrics[..metrics.len().min(window)])
}

fn checkpoint_path(out_dir: &Path, agent: usize) -> PathBuf {
    out_dir.join(format!("agent_{agent}.ckpt"))
}

fn write_summary(out_dir: &Path, summary: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(out_dir.join("summary.json"), text)?;
    Ok(())
}

pub struct TrainOutput {
    pub agents: Vec<AgentState>,
    pub metrics: Vec<EpisodeMetrics>,
    pub final_window_fsr: f64,
}

/// Train, write metrics.csv / summary.json / per-agent checkpoints.
pub fn cmd_train(config: &RunConfig, trace: bool) -> Result<TrainOutput, CliError> {
    let params = config.sim_params()?;
    fs::create_dir_all(&config.out_dir)?;

    let (agents, metrics, trace_rows) = if trace {
        let mut backend = sim::EnvBackend::new(
            params.plan.clone(),
            params.link.clone(),
            crate::rng::env_stream(params.master_seed),
        )
        .with_trace();
        let (agents, metrics) = sim::run_training_with_backend(&params, &mut backend)?;
        (agents, metrics, Some(backend.take_trace()))
    } else {
        let (agents, metrics) = sim::run_training(&params)?;
        (agents, metrics, None)
    };

    fs::write(config.out_dir.join("metrics.csv"), metrics_csv(&metrics))?;
    if let Some(rows) = trace_rows {
        let mut out = String::from("slot,agent,channel,success,cause\n");
        for r in rows {
            writeln!(out, "{},{},{},{},{}", r.slot, r.agent, r.channel, r.success as u8, r.cause)
                .unwrap();
        }
        fs::write(config.out_dir.join("trace.csv"), out)?;
    }
    for agent in &agents {
        agent
            .net
            .save_checkpoint(&checkpoint_path(&config.out_dir, agent.id))
            .map_err(|e| CliError::Other(e.to_string()))?;
    }

    let final_window_fsr = window_mean(&metrics, 100);
    let first_window_fsr = first_window_mean(&metrics, 100);
    write_summary(
        &config.out_dir,
        &json!({
            "command": "train",
            "config": config,
            "first_window_mean_fsr": first_window_fsr,
            "final_window_mean_fsr": final_window_fsr,
        }),
    )?;
    Ok(TrainOutput { agents, metrics, final_window_fsr })
}

/// Load checkpoints, run the greedy testing phase, write test_metrics.csv.
pub fn cmd_test(
    config: &RunConfig,
    checkpoints: &[PathBuf],
    episodes: u32,
) -> Result<f64, CliError> {
    let params = config.sim_params()?;
    let expected_arch = params.architecture();
    let mut agents = Vec::with_capacity(checkpoints.len());
    for (id, path) in checkpoints.iter().enumerate() {
        let net = QNetwork::load_checkpoint(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if net.arch != expected_arch {
            return Err(CliError::Config(format!(
                "{}: architecture {:?} does not match config {:?}",
                path.display(),
                net.arch,
                expected_arch
            )));
        }
        let mut agent = AgentState::new(id, &params);
        agent.net = net;
        agents.push(agent);
    }
    if agents.len() != params.num_agents {
        return Err(CliError::Config(format!(
            "{} checkpoints given but config has num_agents {}",
            agents.len(),
            params.num_agents
        )));
    }

    let metrics = sim::run_testing(&mut agents, &params, episodes)?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join("test_metrics.csv"), metrics_csv(&metrics))?;
    Ok(sim::mean_fsr(&metrics))
}

pub struct CompareOutput {
    pub trained_fsr: f64,
    pub baseline_fsr: f64,
    pub improvement_points: f64,
}

/// Train, test greedily, run the untrained epsilon-greedy baseline over the
/// same episode count and seed derivation, and report the gap.
pub fn cmd_compare(config: &RunConfig) -> Result<CompareOutput, CliError> {
    let params = config.sim_params()?;
    let trained = cmd_train(config, false)?;
    let mut agents = trained.agents;
    let test_metrics = sim::run_testing(&mut agents, &params, config.test_episodes)?;
    let baseline_metrics =
        sim::run_baseline_untrained(&params, config.test_episodes, config.baseline_epsilon)?;

    let trained_fsr = sim::mean_fsr(&test_metrics);
    let baseline_fsr = sim::mean_fsr(&baseline_metrics);
    let improvement_points = (trained_fsr - baseline_fsr) * 100.0;

    fs::write(config.out_dir.join("test_metrics.csv"), metrics_csv(&test_metrics))?;
    fs::write(config.out_dir.join("baseline_metrics.csv"), metrics_csv(&baseline_metrics))?;
    write_summary(
        &config.out_dir,
        &json!({
            "command": "compare",
            "config": config,
            "training_final_window_mean_fsr": trained.final_window_fsr,
            "testing_mean_fsr": trained_fsr,
            "baseline_epsilon": config.baseline_epsilon,
            "baseline_mean_fsr": baseline_fsr,
            "improvement_points": improvement_points,
        }),
    )?;
    Ok(CompareOutput { trained_fsr, baseline_fsr, improvement_points })
}

pub struct SweepSeedResult {
    pub seed: u64,
    pub first_window_fsr: f64,
    pub final_window_fsr: f64,
}

/// Independent training runs across seeds; per-seed episode CSVs carry a
/// rolling-100-episode FSR column, plus a pooled summary.
pub fn cmd_sweep(config: &RunConfig, seeds: &[u64]) -> Result<Vec<SweepSeedResult>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("sweep needs at least one seed".into()));
    }
    config.sim_params()?;
    fs::create_dir_all(&config.out_dir)?;

    let results: Vec<(u64, Result<Vec<EpisodeMetrics>, SimError>)> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let config = config.clone();
                    scope.spawn(move || {
                        let mut params = config.sim_params().expect("validated above");
                        params.master_seed = seed;
                        (seed, sim::run_training(&params).map(|(_, m)| m))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        });

    let mut out = Vec::with_capacity(results.len());
    for (seed, result) in results {
        let metrics = result.map_err(CliError::from)?;
        fs::write(
            config.out_dir.join(format!("sweep_seed_{seed}.csv")),
            episode_csv_with_rolling(&metrics, 100),
        )?;
        out.push(SweepSeedResult {
            seed,
            first_window_fsr: first_window_mean(&metrics, 100),
            final_window_fsr: window_mean(&metrics, 100),
        });
    }

    let pooled_final: f64 =
        out.iter().map(|r| r.final_window_fsr).sum::<f64>() / out.len() as f64;
    let pooled_first: f64 =
        out.iter().map(|r| r.first_window_fsr).sum::<f64>() / out.len() as f64;
    write_summary(
        &config.out_dir,
        &json!({
            "command": "sweep",
            "config": config,
            "seeds": seeds,
            "per_seed": out.iter().map(|r| json!({
                "seed": r.seed,
                "first_window_mean_fsr": r.first_window_fsr,
                "final_window_mean_fsr": r.final_window_fsr,
            })).collect::<Vec<_>>(),
            "pooled_first_window_mean_fsr": pooled_first,
            "pooled_final_window_mean_fsr": pooled_final,
        }),
    )?;
    Ok(out)
}

pub struct HilDemoOutput {
    pub final_window_fsr: f64,
    pub matches_in_process: bool,
}

/// Run training through the framed protocol against mock devices and check
/// the metrics against the in-process run with the same seeds.
pub fn cmd_hil_demo(config: &RunConfig) -> Result<HilDemoOutput, CliError> {
    let params = config.sim_params()?;
    fs::create_dir_all(&config.out_dir)?;
    let (_, hil_metrics) = hil::run_hil_training(&params)?;
    let (_, sim_metrics) = sim::run_training(&params)?;
    let matches_in_process = hil_metrics == sim_metrics;

    fs::write(config.out_dir.join("metrics_hil.csv"), metrics_csv(&hil_metrics))?;
    let final_window_fsr = window_mean(&hil_metrics, 100);
    write_summary(
        &config.out_dir,
        &json!({
            "command": "hil-demo",
            "config": config,
            "final_window_mean_fsr": final_window_fsr,
            "matches_in_process": matches_in_process,
        }),
    )?;
    Ok(HilDemoOutput { final_window_fsr, matches_in_process })
}
