use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use channel_rl::cli::{self, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "channel-rl", version, about = "Multi-agent Double-DQN channel selection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON run configuration; flags override file values
    #[arg(long, env = "CHANNEL_RL_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "CHANNEL_RL_SEED")]
    seed: Option<u64>,
    /// Number of training episodes (N)
    #[arg(long, env = "CHANNEL_RL_EPISODES")]
    episodes: Option<u32>,
    /// Transmissions per episode (T)
    #[arg(long, env = "CHANNEL_RL_STEPS")]
    steps: Option<u32>,
    #[arg(long, env = "CHANNEL_RL_AGENTS")]
    agents: Option<usize>,
    /// Per-transmission Bernoulli link-loss probability
    #[arg(long = "loss-prob", env = "CHANNEL_RL_LOSS_PROB")]
    loss_prob: Option<f64>,
    /// Epsilon used by the untrained baseline (1 = uniform random)
    #[arg(long = "baseline-epsilon", env = "CHANNEL_RL_BASELINE_EPSILON")]
    baseline_epsilon: Option<f64>,
    /// Output directory for CSVs, summary.json, and checkpoints
    #[arg(long, env = "CHANNEL_RL_OUT")]
    out: Option<PathBuf>,
    /// Clear each agent's replay buffer at every episode boundary
    #[arg(long)]
    reset_buffer_per_episode: bool,
    /// Reset each agent's state bit to 0 at every episode boundary
    #[arg(long)]
    reset_state_per_episode: bool,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let overrides = Overrides {
            seed: self.seed,
            episodes: self.episodes,
            steps: self.steps,
            agents: self.agents,
            loss_prob: self.loss_prob,
            baseline_epsilon: self.baseline_epsilon,
            out: self.out.clone(),
            test_episodes: None,
            reset_buffer_per_episode: self.reset_buffer_per_episode,
            reset_state_per_episode: self.reset_state_per_episode,
        };
        Ok(RunConfig::load(self.config.as_deref())?.apply(&overrides))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the training phase and write metrics plus checkpoints
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write a per-slot outcome trace (trace.csv)
        #[arg(long)]
        trace: bool,
    },
    /// Greedy testing phase from saved checkpoints
    Test {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint files, one per agent, in agent order
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Number of test episodes
        #[arg(long, default_value_t = 100)]
        test_episodes: u32,
    },
    /// Train, test, and compare against the untrained baseline
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of test/baseline episodes
        #[arg(long, default_value_t = 100)]
        test_episodes: u32,
    },
    /// Independent training runs over several seeds
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated seed list, e.g. --seeds 1,2,3,4,5
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Training run driven through the framed device protocol (mock devices)
    HilDemo {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { common, trace } => {
            let config = common.resolve()?;
            let out = cli::cmd_train(&config, trace)?;
            println!(
                "training finished: final-window (100 episodes) mean FSR = {:.4}",
                out.final_window_fsr
            );
            println!("artifacts written to {}", config.out_dir.display());
        }
        Command::Test { common, checkpoints, test_episodes } => {
            let config = common.resolve()?;
            let fsr = cli::cmd_test(&config, &checkpoints, test_episodes)?;
            println!("testing mean FSR over {test_episodes} episodes = {fsr:.4}");
        }
        Command::Compare { common, test_episodes } => {
            let mut config = common.resolve()?;
            config.test_episodes = test_episodes;
            let out = cli::cmd_compare(&config)?;
            println!("trained greedy mean FSR   = {:.4}", out.trained_fsr);
            println!("untrained baseline FSR    = {:.4}", out.baseline_fsr);
            println!("improvement               = {:.1} percentage points", out.improvement_points);
        }
        Command::Sweep { common, seeds } => {
            let config = common.resolve()?;
            let results = cli::cmd_sweep(&config, &seeds)?;
            for r in &results {
                println!(
                    "seed {:>3}: first-window FSR {:.4} -> final-window FSR {:.4}",
                    r.seed, r.first_window_fsr, r.final_window_fsr
                );
            }
            let pooled =
                results.iter().map(|r| r.final_window_fsr).sum::<f64>() / results.len() as f64;
            println!("pooled final-window mean FSR = {pooled:.4}");
        }
        Command::HilDemo { common } => {
            let config = common.resolve()?;
            let out = cli::cmd_hil_demo(&config)?;
            println!("HIL training final-window mean FSR = {:.4}", out.final_window_fsr);
            println!(
                "metrics identical to in-process run: {}",
                if out.matches_in_process { "yes" } else { "NO" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
