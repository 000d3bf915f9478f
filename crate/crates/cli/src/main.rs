use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gazebc::data::{SplitTag, Trajectory};
use gazebc::eval::results_table;
use gazebc::policy::PolicyNetwork;
use gazebc::world::sample_configurations;
use gazebc_cli::commands::{self, EvalOptions, Metric, TrainOptions};
use gazebc_cli::config::ExperimentConfig;
use gazebc_cli::replay::{self, ReplayOptions};
use gazebc_cli::teleop::{TeleopOptions, TeleopServer};
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

#[derive(Parser)]
#[command(name = "gazebc", version, about = "Gaze-assisted behaviour cloning for drone navigation")]
struct Cli {
    /// Experiment configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record demonstrations from the scripted oracle or a teleop client.
    Collect(CollectArgs),
    /// Train one policy checkpoint.
    Train(TrainArgs),
    /// Roll out checkpoints (one per training seed) and write a report.
    Eval(EvalArgs),
    /// Paired signed-rank test between two reports.
    Compare(CompareArgs),
    /// Print the results table for one or more reports.
    Table { reports: Vec<PathBuf> },
    /// Export frames with gaze markers from a recording or a live rollout.
    Replay(ReplayArgs),
    /// Run the teleoperation bridge until the client disconnects.
    ServeTeleop(ServeArgs),
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false)]
struct SourceFlags {
    #[arg(long, group = "source")]
    oracle: bool,
    #[arg(long, group = "source")]
    teleop: bool,
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    source: SourceFlags,
    #[arg(long)]
    out: PathBuf,
    /// Trajectories to record; defaults to `data.count` for the oracle and 1 for teleop.
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    net: NetArgs,
    /// Seconds to wait for a teleop client.
    #[arg(long, default_value_t = 60.0)]
    accept_timeout: f64,
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8765)]
    port: u16,
    /// Simulation tick in milliseconds.
    #[arg(long, default_value_t = 100)]
    tick_ms: u64,
    /// Advance only when the client has answered the current frame.
    #[arg(long)]
    lockstep: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    lambda_gaze: Option<f64>,
    #[arg(long)]
    lambda_bc: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for SplitTag {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Test => SplitTag::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "model")]
    label: String,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline report.
    a: PathBuf,
    /// Candidate report; the test is on candidate minus baseline.
    b: PathBuf,
    #[arg(long, value_enum, default_value = "completion")]
    metric: Metric,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long, conflicts_with = "rollout", required_unless_present = "rollout")]
    trajectory: Option<PathBuf>,
    /// Fly the checkpoint on this configuration index instead.
    #[arg(long, requires = "checkpoint")]
    rollout: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    trail: usize,
    #[arg(long, default_value_t = 4)]
    scale: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    net: NetArgs,
    /// Seconds to wait for a client; waits forever when omitted.
    #[arg(long)]
    accept_timeout: Option<f64>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = ExperimentConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Collect(a) if a.source.oracle => {
            let count = a.count.unwrap_or(cfg.data.count);
            let s = commands::collect_oracle(&cfg, &a.out, count, |i, t| {
                eprintln!("trajectory {i}: {:?} after {} steps", t.outcome, t.steps.len());
            })?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Collect(a) => {
            let secs = a.accept_timeout;
            serve(&cfg, a.out, &a.net, Some(a.count.unwrap_or(1)), Some(secs))?;
        }
        Command::Train(a) => {
            let opts = TrainOptions {
                data: a.data,
                out: a.out,
                log: a.log,
                lambda_gaze: a.lambda_gaze,
                lambda_bc: a.lambda_bc,
                seed: a.seed,
                epochs: a.epochs,
            };
            let s = commands::train(&cfg, &opts, |e| {
                eprintln!("epoch {:3}  total {:.6}  gaze {:.6}  bc {:.6}", e.epoch, e.total, e.gaze_loss, e.bc_loss);
            })?;
            println!(
                "trained on {} samples from {} trajectories ({} parameters) -> {}",
                s.samples,
                s.trajectories,
                s.parameters,
                s.checkpoint.display()
            );
        }
        Command::Eval(a) => {
            let opts = EvalOptions {
                data: a.data,
                checkpoints: a.checkpoints,
                split: a.split.into(),
                label: a.label,
                seed: a.seed,
                repeats: a.repeats,
            };
            let report = commands::eval(&cfg, &opts, |i, m| {
                eprintln!("seed {i}: completion {:.1}%  collision {:.1}%  SPL {:.3}", m.completion, m.collision, m.spl);
            })?;
            std::fs::write(&a.out, report.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
            print!("{}", results_table(std::slice::from_ref(&report)));
        }
        Command::Compare(a) => {
            let ra = commands::load_report(&a.a)?;
            let rb = commands::load_report(&a.b)?;
            let r = commands::compare(&ra, &rb, a.metric)?;
            println!(
                "{} vs {} on {:?}: W = {} n = {} p = {:.6} ({})",
                rb.model,
                ra.model,
                a.metric,
                r.statistic,
                r.n,
                r.p_value,
                if r.exact { "exact" } else { "normal approximation" }
            );
        }
        Command::Table { reports } => {
            if reports.is_empty() {
                bail!("no reports given");
            }
            let rs = reports.iter().map(|p| commands::load_report(p)).collect::<Result<Vec<_>>>()?;
            print!("{}", results_table(&rs));
        }
        Command::Replay(a) => {
            let opts = ReplayOptions { out: a.out, trail: a.trail, scale: a.scale };
            let net = a.checkpoint.as_ref().map(|p| PolicyNetwork::<f32>::load(p, cfg.model.clone())).transpose()?;
            let stats = match (a.trajectory, a.rollout) {
                (Some(path), _) => {
                    let t = Trajectory::load(&path).with_context(|| format!("loading {}", path.display()))?;
                    let mut net = net;
                    replay::replay_trajectory(&t, net.as_mut(), &opts)?
                }
                (None, Some(id)) => {
                    let world = cfg.world()?;
                    let configs = sample_configurations(&world, cfg.data.count, cfg.data.config_seed)?;
                    let config = configs.get(id).with_context(|| format!("configuration {id} out of range 0..{}", configs.len()))?;
                    let net = net.context("--rollout needs --checkpoint")?;
                    let (result, stats) = replay::replay_rollout(&world, config, net, &cfg.eval_sim(), a.seed, &opts)?;
                    println!("{}", serde_json::to_string(&result)?);
                    stats
                }
                (None, None) => bail!("give --trajectory or --rollout"),
            };
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::ServeTeleop(a) => {
            serve(&cfg, a.out, &a.net, None, a.accept_timeout)?;
        }
        Command::ShowConfig => println!("{}", cfg.to_json()),
    }
    Ok(())
}

fn serve(cfg: &ExperimentConfig, out: PathBuf, net: &NetArgs, max_episodes: Option<usize>, accept_timeout: Option<f64>) -> Result<()> {
    let world = cfg.world()?;
    let configs = sample_configurations(&world, cfg.data.count, cfg.data.config_seed)?;
    let server = TeleopServer::bind((net.host.as_str(), net.port))?;
    println!("listening on {}", server.local_addr()?);
    std::io::stdout().flush()?;
    let opts = TeleopOptions {
        out,
        tick: Duration::from_millis(net.tick_ms),
        lockstep: net.lockstep,
        max_episodes,
        accept_timeout: accept_timeout.map(Duration::from_secs_f64),
        sniff: Duration::from_millis(500),
        configs,
    };
    let summary = server.serve(&world, &cfg.sim, &opts)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}
