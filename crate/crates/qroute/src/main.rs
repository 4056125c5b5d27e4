use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qroute::checkpoint::Checkpoint;
use qroute::config::{Config, HeadName};
use qroute::{commands, metrics, plot, Error, Result};

/// Quantum-attention REINFORCE agent for split-delivery vehicle routing.
#[derive(Parser)]
#[command(name = "qroute", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `policy.head_type`.
    #[arg(long, global = true)]
    head: Option<HeadName>,
    /// `dotted.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sample,
    Greedy,
}

#[derive(Subcommand)]
enum Command {
    /// Write random instances as CSV files.
    Generate {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy, writing metrics and checkpoints.
    Train {
        /// Run directory; defaults to `paths.out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint using its config echo.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll out a checkpoint on instance files and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Instance files or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        instances: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the route and cost of one instance.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
    },
    /// Export the attention circuits as device call files plus a manifest.
    PlanHw {
        #[arg(long)]
        out: PathBuf,
        /// Take angles from this checkpoint instead of a fresh policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Plan this instance instead of a generated one.
        #[arg(long)]
        instance: Option<PathBuf>,
    },
    /// Tidy long-format CSV of a run directory's metrics.
    ExportMetrics {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG learning curve from a metrics CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(head) = common.head {
        let name = match head {
            HeadName::Quantum => "quantum",
            HeadName::Classical => "classical",
        };
        overrides.push(format!("policy.head_type=\"{name}\""));
    }
    Config::load(common.config.as_deref(), &overrides)
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|source| Error::Io { path: p.clone(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Generate { count, out } => {
            let cfg = load_config(common)?;
            for p in commands::generate(&cfg, *count, out)? {
                println!("{}", p.display());
            }
        }
        Command::Train { out, resume } => {
            let cfg = load_config(common)?;
            let resume = match resume {
                Some(p) => {
                    let mut ckpt = Checkpoint::load(p)?;
                    // explicit overrides still apply, e.g. a longer schedule
                    let echo = ckpt.config.to_toml();
                    ckpt.config = Config::from_toml(&echo, &common.set)?;
                    Some(ckpt)
                }
                None => None,
            };
            let dir = out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.out));
            let epochs = commands::train(&cfg, &dir, resume.as_ref())?;
            if let Some(m) = epochs.last() {
                println!("epoch {} mean_cost {} dir {}", m.epoch, m.mean_cost, dir.display());
            }
        }
        Command::Eval {
            checkpoint,
            instances,
            mode,
            out,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let seed = common.seed.unwrap_or(ckpt.config.seed);
            let report = commands::eval(&ckpt, instances, matches!(mode, Mode::Greedy), seed)?;
            emit(out.as_ref(), &report)?;
        }
        Command::Rollout {
            checkpoint,
            instance,
            mode,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let seed = common.seed.unwrap_or(ckpt.config.seed);
            print!("{}", commands::rollout(&ckpt, instance, matches!(mode, Mode::Greedy), seed)?);
        }
        Command::PlanHw {
            out,
            checkpoint,
            instance,
        } => {
            let ckpt = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let cfg = match &ckpt {
                // circuits follow the checkpoint's architecture
                Some(c) => Config {
                    policy: c.config.policy.clone(),
                    ..load_config(common)?
                },
                None => load_config(common)?,
            };
            let plan = commands::plan_hw(&cfg, ckpt.as_ref(), instance.as_deref(), out)?;
            println!(
                "circuits {} basis_runs {} calls {} dir {}",
                plan.circuit_count,
                plan.basis_run_count,
                plan.call_count,
                out.display()
            );
        }
        Command::ExportMetrics { run, out } => emit(out.as_ref(), &metrics::export_tidy(run)?)?,
        Command::Plot { metrics: path, out } => {
            let svg = plot::learning_curve_svg(&metrics::read_metrics(path)?)?;
            std::fs::write(out, svg).map_err(|source| Error::Io { path: out.clone(), source })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QROUTE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = serde_json::to_string(&e.to_string()).expect("string serialises");
            eprintln!("error kind={} message={message}", e.kind());
            ExitCode::from(if e.kind() == "config" || e.kind() == "usage" { 2 } else { 1 })
        }
    }
}
