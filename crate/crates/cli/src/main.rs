use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecotube_core::env::Scenario;
use ecotube_core::harness::{self, Method, RunConfig};
use ecotube_core::{Error, Result};

/// Safe eco-driving with a tube-MPC certified TD3 agent.
#[derive(Debug, Parser)]
#[command(name = "ecotube", version)]
struct Cli {
    /// TOML run configuration; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for every emitted artifact.
    #[arg(long, global = true, env = "ECOTUBE_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Traffic scenario: A (HDV behind PV), B (CAV, no HDV feedback), C (full).
    #[arg(long, global = true)]
    scenario: Option<Scenario>,
    /// 5000 episodes and horizon 50 instead of the desk defaults.
    #[arg(long, global = true)]
    full_scale: bool,
    /// MPC horizon override.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct MethodArg {
    /// rmpc-only, raw-rl or safe-rl.
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent and write the log and checkpoints.
    Train {
        #[command(flatten)]
        method: MethodArg,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the preference sweep for one method.
    Evaluate {
        #[command(flatten)]
        method: MethodArg,
        /// Checkpoint to load; defaults to the one written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        preferences: Option<usize>,
        #[arg(long)]
        seeds_per_preference: Option<usize>,
    },
    /// Evaluate all methods and scenarios on the same sweep.
    Compare {
        #[arg(long)]
        preferences: Option<usize>,
        #[arg(long)]
        seeds_per_preference: Option<usize>,
    },
    /// Fit headway preferences from trajectory CSVs (t, v_leader, v_follower, gap).
    Calibrate {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write the precomputed safety sets and gains.
    MrpiReport,
    /// Write figure-ready CSVs from existing artifacts.
    PlotData,
    /// Print the resolved configuration as TOML.
    Config,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.full_scale {
        cfg = cfg.full_scale();
    }
    if let Some(s) = cli.scenario {
        cfg = cfg.with_scenario(s);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(h) = cli.horizon {
        cfg.rmpc.horizon = h;
    }
    if let Some(d) = &cli.output_dir {
        cfg.paths.output_dir = Some(d.clone());
    }
    let sweep = |cfg: &mut RunConfig, p: Option<usize>, s: Option<usize>| {
        if let Some(p) = p {
            cfg.eval.preferences = p;
        }
        if let Some(s) = s {
            cfg.eval.seeds_per_preference = s;
        }
    };
    match &cli.command {
        Command::Train { method, episodes } => {
            if let Some(m) = method.method {
                cfg.method = m;
            }
            if let Some(e) = episodes {
                cfg.episodes = *e;
            }
        }
        Command::Evaluate {
            method,
            preferences,
            seeds_per_preference,
            ..
        } => {
            if let Some(m) = method.method {
                cfg.method = m;
            }
            sweep(&mut cfg, *preferences, *seeds_per_preference);
        }
        Command::Compare {
            preferences,
            seeds_per_preference,
        } => sweep(&mut cfg, *preferences, *seeds_per_preference),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Train { .. } => {
            let out = harness::cmd_train(&cfg)?;
            let collisions: usize = out.log.iter().map(|r| r.collisions).sum();
            let last = out.log.last().map(|r| r.ret).unwrap_or(f64::NAN);
            println!(
                "trained {} episodes ({} collisions, final return {last:.2}, gradient check {:.2e})",
                out.log.len(),
                collisions,
                out.gradient_error
            );
        }
        Command::Evaluate { checkpoint, .. } => {
            let (_, summary) = harness::cmd_evaluate(&cfg, checkpoint.as_deref())?;
            print_json(&summary)?;
        }
        Command::Compare { .. } => print_json(&harness::cmd_compare(&cfg)?)?,
        Command::Calibrate { out, inputs } => {
            let report = harness::cmd_calibrate(&cfg, inputs, out)?;
            println!(
                "{} of {} trajectories calibrated, {} rows skipped, distribution written to {}",
                report.cases.len(),
                inputs.len(),
                report.skipped_rows,
                out.display()
            );
        }
        Command::MrpiReport => print_json(&harness::cmd_mrpi_report(&cfg)?)?,
        Command::PlotData => {
            let f = harness::cmd_plot_data(&cfg)?;
            for p in [&f.velocity, &f.inputs, &f.tube, &f.rewards, &f.energy_hist] {
                println!("{}", p.display());
            }
        }
        Command::Config => print!("{}", cfg.to_toml_string()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(0, 255) as u8
}
