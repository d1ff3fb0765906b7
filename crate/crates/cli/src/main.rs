use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cacc_core::controller::Policy;
use cacc_core::sim::{self, ScenarioConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cacc", version, about = "Platoon simulation with hybrid stochastic MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv, diagnostics.csv and metrics.txt.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// dhmpc, dhsmpc or dh-dhsmpc.
    #[arg(long)]
    policy: Option<Policy>,
    /// Time headway for every vehicle (s).
    #[arg(long)]
    tau: Option<f64>,
    /// Broadcast period (s).
    #[arg(long)]
    tc: Option<f64>,
    /// Packet loss probability per link and broadcast.
    #[arg(long)]
    loss: Option<f64>,
    /// Stop at the first step with a non-positive gap.
    #[arg(long)]
    halt_on_collision: bool,
}

fn load(args: &RunArgs) -> anyhow::Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::from_file(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(policy) = args.policy {
        cfg.policy = policy;
    }
    if let Some(tau) = args.tau {
        cfg.vehicle.time_gap = tau;
        for p in &mut cfg.per_vehicle {
            p.time_gap = tau;
        }
    }
    if let Some(tc) = args.tc {
        cfg.channel.period = tc;
    }
    if let Some(loss) = args.loss {
        cfg.channel.success_prob = 1.0 - loss;
    }
    cfg.halt_on_collision |= args.halt_on_collision;
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> anyhow::Result<bool> {
    let cfg = load(args)?;
    log::info!(
        "running {} vehicles, policy {}, {} s",
        cfg.vehicles,
        cfg.policy.name(),
        cfg.duration
    );
    let result = sim::run(&cfg)?;
    sim::write_outputs(&args.out, &result).with_context(|| format!("writing {}", args.out.display()))?;
    let m = &result.metrics;
    if m.budget_warnings > 0 {
        log::warn!("{} solves hit the node budget", m.budget_warnings);
    }
    print!("{}", m.to_text());
    Ok(m.collision)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match run(&args) {
            Ok(false) => ExitCode::SUCCESS,
            Ok(true) => ExitCode::from(2),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
