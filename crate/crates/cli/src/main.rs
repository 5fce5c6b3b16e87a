//! `cbmpc` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cbmpc::environments::EnvironmentKind;
use cbmpc::harness::{PlannerKind, ReferenceMode};
use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "cbmpc", version, about = "Multi-robot receding-horizon planning benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop episode and write its CSV trace and JSON summary.
    Run(RunArgs),
    /// Run randomized trials over planners and robot counts and aggregate them.
    Batch(BatchArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_with::<EnvironmentKind>)]
    env: Option<EnvironmentKind>,
    /// JSON scenario file used instead of a generated environment.
    #[arg(long)]
    scenario_file: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// cbs, goal or none (same as goal).
    #[arg(long, value_parser = parse_with::<ReferenceMode>)]
    reference: Option<ReferenceMode>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_parser = parse_with::<PlannerKind>)]
    planner: Option<PlannerKind>,
    /// Robot count for the cluttered generator.
    #[arg(long)]
    robots: Option<usize>,
}

#[derive(Args)]
struct BatchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated planners.
    #[arg(long, value_delimiter = ',', value_parser = parse_with::<PlannerKind>)]
    planner: Option<Vec<PlannerKind>>,
    /// Comma-separated robot counts.
    #[arg(long, value_delimiter = ',')]
    robots: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_with<T: std::str::FromStr<Err = cbmpc::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: cbmpc::Error| e.to_string())
}

fn apply_common(args: &CommonArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(env) = args.env {
        cfg.env = env;
    }
    if let Some(path) = &args.scenario_file {
        cfg.scenario_file = Some(path.clone());
    }
    if let Some(h) = args.horizon {
        cfg.mpc.horizon = h;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(r) = args.reference {
        cfg.reference = Some(r);
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn resolve_run(args: &RunArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = apply_common(&args.common)?;
    if let Some(p) = args.planner {
        cfg.planner = p;
    }
    if let Some(r) = args.robots {
        cfg.robots = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_batch(args: &BatchArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = apply_common(&args.common)?;
    if cfg.scenario_file.is_some() {
        return Err(ConfigError::Invalid("batch runs use generated environments only".into()));
    }
    if let Some(p) = &args.planner {
        cfg.batch.planners = p.clone();
    }
    if let Some(r) = &args.robots {
        cfg.batch.robot_counts = r.clone();
    }
    if let Some(t) = args.trials {
        cfg.batch.trials = t;
    }
    if let Some(w) = args.workers {
        cfg.batch.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let resolved = match &cli.command {
        Command::Run(args) => resolve_run(args),
        Command::Batch(args) => resolve_batch(args),
    };
    let cfg = match resolved {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(commands::EXIT_CONFIG);
        }
    };
    let print_only = match &cli.command {
        Command::Run(args) => args.common.print_config,
        Command::Batch(args) => args.common.print_config,
    };
    if print_only {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }
    let status = match cli.command {
        Command::Run(_) => commands::run(&cfg),
        Command::Batch(_) => commands::batch(&cfg),
    };
    ExitCode::from(status)
}
