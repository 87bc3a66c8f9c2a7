use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use targeted_msm::commands::execute;
use targeted_msm::io::{error_json, Command, RunConfig};
use targeted_msm::msm::Family;
use targeted_msm::sim::{Method, Scenario};
use targeted_msm::Error;

/// Targeted estimation of marginal structural model parameters.
#[derive(Parser, Debug)]
#[command(name = "targeted-msm", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Frequentist targeted estimate with Wald intervals.
    Estimate(Common),
    /// Targeted posterior via random-walk Metropolis.
    Bayes(Common),
    /// Run a simulation scenario against the oracle truth.
    Simulate(Common),
    /// Export (t, eps, beta) draws with the plateau flag.
    Diagnose(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory; the report goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["binary", "continuous"])]
    family: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_parser = ["a", "b", "c", "d"])]
    scenario: Option<String>,
    #[arg(long, value_parser = ["frequentist", "bayesian", "both"])]
    method: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// Treatment column name.
    #[arg(long)]
    treatment: Option<String>,
    /// Outcome column name.
    #[arg(long)]
    outcome: Option<String>,
    /// Comma-separated effect modifiers; omit for the ATE.
    #[arg(long, value_delimiter = ',')]
    modifiers: Option<Vec<String>>,
    /// Comma-separated covariates; defaults to all other columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Interval level.
    #[arg(long)]
    level: Option<f64>,
}

fn build_config(command: Command, c: Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.command = command;
    if let Some(v) = c.input {
        cfg.input = Some(v);
    }
    if let Some(v) = c.out {
        cfg.out = Some(v);
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.family {
        cfg.family = v.parse::<Family>()?;
    }
    if let Some(v) = c.reps {
        cfg.sim.reps = v;
    }
    if let Some(v) = c.n {
        cfg.sim.n = v;
    }
    if let Some(v) = c.scenario {
        cfg.sim.scenario = v.parse::<Scenario>()?;
    }
    if let Some(v) = c.method {
        cfg.sim.method = v.parse::<Method>()?;
    }
    if let Some(v) = c.iters {
        cfg.mcmc.iters = v;
    }
    if let Some(v) = c.burn_in {
        cfg.mcmc.burn_in = Some(v);
    }
    if let Some(v) = c.treatment {
        cfg.columns.treatment = v;
    }
    if let Some(v) = c.outcome {
        cfg.columns.outcome = v;
    }
    if let Some(v) = c.modifiers {
        cfg.columns.modifiers = v.into_iter().filter(|s| !s.is_empty()).collect();
    }
    if let Some(v) = c.covariates {
        cfg.columns.covariates = v.into_iter().filter(|s| !s.is_empty()).collect();
    }
    if let Some(v) = c.level {
        cfg.level = v;
    }
    Ok(cfg)
}

fn run(command: Command, common: Common) -> Result<(), Error> {
    let cfg = build_config(command, common)?;
    let output = execute(&cfg)?;
    match &cfg.out {
        Some(dir) => {
            for path in output.write_to(dir)? {
                log::info!("wrote {}", path.display());
            }
        }
        None => println!("{}", output.main_json()?),
    }
    Ok(())
}

/// 2 for bad input or configuration, 1 for estimation failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::Io(_) | Error::InvalidInput(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Estimate(c) => (Command::Estimate, c),
        Cmd::Bayes(c) => (Command::Bayes, c),
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Diagnose(c) => (Command::Diagnose, c),
    };
    match run(command, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
