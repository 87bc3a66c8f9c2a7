//! The `estimate`, `bayes`, `simulate` and `diagnose` commands.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::bayes::{diagnostic_export, run_chain, BayesRun, Diagnostic, TargetedLikelihood, TargetedPosterior};
use crate::error::{Error, Result};
use crate::io::{
    load_csv, write_diagnostic, write_draws, write_sim_table, BayesReport, Command, LoadedData, ResultReport,
    RunConfig, SCHEMA_VERSION,
};
use crate::msm::{LinearModel, MsmSpec, SquaredError};
use crate::nuisance::make_nuisance;
use crate::sim::{run_scenario, true_beta_oracle, SimConfig, SimResult};
use crate::tmle::{target, wald_ci, TargetedFit};

pub const REPORT_FILE: &str = "report.json";
pub const DRAWS_FILE: &str = "draws.csv";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.csv";
pub const SIM_TABLE_FILE: &str = "simulation.csv";
pub const SIM_JSON_FILE: &str = "simulation.json";

/// Result of one command.
#[derive(Debug, Clone)]
pub enum RunOutput {
    Estimate(ResultReport),
    Bayes {
        report: ResultReport,
        run: BayesRun,
    },
    Diagnose {
        report: ResultReport,
        diagnostic: Diagnostic,
    },
    Simulate(SimResult),
}

impl RunOutput {
    /// The JSON document printed or saved as the main report.
    pub fn main_json(&self) -> Result<String> {
        match self {
            RunOutput::Estimate(r) | RunOutput::Bayes { report: r, .. } | RunOutput::Diagnose { report: r, .. } => {
                r.to_json()
            }
            RunOutput::Simulate(s) => Ok(serde_json::to_string_pretty(&serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "simulation": s,
            }))?),
        }
    }

    /// Writes every artifact into `dir`, returning the paths written.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let main = match self {
            RunOutput::Simulate(_) => dir.join(SIM_JSON_FILE),
            _ => dir.join(REPORT_FILE),
        };
        fs::write(&main, self.main_json()?)?;
        written.push(main);
        match self {
            RunOutput::Estimate(_) => {}
            RunOutput::Bayes { run, .. } => {
                let path = dir.join(DRAWS_FILE);
                write_draws(&run.draws, File::create(&path)?)?;
                written.push(path);
            }
            RunOutput::Diagnose { diagnostic, .. } => {
                let path = dir.join(DIAGNOSTIC_FILE);
                write_diagnostic(&diagnostic.eps, &diagnostic.beta, File::create(&path)?)?;
                written.push(path);
            }
            RunOutput::Simulate(s) => {
                let path = dir.join(SIM_TABLE_FILE);
                write_sim_table(std::slice::from_ref(s), File::create(&path)?)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

/// Validates `cfg` and runs its command.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.command {
        Command::Estimate => estimate(cfg).map(RunOutput::Estimate),
        Command::Bayes => bayes(cfg).map(|(report, run)| RunOutput::Bayes { report, run }),
        Command::Diagnose => diagnose(cfg).map(|(report, diagnostic)| RunOutput::Diagnose { report, diagnostic }),
        Command::Simulate => simulate(cfg).map(RunOutput::Simulate),
    }
}

struct Prepared {
    loaded: LoadedData,
    spec: MsmSpec<LinearModel, SquaredError>,
    fit: TargetedFit,
    nuisance: crate::nuisance::NuisanceFit,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let input = cfg
        .input
        .as_deref()
        .ok_or_else(|| Error::Config("an input CSV is required".into()))?;
    let loaded = load_csv(input, &cfg.columns, cfg.family)?;
    let spec = MsmSpec::linear(loaded.data.v_cols.len());
    let nuisance = make_nuisance(&loaded.data, &loaded.g_cols, &loaded.q_cols, &cfg.nuisance)?;
    let fit = target(&loaded.data, &spec, &nuisance, &cfg.tmle)?;
    Ok(Prepared {
        loaded,
        spec,
        fit,
        nuisance,
    })
}

fn frequentist_report(cfg: &RunConfig, p: &Prepared) -> Result<ResultReport> {
    let ci = wald_ci(&p.fit, cfg.level);
    let mut coefficients = vec!["intercept".to_string()];
    coefficients.extend(p.loaded.data.v_cols.iter().map(|&c| p.loaded.data.names[c].clone()));
    let report = ResultReport {
        schema_version: SCHEMA_VERSION,
        command: cfg.command,
        n: p.loaded.data.n(),
        family: cfg.family,
        coefficients,
        beta_star: p.fit.beta_star.iter().copied().collect(),
        std_errors: p.fit.std_errors(),
        ci_lower: ci.iter().map(|c| c.0).collect(),
        ci_upper: ci.iter().map(|c| c.1).collect(),
        level: cfg.level,
        eif_mean_norm: p.fit.eif_mean_norm,
        iterations: p.fit.iterations,
        converged: p.fit.converged,
        bayes: None,
    };
    report.check_finite()?;
    Ok(report)
}

pub fn estimate(cfg: &RunConfig) -> Result<ResultReport> {
    frequentist_report(cfg, &prepare(cfg)?)
}

fn sample(cfg: &RunConfig, p: &Prepared) -> Result<BayesRun> {
    let posterior = TargetedPosterior {
        likelihood: TargetedLikelihood::new(&p.loaded.data, &p.spec, &p.nuisance, &p.fit)?,
        prior: cfg.prior(),
    };
    posterior.prior.validate(p.spec.dim())?;
    let mut mcmc = cfg.mcmc.clone();
    mcmc.seed = cfg.seed;
    mcmc.level = cfg.level;
    run_chain(&posterior, &mcmc)
}

fn bayes_report(mut report: ResultReport, cfg: &RunConfig, run: &BayesRun, plateau: bool) -> Result<ResultReport> {
    let c = &run.summary.coords;
    report.bayes = Some(BayesReport {
        median: c.iter().map(|s| s.median).collect(),
        lower: c.iter().map(|s| s.lower).collect(),
        upper: c.iter().map(|s| s.upper).collect(),
        prob_positive: c.iter().map(|s| s.prob_positive).collect(),
        acceptance_ratio: run.draws.acceptance_ratio,
        tau: run.draws.tau,
        iters: cfg.mcmc.iters,
        burn_in: run.summary.burn_in,
        plateau_flag: plateau,
    });
    report.check_finite()?;
    Ok(report)
}

pub fn bayes(cfg: &RunConfig) -> Result<(ResultReport, BayesRun)> {
    let p = prepare(cfg)?;
    let run = sample(cfg, &p)?;
    let plateau = diagnostic_export(&run.draws).flagged;
    let report = bayes_report(frequentist_report(cfg, &p)?, cfg, &run, plateau)?;
    Ok((report, run))
}

/// Samples, then exports `(t, eps_t, beta_t)` with the plateau flag.
pub fn diagnose(cfg: &RunConfig) -> Result<(ResultReport, Diagnostic)> {
    let p = prepare(cfg)?;
    let run = sample(cfg, &p)?;
    let diagnostic = diagnostic_export(&run.draws);
    if diagnostic.flagged {
        log::warn!("beta draws plateau in a tail while eps still moves; the map eps -> beta may be bounded");
    }
    let report = bayes_report(frequentist_report(cfg, &p)?, cfg, &run, diagnostic.flagged)?;
    Ok((report, diagnostic))
}

pub fn simulate(cfg: &RunConfig) -> Result<SimResult> {
    let s = &cfg.sim;
    let sim = SimConfig {
        scenario: s.scenario,
        n: s.n,
        reps: s.reps,
        method: s.method,
        seed: cfg.seed,
        level: cfg.level,
        mcmc: cfg.mcmc.clone(),
        tmle: cfg.tmle,
        nuisance: cfg.nuisance,
        prior: cfg.prior.clone().unwrap_or_else(|| crate::bayes::BetaPrior::standard_normal(2)),
        threads: cfg.threads,
    };
    let oracle = true_beta_oracle(s.oracle_draws, s.oracle_seed);
    log::info!("true beta {:?} (se {:?}, {} draws)", oracle.beta, oracle.se, oracle.draws);
    run_scenario(&sim, oracle.beta)
}
