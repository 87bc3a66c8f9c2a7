//! Run configuration, CSV ingestion and result serialization.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bayes::{BetaPrior, McmcConfig, PosteriorDraws};
use crate::error::{Error, Result};
use crate::msm::{Dataset, Family};
use crate::nuisance::NuisanceOptions;
use crate::sim::{Method, Scenario, SimResult, ORACLE_DRAWS, ORACLE_SEED};
use crate::tmle::TmleOptions;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Estimate,
    Bayes,
    Simulate,
    Diagnose,
}

impl std::str::FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimate" => Ok(Command::Estimate),
            "bayes" => Ok(Command::Bayes),
            "simulate" => Ok(Command::Simulate),
            "diagnose" => Ok(Command::Diagnose),
            other => Err(Error::Config(format!("unknown command `{other}`"))),
        }
    }
}

/// Column roles in the input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Columns {
    pub treatment: String,
    pub outcome: String,
    /// Effect modifiers `V`, a subset of the covariates; empty fits the ATE.
    pub modifiers: Vec<String>,
    /// Covariates `X`; empty means every column other than treatment and outcome.
    pub covariates: Vec<String>,
    /// Propensity model covariates; defaults to all covariates.
    pub g_covariates: Option<Vec<String>>,
    /// Outcome model covariates; defaults to all covariates.
    pub q_covariates: Option<Vec<String>>,
}

impl Default for Columns {
    fn default() -> Self {
        Self {
            treatment: "A".into(),
            outcome: "Y".into(),
            modifiers: Vec::new(),
            covariates: Vec::new(),
            g_covariates: None,
            q_covariates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub method: Method,
    pub oracle_draws: u64,
    pub oracle_seed: u64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            scenario: Scenario::A,
            n: 1000,
            reps: 200,
            method: Method::Frequentist,
            oracle_draws: ORACLE_DRAWS,
            oracle_seed: ORACLE_SEED,
        }
    }
}

/// Everything a command needs; serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    /// Output directory; reports go to stdout when absent.
    pub out: Option<PathBuf>,
    pub family: Family,
    pub columns: Columns,
    /// Defaults to independent standard normals.
    pub prior: Option<BetaPrior>,
    pub seed: u64,
    pub level: f64,
    pub mcmc: McmcConfig,
    pub tmle: TmleOptions,
    pub nuisance: NuisanceOptions,
    pub sim: SimSettings,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Estimate,
            input: None,
            out: None,
            family: Family::Binary,
            columns: Columns::default(),
            prior: None,
            seed: 1,
            level: 0.95,
            mcmc: McmcConfig::default(),
            tmle: TmleOptions::default(),
            nuisance: NuisanceOptions::default(),
            sim: SimSettings::default(),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
            .read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Model dimension implied by the modifiers.
    pub fn dim(&self) -> usize {
        self.columns.modifiers.len() + 1
    }

    pub fn prior(&self) -> BetaPrior {
        self.prior.clone().unwrap_or_else(|| BetaPrior::standard_normal(self.dim()))
    }

    /// Checks settings that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level {} not in (0, 1)", self.level)));
        }
        if self.tmle.max_iter == 0 {
            return Err(Error::Config("tmle.max_iter must be at least 1".into()));
        }
        if let Some(t) = self.tmle.stop_tol {
            if !(t > 0.0) {
                return Err(Error::Config("tmle.stop_tol must be positive".into()));
            }
        }
        match self.command {
            Command::Estimate | Command::Bayes | Command::Diagnose => {
                if self.input.is_none() {
                    return Err(Error::Config("an input CSV is required".into()));
                }
            }
            Command::Simulate => {
                if self.sim.reps == 0 || self.sim.n < 10 {
                    return Err(Error::Config("simulate needs reps >= 1 and n >= 10".into()));
                }
            }
        }
        let bayesian = matches!(self.command, Command::Bayes | Command::Diagnose)
            || (self.command == Command::Simulate && self.sim.method != Method::Frequentist);
        if bayesian {
            if self.mcmc.iters == 0 {
                return Err(Error::Config("mcmc.iters must be at least 1".into()));
            }
            let burn = self.mcmc.burn_in();
            if burn >= self.mcmc.iters || self.mcmc.iters - burn < crate::bayes::MIN_KEPT_DRAWS {
                return Err(Error::Config(format!(
                    "mcmc.iters = {} with burn-in {burn} keeps fewer than {} draws",
                    self.mcmc.iters,
                    crate::bayes::MIN_KEPT_DRAWS
                )));
            }
            if let Some(t) = self.mcmc.tau {
                if !(t > 0.0) {
                    return Err(Error::Config("mcmc.tau must be positive".into()));
                }
            }
            self.prior().validate(if self.command == Command::Simulate { 2 } else { self.dim() })?;
        }
        Ok(())
    }
}

/// Dataset loaded from CSV with the column names it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub data: Dataset,
    /// Covariate indices used by the propensity model.
    pub g_cols: Vec<usize>,
    /// Covariate indices used by the outcome model.
    pub q_cols: Vec<usize>,
}

fn parse_cell(text: &str, row: usize, column: &str) -> Result<f64> {
    text.trim().parse::<f64>().map_err(|_| {
        Error::Parse(format!("row {row}, column `{column}`: `{text}` is not a number"))
    })
}

/// Reads a headed CSV into a [`Dataset`].
///
/// Rows are numbered from 1 after the header. Any empty cell in a used
/// column rejects the file, listing every offending row.
pub fn load_csv(path: &Path, columns: &Columns, family: Family) -> Result<LoadedData> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv(file, columns, family)
}

pub fn read_csv<R: Read>(reader: R, columns: &Columns, family: Family) -> Result<LoadedData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing column `{name}`")))
    };
    let a_idx = find(&columns.treatment)?;
    let y_idx = find(&columns.outcome)?;
    let cov_names: Vec<String> = if columns.covariates.is_empty() {
        header
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != a_idx && i != y_idx)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        columns.covariates.clone()
    };
    let cov_idx: Vec<usize> = cov_names.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let position = |name: &String, role: &str| {
        cov_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("{role} `{name}` is not a covariate")))
    };
    let v_cols: Vec<usize> = columns
        .modifiers
        .iter()
        .map(|m| position(m, "effect modifier"))
        .collect::<Result<_>>()?;
    let pick = |names: &Option<Vec<String>>, role: &str| match names {
        Some(list) => list.iter().map(|m| position(m, role)).collect::<Result<Vec<_>>>(),
        None => Ok((0..cov_names.len()).collect()),
    };
    let g_cols = pick(&columns.g_covariates, "propensity covariate")?;
    let q_cols = pick(&columns.q_covariates, "outcome covariate")?;

    let mut xs = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    let mut missing = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k + 1;
        let used = cov_idx.iter().chain([&a_idx, &y_idx]);
        if used.clone().any(|&c| record.get(c).is_none_or(str::is_empty)) {
            missing.push(row);
            continue;
        }
        let av = parse_cell(&record[a_idx], row, &columns.treatment)?;
        if av != 0.0 && av != 1.0 {
            return Err(Error::Parse(format!(
                "row {row}, column `{}`: treatment must be 0 or 1, got {av}",
                columns.treatment
            )));
        }
        let yv = parse_cell(&record[y_idx], row, &columns.outcome)?;
        if family == Family::Binary && yv != 0.0 && yv != 1.0 {
            return Err(Error::Parse(format!(
                "row {row}, column `{}`: binary outcome must be 0 or 1, got {yv}",
                columns.outcome
            )));
        }
        for (&c, name) in cov_idx.iter().zip(&cov_names) {
            xs.push(parse_cell(&record[c], row, name)?);
        }
        a.push(av as u8);
        y.push(yv);
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(usize::to_string).collect();
        return Err(Error::Parse(format!("missing values in rows {}", list.join(", "))));
    }
    if a.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    let x = DMatrix::from_row_slice(a.len(), cov_names.len(), &xs);
    let data = Dataset::with_names(x, a, y, v_cols, family, cov_names)?;
    Ok(LoadedData { data, g_cols, q_cols })
}

/// Writes covariates, then treatment `A` and outcome `Y`, with a header.
/// Values are printed in shortest round-trip form.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = data.names.clone();
    header.push("A".into());
    header.push("Y".into());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = (0..data.x.ncols()).map(|j| data.x[(i, j)].to_string()).collect();
        rec.push(data.a[i].to_string());
        rec.push(data.y[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    write_csv(data, File::create(path)?)
}

/// Posterior draws as `iter,accepted,eps_1..eps_p,beta_1..beta_p`.
pub fn write_draws<W: Write>(draws: &PosteriorDraws, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = draws.eps.ncols();
    let mut header = vec!["iter".to_string(), "accepted".to_string()];
    header.extend((1..=p).map(|j| format!("eps_{j}")));
    header.extend((1..=draws.beta.ncols()).map(|j| format!("beta_{j}")));
    w.write_record(&header)?;
    for t in 0..draws.len() {
        let mut rec = vec![(t + 1).to_string(), u8::from(draws.accepted[t]).to_string()];
        rec.extend(draws.eps.row(t).iter().map(f64::to_string));
        rec.extend(draws.beta.row(t).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Diagnostic pairs as `t,eps_1..eps_p,beta_1..beta_p`.
pub fn write_diagnostic<W: Write>(eps: &DMatrix<f64>, beta: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend((1..=eps.ncols()).map(|j| format!("eps_{j}")));
    header.extend((1..=beta.ncols()).map(|j| format!("beta_{j}")));
    w.write_record(&header)?;
    for t in 0..eps.nrows() {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend(eps.row(t).iter().map(f64::to_string));
        rec.extend(beta.row(t).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per estimator:
/// `scenario,n,estimator,coverage_b1,bias_b1,coverage_b2,bias_b2`.
pub fn write_sim_table<W: Write>(results: &[SimResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario", "n", "estimator", "coverage_b1", "bias_b1", "coverage_b2", "bias_b2"])?;
    for r in results {
        for (label, s) in [("frequentist", &r.frequentist), ("bayesian", &r.bayesian)] {
            if let Some(s) = s {
                w.write_record([
                    r.scenario.to_string(),
                    r.n.to_string(),
                    label.to_string(),
                    s.coverage[0].to_string(),
                    s.bias[0].to_string(),
                    s.coverage[1].to_string(),
                    s.bias[1].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesReport {
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub prob_positive: Vec<f64>,
    pub acceptance_ratio: f64,
    pub tau: f64,
    pub iters: usize,
    pub burn_in: usize,
    pub plateau_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultReport {
    pub schema_version: u32,
    pub command: Command,
    pub n: usize,
    pub family: Family,
    /// `intercept` followed by the effect-modifier names.
    pub coefficients: Vec<String>,
    pub beta_star: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub level: f64,
    pub eif_mean_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub bayes: Option<BayesReport>,
}

impl ResultReport {
    /// Rejects non-finite numbers.
    pub fn check_finite(&self) -> Result<()> {
        let mut all: Vec<f64> = [
            &self.beta_star,
            &self.std_errors,
            &self.ci_lower,
            &self.ci_upper,
        ]
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect();
        all.extend([self.level, self.eif_mean_norm]);
        if let Some(b) = &self.bayes {
            all.extend(b.median.iter().chain(&b.lower).chain(&b.upper).chain(&b.prob_positive));
            all.extend([b.acceptance_ratio, b.tau]);
        }
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("report contains a non-finite value".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Machine-readable error payload.
pub fn error_json(err: &Error) -> String {
    serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "error": { "code": err.code(), "message": err.to_string() }
    })
    .to_string()
}
