//! Library behind the `sipml` binary.
//!
//! Each `cmd_*` function returns the artifact it would write plus a [`Status`];
//! [`run`] serializes the artifact and maps the outcome to an exit code.

pub mod args;
pub mod input;
mod output;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sipml::estimation::psi_cv_profile;
use sipml::family::R_MIN;
use sipml::gof::gof_report;
use sipml::inference::{link_band_points, BandwidthDiagnostics};
use sipml::kernel::SortedIndex;
use sipml::simulation::{run_replications, summarize, StartPolicy};
use sipml::{
    bandwidth_diagnostics, fit, sandwich_from_fit, Dataset, Estimator, Family, FitConfig,
    FitResult, GofReport, McSummary, SimConfig,
};

pub use args::{
    Cli, Command, Dgp, FitArgs, Format, GofArgs, OutputArgs, PredictArgs, SimulateArgs,
};
pub use output::{render, Render};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A failure that prevents any artifact from being written (exit code 1).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
}

impl From<sipml::Error> for CliError {
    fn from(e: sipml::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

/// Whether an artifact comes with a numeric or convergence warning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Warning,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::Warning => 2,
        }
    }
}

/// Every option that shaped a run, echoed into its artifact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub input: Option<PathBuf>,
    pub fit_artifact: Option<PathBuf>,
    pub family: Option<String>,
    pub trim_c: Option<f64>,
    pub h_lo: Option<f64>,
    pub h_hi: Option<f64>,
    pub h_grid: Option<usize>,
    pub d_n: Option<f64>,
    pub pilot_h: Option<f64>,
    pub rho: Option<f64>,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub format: Option<Format>,
    pub standardize: bool,
    pub cells: Option<Vec<u64>>,
    pub level: Option<f64>,
    pub index_input: bool,
    pub dgp: Option<Dgp>,
    pub n: Option<usize>,
    pub replications: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub start: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub run_config: RunConfig,
}

impl Meta {
    fn new(run_config: RunConfig) -> Self {
        Self {
            tool: "sipml".into(),
            version: VERSION.into(),
            seed: run_config.seed,
            run_config,
        }
    }
}

/// Column centering and scaling applied before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    fn from_rows(rows: &[Vec<f64>]) -> Result<Self, CliError> {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let means: Vec<f64> = (0..d)
            .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
            .collect();
        let sds: Vec<f64> = (0..d)
            .map(|k| {
                (rows.iter().map(|r| (r[k] - means[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            })
            .collect();
        if let Some(k) = sds.iter().position(|s| !(*s > 0.0)) {
            return Err(CliError::Input(format!(
                "covariate {} is constant and cannot be standardized",
                k + 1
            )));
        }
        Ok(Self { means, sds })
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Direction on the raw covariate scale, renormalized to a unit first component.
    fn to_original(&self, theta: &[f64]) -> Vec<f64> {
        let lead = theta[0] / self.sds[0];
        theta
            .iter()
            .zip(&self.sds)
            .map(|(t, s)| (t / s) / lead)
            .collect()
    }
}

/// Training data kept in the fit artifact so `gof` and `predict` can rebuild the smoother.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Training {
    pub response: String,
    pub covariates: Vec<String>,
    pub y: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub family: Family,
    pub variance_family: Family,
    pub n: usize,
    /// full direction with the pinned first component
    pub theta: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub vcov: Option<Vec<Vec<f64>>>,
    pub bound_k: Option<Vec<Vec<f64>>>,
    pub theta_original_scale: Option<Vec<f64>>,
    pub std_errors_original_scale: Option<Vec<f64>>,
    pub h_hat: f64,
    pub alpha_tilde: f64,
    pub objective: f64,
    pub pilot_h: f64,
    pub trim_c: f64,
    pub h_lo: f64,
    pub h_hi: f64,
    pub d_n: f64,
    pub trimmed: usize,
    pub clamped: usize,
    pub degenerate: usize,
    pub converged: bool,
    pub optimizer_converged: bool,
    pub flat_surface: bool,
    pub bandwidth: Option<BandwidthDiagnostics>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub h: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    #[serde(flatten)]
    pub meta: Meta,
    pub status: Status,
    pub summary: FitSummary,
    pub psi_cv_profile: Vec<ProfilePoint>,
    pub standardization: Option<Standardization>,
    pub fit: FitResult,
    pub training: Training,
}

impl FitArtifact {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Input(format!("cannot read fit artifact {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{} is not a fit artifact: {e}", path.display())))
    }

    /// The (possibly standardized) dataset the fit was computed on.
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let rows: Vec<Vec<f64>> = match &self.standardization {
            Some(s) => self.training.z.iter().map(|r| s.apply(r)).collect(),
            None => self.training.z.clone(),
        };
        Ok(Dataset::from_rows(self.training.y.clone(), &rows)?)
    }
}

fn parse_family(id: &str) -> Result<Family, CliError> {
    id.parse::<Family>().map_err(|_| {
        let ids: Vec<&str> = Family::ALL.iter().map(|f| f.id()).collect();
        CliError::Input(format!(
            "unknown family '{id}'; expected one of {}",
            ids.join(", ")
        ))
    })
}

fn check_positive(name: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(CliError::Input(format!(
            "--{name} must be positive, got {x}"
        ))),
        _ => Ok(()),
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<(FitArtifact, Status), CliError> {
    let family = parse_family(&args.family)?;
    check_positive("trim-c", args.trim_c)?;
    check_positive("h-lo", args.h_lo)?;
    check_positive("h-hi", args.h_hi)?;
    check_positive("pilot-h", args.pilot_h)?;
    if let (Some(lo), Some(hi)) = (args.h_lo, args.h_hi) {
        if lo > hi {
            return Err(CliError::Input(format!("--h-lo {lo} exceeds --h-hi {hi}")));
        }
    }
    if args.h_grid == 0 {
        return Err(CliError::Input("--h-grid must be at least 1".into()));
    }
    if let Some(d) = args.d_n {
        if !(d >= 0.0) {
            return Err(CliError::Input("--d-n must be nonnegative".into()));
        }
    }

    let table = input::read_table(&args.data)?;
    if table.header.len() < 3 {
        return Err(CliError::Input(
            "need a response column and at least two covariates".into(),
        ));
    }
    let d = table.header.len() - 1;
    if table.rows.len() < d + 5 {
        return Err(CliError::Input(format!(
            "need at least {} rows, got {}",
            d + 5,
            table.rows.len()
        )));
    }
    let y = table.column(0);
    let raw: Vec<Vec<f64>> = table.rows.iter().map(|r| r[1..].to_vec()).collect();
    let standardization = if args.standardize {
        Some(Standardization::from_rows(&raw)?)
    } else {
        None
    };
    let rows: Vec<Vec<f64>> = match &standardization {
        Some(s) => raw.iter().map(|r| s.apply(r)).collect(),
        None => raw.clone(),
    };
    let data = Dataset::from_rows(y.clone(), &rows)?;

    let mut cfg = FitConfig::new(family);
    cfg.trim_c = args.trim_c;
    cfg.h_lo = args.h_lo;
    cfg.h_hi = args.h_hi;
    cfg.h_grid_size = args.h_grid;
    cfg.d_n = args.d_n;
    cfg.pilot_h = args.pilot_h;
    cfg.rho = args.rho;
    cfg.seed = args.seed;
    let result = fit(&data, &cfg)?;

    let mut warnings = result.warnings.clone();
    let mut status = if result.converged {
        Status::Ok
    } else {
        Status::Warning
    };
    if !result.optimizer_converged {
        warnings.push("step 2 optimizer did not converge".into());
    }
    let vcov = match sandwich_from_fit(&data, &result) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("no standard errors: {e}"));
            status = Status::Warning;
            None
        }
    };
    let bandwidth = match bandwidth_diagnostics(&data, &result) {
        Ok(b) => {
            if !b.informative {
                warnings.push("bandwidth constants are not informative".into());
            }
            Some(b)
        }
        Err(e) => {
            warnings.push(format!("no bandwidth diagnostics: {e}"));
            None
        }
    };
    let profile = psi_cv_profile(
        &data,
        &result.theta_hat,
        &result.criterion(),
        &result.domain,
        &result.trim_mask,
    )?
    .into_iter()
    .map(|(h, objective)| ProfilePoint { h, objective })
    .collect();

    let theta = result.theta_hat.full();
    let (theta_original_scale, std_errors_original_scale) = match &standardization {
        Some(s) => {
            let orig = s.to_original(&theta);
            let se = vcov.as_ref().map(|v| {
                v.std_errors
                    .iter()
                    .enumerate()
                    .map(|(k, se)| se * s.sds[0] / s.sds[k + 1])
                    .collect()
            });
            (Some(orig), se)
        }
        None => (None, None),
    };
    let summary = FitSummary {
        family,
        variance_family: result.variance_family,
        n: data.n(),
        theta,
        std_errors: vcov.as_ref().map(|v| v.std_errors.clone()),
        vcov: vcov.as_ref().map(|v| v.vcov.clone()),
        bound_k: vcov.as_ref().and_then(|v| v.bound_k.clone()),
        theta_original_scale,
        std_errors_original_scale,
        h_hat: result.h_hat,
        alpha_tilde: result.alpha_tilde.alpha,
        objective: result.objective,
        pilot_h: result.pilot_h,
        trim_c: result.trim_c,
        h_lo: result.domain.h_lo,
        h_hi: result.domain.h_hi,
        d_n: result.domain.d_n,
        trimmed: result.trimmed_count(),
        clamped: result.clamp_count,
        degenerate: result.degenerate_count,
        converged: result.converged,
        optimizer_converged: result.optimizer_converged,
        flat_surface: result.flat_surface,
        bandwidth,
        warnings,
    };
    let run_config = RunConfig {
        subcommand: "fit".into(),
        input: Some(args.data.clone()),
        family: Some(family.id().into()),
        trim_c: args.trim_c,
        h_lo: args.h_lo,
        h_hi: args.h_hi,
        h_grid: Some(args.h_grid),
        d_n: args.d_n,
        pilot_h: args.pilot_h,
        rho: Some(args.rho),
        seed: args.seed,
        jobs: Some(args.jobs),
        format: Some(args.output.format),
        standardize: args.standardize,
        ..RunConfig::default()
    };
    let artifact = FitArtifact {
        meta: Meta::new(run_config),
        status,
        summary,
        psi_cv_profile: profile,
        standardization,
        fit: result,
        training: Training {
            response: table.header[0].clone(),
            covariates: table.header[1..].to_vec(),
            y,
            z: raw,
        },
    };
    Ok((artifact, status))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateArtifact {
    #[serde(flatten)]
    pub meta: Meta,
    pub status: Status,
    pub summary: McSummary,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(SimulateArtifact, Status), CliError> {
    let estimators = args
        .estimators
        .iter()
        .map(|s| s.trim().parse::<Estimator>())
        .collect::<Result<Vec<_>, _>>()?;
    if estimators.is_empty() {
        return Err(CliError::Input("no estimators requested".into()));
    }
    let start: StartPolicy = args.start.parse()?;
    if args.jobs == 0 {
        return Err(CliError::Input("--jobs must be at least 1".into()));
    }
    let mut config = match args.dgp {
        Dgp::Table1 => SimConfig::table1(args.n, args.replications, args.seed),
        Dgp::Table2 => SimConfig::table2(args.n, args.replications, args.seed),
    };
    config.start = start;
    let outcomes = run_replications(&config, &estimators, args.jobs)?;
    let summary = summarize(&config, &estimators, &outcomes);
    let status = if summary.exceeded_failure_budget {
        Status::Warning
    } else {
        Status::Ok
    };
    let run_config = RunConfig {
        subcommand: "simulate".into(),
        seed: args.seed,
        jobs: Some(args.jobs),
        format: Some(args.output.format),
        dgp: Some(args.dgp),
        n: Some(args.n),
        replications: Some(args.replications),
        estimators: Some(estimators.iter().map(|e| e.id().to_string()).collect()),
        start: Some(args.start.clone()),
        ..RunConfig::default()
    };
    Ok((
        SimulateArtifact {
            meta: Meta::new(run_config),
            status,
            summary,
        },
        status,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofArtifact {
    #[serde(flatten)]
    pub meta: Meta,
    /// observations left out because the fit trims them or the smoother has no support there
    pub excluded: usize,
    pub report: GofReport,
}

/// Fitted means from the stored fit at each row of `data`; `None` for trimmed or unsupported rows.
fn fitted_means(artifact: &FitArtifact, data: &Dataset) -> Result<Vec<Option<f64>>, CliError> {
    let train = artifact.dataset()?;
    let fit = &artifact.fit;
    let t = train.index_values(&fit.theta_hat);
    let sorted = SortedIndex::new(&t, train.y());
    Ok(data
        .rows()
        .map(|z| {
            let out = sorted.smooth(fit.theta_hat.project(z), fit.h_hat, None);
            out.r_hat.filter(|_| out.f_hat >= fit.trim_c)
        })
        .collect())
}

pub fn cmd_gof(args: &GofArgs) -> Result<(GofArtifact, Status), CliError> {
    let artifact = FitArtifact::load(&args.fit)?;
    let alpha = match artifact.fit.variance_family {
        Family::NegBin => artifact.fit.alpha_tilde.alpha,
        Family::Poisson => 0.0,
        f => {
            return Err(CliError::Input(format!(
                "goodness of fit needs a count variance link, the fit uses '{}'",
                f.id()
            )))
        }
    };
    let data = match &args.data {
        None => artifact.dataset()?,
        Some(path) => {
            let table = input::read_table(path)?;
            let mut expected = vec![artifact.training.response.clone()];
            expected.extend(artifact.training.covariates.iter().cloned());
            if table.header != expected {
                return Err(CliError::Input(format!(
                    "columns {:?} do not match the training columns {:?}",
                    table.header, expected
                )));
            }
            let rows: Vec<Vec<f64>> = table
                .rows
                .iter()
                .map(|r| match &artifact.standardization {
                    Some(s) => s.apply(&r[1..]),
                    None => r[1..].to_vec(),
                })
                .collect();
            Dataset::from_rows(table.column(0), &rows)?
        }
    };
    let means = fitted_means(&artifact, &data)?;
    let mut y = Vec::with_capacity(data.n());
    let mut r = Vec::with_capacity(data.n());
    for (i, m) in means.iter().enumerate() {
        let kept = args.data.is_some() || artifact.fit.trim_mask[i];
        if let (Some(m), true) = (m, kept) {
            y.push(data.y()[i]);
            r.push(m.max(R_MIN));
        }
    }
    let report = gof_report(&y, &r, alpha, &args.cells)?;
    let run_config = RunConfig {
        subcommand: "gof".into(),
        input: args.data.clone(),
        fit_artifact: Some(args.fit.clone()),
        seed: artifact.meta.seed,
        format: Some(args.output.format),
        standardize: artifact.standardization.is_some(),
        cells: Some(args.cells.clone()),
        ..RunConfig::default()
    };
    Ok((
        GofArtifact {
            meta: Meta::new(run_config),
            excluded: data.n() - y.len(),
            report,
        },
        Status::Ok,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub row: usize,
    pub t: f64,
    pub r_hat: Option<f64>,
    pub f_hat: f64,
    pub bias: Option<f64>,
    pub half_width: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub lower_bias_corrected: Option<f64>,
    pub upper_bias_corrected: Option<f64>,
    pub outside_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictArtifact {
    #[serde(flatten)]
    pub meta: Meta,
    pub level: f64,
    pub h: f64,
    pub predictions: Vec<Prediction>,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(PredictArtifact, Status), CliError> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::Input(format!(
            "--level must lie in (0, 1), got {}",
            args.level
        )));
    }
    let artifact = FitArtifact::load(&args.fit)?;
    let table = input::read_table(&args.data)?;
    let theta = &artifact.fit.theta_hat;
    let t: Vec<f64> = if args.index {
        if table.header.len() != 1 {
            return Err(CliError::Input(
                "index input must have exactly one column".into(),
            ));
        }
        table.column(0)
    } else {
        let covs = &artifact.training.covariates;
        let skip = if &table.header == covs {
            0
        } else if table.header.len() == covs.len() + 1 && &table.header[1..] == covs.as_slice() {
            1
        } else {
            return Err(CliError::Input(format!(
                "columns {:?} do not match the training covariates {:?}",
                table.header, covs
            )));
        };
        table
            .rows
            .iter()
            .map(|r| {
                let z = &r[skip..];
                match &artifact.standardization {
                    Some(s) => theta.project(&s.apply(z)),
                    None => theta.project(z),
                }
            })
            .collect()
    };
    let data = artifact.dataset()?;
    let t_train = data.index_values(theta);
    let sorted = SortedIndex::new(&t_train, data.y());
    let bands = link_band_points(&data, &artifact.fit, &t, 1.0 - args.level)?;
    let predictions = t
        .iter()
        .zip(bands)
        .enumerate()
        .map(|(row, (&ti, band))| match band {
            Ok(p) => Prediction {
                row,
                t: ti,
                r_hat: Some(p.r_hat),
                f_hat: p.f_hat,
                bias: Some(p.bias),
                half_width: Some(p.half_width),
                lower: Some(p.lower),
                upper: Some(p.upper),
                lower_bias_corrected: Some(p.lower_bias_corrected),
                upper_bias_corrected: Some(p.upper_bias_corrected),
                outside_support: false,
            },
            Err(_) => {
                let out = sorted.smooth(ti, artifact.fit.h_hat, None);
                Prediction {
                    row,
                    t: ti,
                    r_hat: out.r_hat,
                    f_hat: out.f_hat,
                    bias: None,
                    half_width: None,
                    lower: None,
                    upper: None,
                    lower_bias_corrected: None,
                    upper_bias_corrected: None,
                    outside_support: true,
                }
            }
        })
        .collect();
    let run_config = RunConfig {
        subcommand: "predict".into(),
        input: Some(args.data.clone()),
        fit_artifact: Some(args.fit.clone()),
        seed: artifact.meta.seed,
        format: Some(args.output.format),
        standardize: artifact.standardization.is_some(),
        level: Some(args.level),
        index_input: args.index,
        ..RunConfig::default()
    };
    Ok((
        PredictArtifact {
            meta: Meta::new(run_config),
            level: args.level,
            h: artifact.fit.h_hat,
            predictions,
        },
        Status::Ok,
    ))
}

fn emit<A: Render>(artifact: &A, output: &OutputArgs) -> Result<(), CliError> {
    let text = render(artifact, output.format)?;
    match &output.out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn finish<A: Render>(
    result: Result<(A, Status), CliError>,
    output: &OutputArgs,
) -> Result<Status, CliError> {
    let (artifact, status) = result?;
    emit(&artifact, output)?;
    Ok(status)
}

/// Runs one parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let outcome = match &cli.command {
        Command::Fit(a) => finish(cmd_fit(a), &a.output),
        Command::Simulate(a) => finish(cmd_simulate(a), &a.output),
        Command::Gof(a) => finish(cmd_gof(a), &a.output),
        Command::Predict(a) => finish(cmd_predict(a), &a.output),
    };
    match outcome {
        Ok(status) => {
            if status == Status::Warning {
                eprintln!("warning: numeric or convergence problem; see the artifact");
            }
            status.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
