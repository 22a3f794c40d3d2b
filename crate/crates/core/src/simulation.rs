//! Monte Carlo study of the heterogeneous-Poisson single-index design.
//!
//! `Z ~ N(0, Sigma)` with `Sigma_ij = rho^|i-j|`, `r(t) = t^2 + offset`, and
//! `Y | Z, eps ~ Poisson(r(Z' theta0) eps)` with `E eps = 1`. Every replicate
//! draws from its own ChaCha stream keyed by `(seed, replicate)`, so serial and
//! parallel runs produce identical numbers.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, IndexParam};
use crate::error::{Error, Result};
use crate::estimation::{
    default_pilot_bandwidth, fit_with_step1, fixed_trim_set, step1_from, step1_preliminary, FitConfig, FitResult,
    Step1Criterion,
};
use crate::family::Family;
use crate::optimize::{nelder_mead, Minimum, NelderMeadOptions};
use crate::pilot;

/// Multiplicative heterogeneity law with unit mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum Heterogeneity {
    /// shape-scale parameterization
    Gamma { shape: f64, scale: f64 },
    Uniform { lo: f64, hi: f64 },
    /// `eps = 1`: plain Poisson responses
    None,
}

impl Heterogeneity {
    pub fn mean(&self) -> f64 {
        match *self {
            Heterogeneity::Gamma { shape, scale } => shape * scale,
            Heterogeneity::Uniform { lo, hi } => 0.5 * (lo + hi),
            Heterogeneity::None => 1.0,
        }
    }

    /// `Var(eps)`, which equals the NegBin nuisance `alpha0` when the mean is one.
    pub fn variance(&self) -> f64 {
        match *self {
            Heterogeneity::Gamma { shape, scale } => shape * scale * scale,
            Heterogeneity::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            Heterogeneity::None => 0.0,
        }
    }
}

/// How the Step 1 search is initialized in each replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartPolicy {
    /// one local search from the true index
    #[default]
    TrueValue,
    /// the multi-start policy used by `fit`
    MultiStart,
}

impl FromStr for StartPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true-value" | "truth" => Ok(StartPolicy::TrueValue),
            "multi-start" | "multi" => Ok(StartPolicy::MultiStart),
            _ => Err(Error::InvalidConfig(format!("unknown start policy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub theta0: Vec<f64>,
    /// link is `r(t) = t^2 + link_offset`
    pub link_offset: f64,
    /// covariate correlation decay, `Sigma_ij = rho^|i-j|`
    pub rho: f64,
    pub heterogeneity: Heterogeneity,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub start: StartPolicy,
}

impl SimConfig {
    /// Gamma(0.5, 2) heterogeneity design.
    pub fn table1(n: usize, replications: usize, seed: u64) -> Self {
        Self {
            n,
            theta0: vec![1.0, 3.0, -2.0],
            link_offset: 0.5,
            rho: 0.5,
            heterogeneity: Heterogeneity::Gamma { shape: 0.5, scale: 2.0 },
            replications,
            seed,
            start: StartPolicy::TrueValue,
        }
    }

    /// Uniform(0, 2) heterogeneity design.
    pub fn table2(n: usize, replications: usize, seed: u64) -> Self {
        Self {
            heterogeneity: Heterogeneity::Uniform { lo: 0.0, hi: 2.0 },
            ..Self::table1(n, replications, seed)
        }
    }

    pub fn true_alpha(&self) -> f64 {
        self.heterogeneity.variance()
    }

    pub fn link(&self, t: f64) -> f64 {
        t * t + self.link_offset
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.theta0.len();
        DMatrix::from_fn(d, d, |i, j| self.rho.powi((i as i32 - j as i32).abs()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta0.len() < 2 || self.theta0[0] != 1.0 {
            return Err(Error::InvalidConfig("theta0 needs d >= 2 with first component 1".into()));
        }
        if self.n == 0 || self.replications == 0 {
            return Err(Error::InvalidConfig("n and replications must be positive".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidConfig("covariance decay must lie in (-1, 1)".into()));
        }
        let ok = match self.heterogeneity {
            Heterogeneity::Gamma { shape, scale } => shape > 0.0 && scale > 0.0,
            Heterogeneity::Uniform { lo, hi } => lo >= 0.0 && hi > lo,
            Heterogeneity::None => true,
        };
        if !ok {
            return Err(Error::InvalidConfig("invalid heterogeneity law".into()));
        }
        Ok(())
    }

    /// Symmetric square root of the covariance.
    fn covariance_sqrt(&self) -> Result<DMatrix<f64>> {
        let eig = self.covariance().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidConfig("covariance is not positive definite".into()));
        }
        let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
    }
}

fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Draws one dataset for `replicate`.
pub fn generate_dataset(config: &SimConfig, replicate: u64) -> Result<Dataset> {
    config.validate()?;
    let root = config.covariance_sqrt()?;
    let d = config.theta0.len();
    let mut rng = replicate_rng(config.seed, replicate);
    let mut y = Vec::with_capacity(config.n);
    let mut z = Vec::with_capacity(config.n * d);
    for _ in 0..config.n {
        let u = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let zi = &root * u;
        let t: f64 = zi.iter().zip(&config.theta0).map(|(a, b)| a * b).sum();
        let eps = match config.heterogeneity {
            Heterogeneity::Gamma { shape, scale } => Gamma::new(shape, scale)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?
                .sample(&mut rng),
            Heterogeneity::Uniform { lo, hi } => Uniform::new(lo, hi)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?
                .sample(&mut rng),
            Heterogeneity::None => 1.0,
        };
        let lambda = config.link(t) * eps;
        let count = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?
                .sample(&mut rng)
        } else {
            0.0
        };
        y.push(count);
        z.extend(zi.iter());
    }
    Dataset::new(y, z, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricFit {
    pub theta: IndexParam,
    pub theta_nls: IndexParam,
    pub alpha: f64,
    pub converged: bool,
}

/// Two-step parametric GLS with the known link `t^2 + link_offset`.
///
/// NLS first, then the NegBin moment estimate of `alpha` from the NLS means,
/// then least squares reweighted by `g(r, alpha) = r (1 + alpha r)`.
pub fn parametric_gls_benchmark(data: &Dataset, link_offset: f64) -> Result<ParametricFit> {
    let (n, d) = (data.n(), data.d());
    if n < d + 1 {
        return Err(Error::InsufficientData { needed: d + 1, got: n });
    }
    let link = |t: f64| t * t + link_offset;
    let ssr = |free: &[f64], w: Option<&[f64]>| -> f64 {
        let theta = IndexParam::from_free(free.to_vec());
        data.rows()
            .zip(data.y())
            .enumerate()
            .map(|(i, (z, &y))| {
                let e = y - link(theta.project(z));
                e * e / w.map_or(1.0, |w| w[i])
            })
            .sum()
    };

    let opts = NelderMeadOptions {
        max_evals: 2000,
        ..NelderMeadOptions::default()
    };
    let polish = |f: &dyn Fn(&[f64]) -> f64, x0: &[f64]| {
        let step: Vec<f64> = x0.iter().map(|v| 0.25 * v.abs().max(1.0)).collect();
        let first = nelder_mead(f, x0, &step, opts);
        let again = nelder_mead(f, &first.x, &step, opts);
        Minimum {
            converged: first.converged && again.converged,
            evals: first.evals + again.evals,
            ..again
        }
    };
    let nls = quadratic_starts(data, link_offset)
        .iter()
        .map(|x0| polish(&|x: &[f64]| ssr(x, None), x0))
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .expect("at least one start");
    let theta_nls = IndexParam::from_free(nls.x.clone());

    let r: Vec<f64> = data.rows().map(|z| link(theta_nls.project(z))).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (&ri, &yi) in r.iter().zip(data.y()) {
        num += (yi - ri).powi(2) - ri;
        den += ri * ri;
    }
    let alpha = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    let w: Vec<f64> = r.iter().map(|&ri| ri * (1.0 + alpha * ri)).collect();
    let gls = polish(&|x: &[f64]| ssr(x, Some(&w)), &nls.x);
    Ok(ParametricFit {
        theta: IndexParam::from_free(gls.x),
        theta_nls,
        alpha,
        converged: nls.converged && gls.converged,
    })
}

/// NLS starts from a linear regression of `y` on all quadratic covariate products.
///
/// The fitted quadratic form `B` estimates `theta theta'`; one start reads `theta`
/// off the first row of `B`, the other off its leading eigenvector.
fn quadratic_starts(data: &Dataset, link_offset: f64) -> Vec<Vec<f64>> {
    let d = data.d();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|j| (j..d).map(move |k| (j, k))).collect();
    let x = DMatrix::from_fn(data.n(), pairs.len(), |i, p| {
        let z = data.row(i);
        z[pairs[p].0] * z[pairs[p].1]
    });
    let y = DVector::from_iterator(data.n(), data.y().iter().map(|v| v - link_offset));
    let w = DVector::from_element(data.n(), 1.0);
    let fallback = vec![vec![0.0; d - 1]];
    let Some(b) = pilot::weighted_ls(&x, &y, &w) else {
        return fallback;
    };
    let mut form = DMatrix::zeros(d, d);
    for (p, &(j, k)) in pairs.iter().enumerate() {
        let v = if j == k { b[p] } else { b[p] / 2.0 };
        form[(j, k)] = v;
        form[(k, j)] = v;
    }
    let mut starts = Vec::new();
    if form[(0, 0)] > 1e-8 {
        starts.push((1..d).map(|k| form[(0, k)] / form[(0, 0)]).collect());
    }
    let eig = form.symmetric_eigen();
    let top = eig.eigenvalues.iamax();
    let v = eig.eigenvectors.column(top);
    if v[0].abs() > 1e-8 {
        starts.push((1..d).map(|k| v[k] / v[0]).collect());
    }
    if starts.is_empty() { fallback } else { starts }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "GLS-P")]
    GlsP,
    #[serde(rename = "GLS-SP")]
    GlsSp,
    #[serde(rename = "POI-SP")]
    PoiSp,
    #[serde(rename = "NB-SP")]
    NbSp,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::GlsP, Estimator::GlsSp, Estimator::PoiSp, Estimator::NbSp];

    pub fn id(self) -> &'static str {
        match self {
            Estimator::GlsP => "GLS-P",
            Estimator::GlsSp => "GLS-SP",
            Estimator::PoiSp => "POI-SP",
            Estimator::NbSp => "NB-SP",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator '{s}'")))
    }
}

/// One estimator's output on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub free: Vec<f64>,
    pub alpha: Option<f64>,
    pub h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub replicate: u64,
    /// one entry per requested estimator, in request order; `Err` holds the failure reason
    pub results: Vec<(Estimator, std::result::Result<EstimateRecord, String>)>,
}

fn fit_seed(seed: u64, replicate: u64) -> u64 {
    seed ^ replicate.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn semiparametric(fit: Result<FitResult>) -> std::result::Result<EstimateRecord, String> {
    match fit {
        Ok(f) if f.optimizer_converged => Ok(EstimateRecord {
            free: f.theta_hat.free().to_vec(),
            alpha: Some(f.alpha_tilde.alpha),
            h: Some(f.h_hat),
        }),
        Ok(_) => Err("step 2 did not converge".into()),
        Err(e) => Err(e.to_string()),
    }
}

/// Runs every requested estimator on replicate `replicate`.
pub fn run_replicate(config: &SimConfig, estimators: &[Estimator], replicate: u64) -> Result<ReplicationOutcome> {
    let data = generate_dataset(config, replicate)?;
    let n = data.n();
    let h_n = default_pilot_bandwidth(n);
    let seed = fit_seed(config.seed, replicate);
    let trim = fixed_trim_set(&data, 0.025, 0.975);

    let truth = &config.theta0[1..];
    let step1 = |criterion: Step1Criterion| match config.start {
        StartPolicy::TrueValue => step1_from(&data, criterion, h_n, &trim, truth),
        StartPolicy::MultiStart => step1_preliminary(&data, criterion, h_n, &trim, seed),
    };
    let needs_poisson = estimators.iter().any(|e| matches!(e, Estimator::PoiSp | Estimator::NbSp));
    let poisson_step1 = needs_poisson.then(|| step1(Step1Criterion::Poisson));

    let mut results = Vec::with_capacity(estimators.len());
    for &est in estimators {
        let record = match est {
            Estimator::GlsP => match parametric_gls_benchmark(&data, config.link_offset) {
                Ok(p) if p.converged => Ok(EstimateRecord {
                    free: p.theta.free().to_vec(),
                    alpha: Some(p.alpha),
                    h: None,
                }),
                Ok(_) => Err("parametric GLS did not converge".into()),
                Err(e) => Err(e.to_string()),
            },
            Estimator::PoiSp => match poisson_step1.as_ref().expect("computed above") {
                Ok(s) => Ok(EstimateRecord {
                    free: s.theta.free().to_vec(),
                    alpha: None,
                    h: Some(h_n),
                }),
                Err(e) => Err(e.to_string()),
            },
            Estimator::NbSp => match poisson_step1.as_ref().expect("computed above") {
                Ok(s) => {
                    let mut cfg = FitConfig::new(Family::NegBin);
                    cfg.seed = seed;
                    semiparametric(fit_with_step1(&data, &cfg, s.clone(), trim.clone()))
                }
                Err(e) => Err(e.to_string()),
            },
            Estimator::GlsSp => {
                let mut cfg = FitConfig::new(Family::GaussianGls);
                cfg.seed = seed;
                semiparametric(
                    step1(Step1Criterion::LeastSquares).and_then(|s| fit_with_step1(&data, &cfg, s, trim.clone())),
                )
            }
        };
        results.push((est, record));
    }
    Ok(ReplicationOutcome { replicate, results })
}

/// Runs all replications, in parallel on `jobs` threads; output is ordered by replicate.
pub fn run_replications(config: &SimConfig, estimators: &[Estimator], jobs: usize) -> Result<Vec<ReplicationOutcome>> {
    config.validate()?;
    if estimators.is_empty() {
        return Err(Error::InvalidConfig("no estimators requested".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| {
        (0..config.replications as u64)
            .into_par_iter()
            .map(|r| run_replicate(config, estimators, r))
            .collect()
    })
}

/// Share of failed replications per estimator above which the run is flagged.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub estimator: Estimator,
    /// 1-based position in the full index vector (2 = first free component)
    pub coefficient: usize,
    pub mean: f64,
    /// sample standard deviation; absent with fewer than two successes
    pub std: Option<f64>,
    /// mean squared error about the true value
    pub mse: f64,
    pub n: usize,
    /// successful replications
    #[serde(rename = "R")]
    pub replications: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub config: SimConfig,
    pub rows: Vec<McRow>,
    pub exceeded_failure_budget: bool,
}

impl McSummary {
    pub fn row(&self, estimator: Estimator, coefficient: usize) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.coefficient == coefficient)
    }

    pub fn check_failures(&self) -> Result<()> {
        match self.rows.iter().max_by_key(|r| r.failures) {
            Some(r) if self.exceeded_failure_budget => Err(Error::TooManyFailures {
                failed: r.failures,
                total: r.failures + r.replications,
            }),
            _ => Ok(()),
        }
    }

    pub const CSV_HEADER: &'static str = "estimator,coefficient,mean,std,mse,n,R,failures";

    /// Fixed column order: estimator, coefficient, mean, std, mse, n, R, failures.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let std = r.std.map(|s| format!("{s:?}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},theta{},{:?},{},{:?},{},{},{}",
                r.estimator, r.coefficient, r.mean, std, r.mse, r.n, r.replications, r.failures
            );
        }
        out
    }
}

/// Aggregates outcomes into per-estimator, per-coefficient mean/std/MSE.
pub fn summarize(config: &SimConfig, estimators: &[Estimator], outcomes: &[ReplicationOutcome]) -> McSummary {
    let mut sorted: Vec<&ReplicationOutcome> = outcomes.iter().collect();
    sorted.sort_by_key(|o| o.replicate);
    let mut rows = Vec::new();
    let mut exceeded = false;
    for &est in estimators {
        let successes: Vec<&EstimateRecord> = sorted
            .iter()
            .filter_map(|o| o.results.iter().find(|(e, _)| *e == est))
            .filter_map(|(_, r)| r.as_ref().ok())
            .collect();
        let failures = sorted.len() - successes.len();
        if failures as f64 > MAX_FAILURE_SHARE * sorted.len() as f64 {
            exceeded = true;
        }
        for k in 1..config.theta0.len() {
            let truth = config.theta0[k];
            let values: Vec<f64> = successes.iter().map(|r| r.free[k - 1]).collect();
            let m = values.len();
            let (mean, std, mse) = if m == 0 {
                (f64::NAN, None, f64::NAN)
            } else {
                let mean = pilot::mean(&values);
                let std = (m >= 2).then(|| pilot::sample_sd(&values));
                let mse = values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / m as f64;
                (mean, std, mse)
            };
            rows.push(McRow {
                estimator: est,
                coefficient: k + 1,
                mean,
                std,
                mse,
                n: config.n,
                replications: m,
                failures,
            });
        }
    }
    McSummary {
        config: config.clone(),
        rows,
        exceeded_failure_budget: exceeded,
    }
}

/// Generates, fits, and aggregates `config.replications` replicates.
///
/// Fails with `TooManyFailures` when any estimator loses more than
/// [`MAX_FAILURE_SHARE`] of the replications; use [`run_replications`] and
/// [`summarize`] to keep the partial summary.
pub fn run_monte_carlo(config: &SimConfig, estimators: &[Estimator], jobs: usize) -> Result<McSummary> {
    let outcomes = run_replications(config, estimators, jobs)?;
    let summary = summarize(config, estimators, &outcomes);
    summary.check_failures()?;
    Ok(summary)
}
