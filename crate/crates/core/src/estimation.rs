//! Two-step semiparametric PML estimation of a single-index model.
//!
//! Step 1 maximizes a Poisson (or least-squares) pseudo-likelihood built on the
//! leave-one-out smoother at a pilot bandwidth over a fixed trimming set.
//! The nuisance parameter is then estimated by moments, and Step 2 maximizes
//! the LEFN (or GLS) pseudo-likelihood jointly in the index direction and the
//! bandwidth, with trimming decided once from the Step 1 density.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, IndexParam};
use crate::error::{Error, Result};
use crate::family::{Family, NuisanceParam};
use crate::kernel::{CompensatedSum, SortedIndex};
use crate::optimize::{golden_section, nelder_mead, NelderMeadOptions};
use crate::pilot;

/// Pseudo-likelihood maximized in Step 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step1Criterion {
    #[serde(rename = "poisson")]
    Poisson,
    #[serde(rename = "least-squares")]
    LeastSquares,
}

impl Step1Criterion {
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::GaussianGls => Step1Criterion::LeastSquares,
            _ => Step1Criterion::Poisson,
        }
    }

    pub fn criterion(self, n: usize) -> Criterion {
        match self {
            Step1Criterion::Poisson => Criterion::Lefn {
                family: Family::Poisson,
                alpha: 0.0,
            },
            Step1Criterion::LeastSquares => Criterion::least_squares(n),
        }
    }
}

impl fmt::Display for Step1Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step1Criterion::Poisson => "poisson",
            Step1Criterion::LeastSquares => "least-squares",
        })
    }
}

impl FromStr for Step1Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(Step1Criterion::Poisson),
            "least-squares" => Ok(Step1Criterion::LeastSquares),
            _ => Err(Error::InvalidConfig(format!("unknown step-1 criterion '{s}'"))),
        }
    }
}

/// Per-observation pseudo-log-likelihood entering the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Criterion {
    /// `B(r, alpha) + C(r, alpha) y` for a LEFN family.
    Lefn { family: Family, alpha: f64 },
    /// `-(y - r)^2 / w_i`.
    Gls { weights: Vec<f64> },
}

impl Criterion {
    pub fn least_squares(n: usize) -> Self {
        Criterion::Gls { weights: vec![1.0; n] }
    }

    pub fn mean_floor(&self) -> f64 {
        match self {
            Criterion::Lefn { family, .. } => family.mean_lower_bound(),
            Criterion::Gls { .. } => f64::NEG_INFINITY,
        }
    }

    #[inline]
    pub fn psi(&self, i: usize, y: f64, r: f64) -> f64 {
        match self {
            Criterion::Lefn { family, alpha } => family.psi_raw(y, r, *alpha),
            Criterion::Gls { weights } => -(y - r) * (y - r) / weights[i],
        }
    }

    /// `dC/dr` for observation `i` at mean `r`, so that `d psi / dr = dC (y - r)` up to a constant factor.
    pub fn dc_dr(&self, i: usize, r: f64) -> f64 {
        match self {
            Criterion::Lefn { family, alpha } => family.dc_dr_raw(r, *alpha),
            Criterion::Gls { weights } => 1.0 / weights[i],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Criterion::Lefn { family, alpha } if !family.alpha_admissible(*alpha) => Err(Error::Domain(format!(
                "nuisance {alpha} outside the {family} domain"
            ))),
            Criterion::Gls { weights } if weights.len() != n => {
                Err(Error::InvalidConfig("GLS weight count differs from n".into()))
            }
            Criterion::Gls { weights } if weights.iter().any(|w| !(*w > 0.0)) => {
                Err(Error::Domain("GLS weights must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Value of the trimmed leave-one-out objective with side-channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    pub contributing: usize,
    /// untrimmed observations whose smoothed mean was raised to the family floor
    pub clamped: usize,
    /// untrimmed observations with an empty smoothing window; they contribute nothing
    pub degenerate: usize,
}

fn evaluate(
    data: &Dataset,
    theta: &IndexParam,
    h: f64,
    criterion: &Criterion,
    mask: &[bool],
    mut terms: Option<&mut Vec<f64>>,
) -> ObjectiveValue {
    let t = data.index_values(theta);
    let sorted = SortedIndex::new(&t, data.y());
    let fits = sorted.loo_at_data(h);
    let floor = criterion.mean_floor();
    let mut acc = CompensatedSum::default();
    let (mut contributing, mut clamped, mut degenerate) = (0, 0, 0);
    for (i, fit) in fits.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let r = match fit.r_hat {
            Some(r) if r < floor => {
                clamped += 1;
                floor
            }
            Some(r) => r,
            None => {
                degenerate += 1;
                continue;
            }
        };
        contributing += 1;
        let term = criterion.psi(i, data.y()[i], r);
        acc.add(term);
        if let Some(out) = terms.as_deref_mut() {
            out.push(term);
        }
    }
    ObjectiveValue {
        value: acc.value() / data.n() as f64,
        contributing,
        clamped,
        degenerate,
    }
}

/// The trimmed pseudo-likelihood `n^{-1} sum_i psi(Y_i, r_h^{(-i)}(Z_i' theta; theta)) tau_i`.
pub fn objective_s(
    data: &Dataset,
    theta: &IndexParam,
    h: f64,
    criterion: &Criterion,
    mask: &[bool],
) -> Result<ObjectiveValue> {
    check_objective_inputs(data, theta, h, criterion, mask)?;
    Ok(evaluate(data, theta, h, criterion, mask, None))
}

fn check_objective_inputs(
    data: &Dataset,
    theta: &IndexParam,
    h: f64,
    criterion: &Criterion,
    mask: &[bool],
) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("bandwidth must be positive, got {h}")));
    }
    if data.n() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: data.n() });
    }
    if theta.dim() != data.d() || mask.len() != data.n() {
        return Err(Error::InvalidConfig("dimension mismatch".into()));
    }
    criterion.validate(data.n())?;
    if !mask.iter().any(|&k| k) {
        return Err(Error::AllTrimmed);
    }
    Ok(())
}

/// How observations are excluded from the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TrimmingSpec {
    /// Keep exactly the marked observations.
    FixedSet { keep: Vec<bool> },
    /// Keep `i` when the leave-one-out density at the pilot fit is at least `c`.
    DensityThreshold {
        c: f64,
        pilot_theta: IndexParam,
        pilot_h: f64,
    },
}

impl TrimmingSpec {
    pub fn mask(&self, data: &Dataset) -> Result<Vec<bool>> {
        match self {
            TrimmingSpec::FixedSet { keep } => {
                if keep.len() != data.n() {
                    return Err(Error::InvalidConfig("trim set length differs from n".into()));
                }
                Ok(keep.clone())
            }
            TrimmingSpec::DensityThreshold { c, pilot_theta, pilot_h } => {
                if !(*c > 0.0) || !(*pilot_h > 0.0) {
                    return Err(Error::InvalidConfig("trim threshold and pilot bandwidth must be positive".into()));
                }
                let t = data.index_values(pilot_theta);
                Ok(SortedIndex::new(&t, data.y())
                    .loo_at_data(*pilot_h)
                    .iter()
                    .map(|o| o.f_hat >= *c)
                    .collect())
            }
        }
    }
}

/// Observations whose OLS pilot index lies inside the `[lo_q, hi_q]` empirical quantile range.
pub fn fixed_trim_set(data: &Dataset, lo_q: f64, hi_q: f64) -> Vec<bool> {
    let Some(slopes) = pilot::ols_slopes(data) else {
        return vec![true; data.n()];
    };
    let t: Vec<f64> = data
        .rows()
        .map(|z| z.iter().zip(&slopes).map(|(a, b)| a * b).sum())
        .collect();
    let mut sorted = t.clone();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (pilot::quantile(&sorted, lo_q), pilot::quantile(&sorted, hi_q));
    t.iter().map(|&v| v >= lo && v <= hi).collect()
}

/// Pilot bandwidth `3 n^{-1/5}`.
pub fn default_pilot_bandwidth(n: usize) -> f64 {
    3.0 * (n as f64).powf(-0.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1Result {
    pub theta: IndexParam,
    pub objective: f64,
    pub converged: bool,
    pub starts: usize,
}

/// Number of seeded random starts added to the parametric ones in Step 1.
pub const STEP1_PERTURBED_STARTS: usize = 3;

fn nm_step(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 0.25 * v.abs().max(1.0)).collect()
}

/// Random directions screened before the Step 1 simplex searches.
pub const STEP1_SCAN_DIRECTIONS: usize = 64;
/// Best screened directions that become additional Step 1 starts.
pub const STEP1_SCAN_STARTS: usize = 2;

/// Screens random unit directions in standardized covariate space and returns the best as starts.
fn scan_directions<F>(data: &Dataset, objective: &F, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let d = data.d();
    let sd: Vec<f64> = (0..d)
        .map(|k| {
            let col: Vec<f64> = data.rows().map(|z| z[k]).collect();
            let s = pilot::sample_sd(&col);
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(STEP1_SCAN_DIRECTIONS);
    while scored.len() < STEP1_SCAN_DIRECTIONS {
        let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lead = u[0] / norm;
        if lead.abs() < 0.1 {
            continue;
        }
        let free: Vec<f64> = (1..d).map(|k| (u[k] / sd[k]) / (u[0] / sd[0])).collect();
        scored.push((objective(&free), free));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    scored.into_iter().take(STEP1_SCAN_STARTS).map(|(_, x)| x).collect()
}

/// Step 1: multi-start maximization of the preliminary pseudo-likelihood at bandwidth `h_n`.
pub fn step1_preliminary(
    data: &Dataset,
    criterion: Step1Criterion,
    h_n: f64,
    fixed_trim: &[bool],
    seed: u64,
) -> Result<Step1Result> {
    let (n, d) = (data.n(), data.d());
    if n < d + 2 {
        return Err(Error::InsufficientData { needed: d + 2, got: n });
    }
    let crit = criterion.criterion(n);
    let zero = IndexParam::from_free(vec![0.0; d - 1]);
    check_objective_inputs(data, &zero, h_n, &crit, fixed_trim)?;

    let objective = |free: &[f64]| -> f64 {
        let theta = IndexParam::from_free(free.to_vec());
        -evaluate(data, &theta, h_n, &crit, fixed_trim, None).value
    };

    let mut starts: Vec<Vec<f64>> = [pilot::ols_slopes(data), pilot::poisson_glm_slopes(data)]
        .into_iter()
        .flatten()
        .filter_map(|s| pilot::normalize_direction(&s))
        .filter(|s| s.iter().all(|v| v.abs() < 1e3))
        .collect();
    if starts.is_empty() {
        starts.push(vec![0.0; d - 1]);
    }
    let base = starts
        .iter()
        .min_by(|a, b| objective(a).total_cmp(&objective(b)))
        .cloned()
        .unwrap_or_default();
    let scale = base.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..STEP1_PERTURBED_STARTS {
        starts.push(
            base.iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + scale * z
                })
                .collect(),
        );
    }

    starts.extend(scan_directions(data, &objective, &mut rng));

    Ok(step1_search(objective, &starts))
}

fn step1_search<F>(objective: F, starts: &[Vec<f64>]) -> Step1Result
where
    F: Fn(&[f64]) -> f64,
{
    let opts = NelderMeadOptions::default();
    let mut best: Option<crate::optimize::Minimum> = None;
    for s in starts {
        let m = nelder_mead(&objective, s, &nm_step(s), opts);
        if best.as_ref().is_none_or(|b| m.f < b.f) {
            best = Some(m);
        }
    }
    let best = best.expect("at least one start");
    Step1Result {
        theta: IndexParam::from_free(best.x),
        objective: -best.f,
        converged: best.converged,
        starts: starts.len(),
    }
}

/// Step 1 as a single local search from `start` (free components).
pub fn step1_from(
    data: &Dataset,
    criterion: Step1Criterion,
    h_n: f64,
    fixed_trim: &[bool],
    start: &[f64],
) -> Result<Step1Result> {
    let (n, d) = (data.n(), data.d());
    if n < d + 2 {
        return Err(Error::InsufficientData { needed: d + 2, got: n });
    }
    if start.len() != d - 1 || start.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("Step 1 start needs {} finite values", d - 1)));
    }
    let crit = criterion.criterion(n);
    let theta = IndexParam::from_free(start.to_vec());
    check_objective_inputs(data, &theta, h_n, &crit, fixed_trim)?;
    let objective = |free: &[f64]| -> f64 {
        let theta = IndexParam::from_free(free.to_vec());
        -evaluate(data, &theta, h_n, &crit, fixed_trim, None).value
    };
    Ok(step1_search(objective, &[start.to_vec()]))
}

/// Moment estimator of the nuisance parameter from fitted means over the kept observations.
///
/// NegBin: `sum[(y - r)^2 - r] / sum r^2`; Gamma: `sum r^2 / sum (y - r)^2`;
/// Gaussian: mean squared residual; Poisson: zero. The result is floored at `rho`.
pub fn nuisance_from_fitted(
    variance_family: Family,
    y: &[f64],
    r_hat: &[Option<f64>],
    keep: &[bool],
    rho: f64,
) -> Result<NuisanceParam> {
    let mut num = CompensatedSum::default();
    let mut den = CompensatedSum::default();
    let mut count = 0usize;
    for ((&yi, ri), &k) in y.iter().zip(r_hat).zip(keep) {
        let Some(r) = *ri else { continue };
        if !k {
            continue;
        }
        count += 1;
        let e2 = (yi - r).powi(2);
        match variance_family {
            Family::NegBin => {
                num.add(e2 - r);
                den.add(r * r);
            }
            Family::Gamma => {
                num.add(r * r);
                den.add(e2);
            }
            Family::GaussianGls => {
                num.add(e2);
                den.add(1.0);
            }
            Family::Poisson => {}
        }
    }
    if variance_family == Family::Poisson {
        return Ok(NuisanceParam { alpha: 0.0 });
    }
    if count == 0 || den.value() <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let alpha = (num.value() / den.value()).max(rho);
    let alpha = match variance_family {
        // these families need alpha > 0
        Family::Gamma | Family::GaussianGls if alpha <= 0.0 => f64::MIN_POSITIVE,
        _ => alpha,
    };
    Ok(NuisanceParam { alpha })
}

/// Nuisance estimate using the full-sample smoother at the Step 1 fit.
pub fn estimate_nuisance(
    data: &Dataset,
    variance_family: Family,
    theta_n: &IndexParam,
    h_n: f64,
    fixed_trim: &[bool],
    rho: f64,
) -> Result<NuisanceParam> {
    let r_hat = full_sample_means(data, theta_n, h_n);
    nuisance_from_fitted(variance_family, data.y(), &r_hat, fixed_trim, rho)
}

/// Full-sample smoother at each observation.
pub fn full_sample_means(data: &Dataset, theta: &IndexParam, h: f64) -> Vec<Option<f64>> {
    let t = data.index_values(theta);
    SortedIndex::new(&t, data.y())
        .full_at_data(h)
        .iter()
        .map(|o| o.r_hat)
        .collect()
}

/// Bandwidth window and trust region searched in Step 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchDomain {
    pub h_lo: f64,
    pub h_hi: f64,
    /// radius of the trust region for the free index components around the Step 1 fit
    pub d_n: f64,
    pub h_grid_size: usize,
}

/// Default number of bandwidths on the Step 2 grid.
pub const DEFAULT_H_GRID: usize = 25;

impl SearchDomain {
    /// Defaults scaled by the spread of the pilot index.
    ///
    /// The window is `[0.9, 2.5] x s n^{-1/5}` and the trust radius is
    /// `2.5 (1 + |theta_n|) / ln n`, where `s` is the sample standard deviation
    /// of the Step 1 index.
    pub fn default_for(n: usize, index_sd: f64, theta_n: &IndexParam) -> Self {
        let base = index_sd * (n as f64).powf(-0.2);
        let norm = theta_n.free().iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            h_lo: 0.9 * base,
            h_hi: 2.5 * base,
            d_n: 2.5 * (1.0 + norm) / (n as f64).ln(),
            h_grid_size: DEFAULT_H_GRID,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_lo > 0.0 && self.h_lo <= self.h_hi && self.h_hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth window [{}, {}] is invalid",
                self.h_lo, self.h_hi
            )));
        }
        if !(self.d_n >= 0.0) {
            return Err(Error::InvalidConfig("trust radius must be nonnegative".into()));
        }
        if self.h_grid_size == 0 {
            return Err(Error::InvalidConfig("bandwidth grid must be nonempty".into()));
        }
        Ok(())
    }

    pub fn is_collapsed(&self) -> bool {
        self.h_lo == self.h_hi
    }

    /// Log-spaced grid from `h_lo` to `h_hi`; a single point for a collapsed window.
    pub fn grid(&self) -> Vec<f64> {
        if self.is_collapsed() {
            return vec![self.h_lo];
        }
        if self.h_grid_size == 1 {
            return vec![(self.h_lo * self.h_hi).sqrt()];
        }
        let (a, b) = (self.h_lo.ln(), self.h_hi.ln());
        let m = (self.h_grid_size - 1) as f64;
        (0..self.h_grid_size)
            .map(|k| match k {
                0 => self.h_lo,
                _ if k + 1 == self.h_grid_size => self.h_hi,
                _ => (a + (b - a) * k as f64 / m).exp(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub h: f64,
    pub free: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step2Output {
    pub theta: IndexParam,
    pub h: f64,
    pub objective: ObjectiveValue,
    /// simplex converged at the selected bandwidth and the surface is not flat
    pub converged: bool,
    pub optimizer_converged: bool,
    /// objective varies less than its own sampling error across the trust region
    pub flat_surface: bool,
    pub trace: Vec<TraceEntry>,
}

/// Step 2: joint maximization over the bandwidth grid and the index trust region.
///
/// For every grid bandwidth the index is optimized from both the Step 1 fit and
/// the previous grid optimum, keeping the better. The best bandwidth is then
/// polished by golden-section search between its grid neighbours. Ties go to
/// the smaller bandwidth.
pub fn step2_joint(
    data: &Dataset,
    theta_n: &IndexParam,
    criterion: &Criterion,
    domain: &SearchDomain,
    mask: &[bool],
) -> Result<Step2Output> {
    domain.validate()?;
    check_objective_inputs(data, theta_n, domain.h_lo, criterion, mask)?;
    let origin = theta_n.free().to_vec();
    let radius = domain.d_n;
    let inside = |free: &[f64]| {
        free.iter()
            .zip(&origin)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            <= radius
    };
    let neg_objective = |free: &[f64], h: f64| -> f64 {
        if !inside(free) {
            return f64::INFINITY;
        }
        -evaluate(data, &IndexParam::from_free(free.to_vec()), h, criterion, mask, None).value
    };
    let step: Vec<f64> = vec![(radius / 2.0).max(1e-8); origin.len()];
    let opts = NelderMeadOptions::default();
    let inner = |h: f64, from: &[f64]| nelder_mead(|x| neg_objective(x, h), from, &step, opts);

    let grid = domain.grid();
    let mut trace = Vec::with_capacity(grid.len() + 16);
    let mut per_grid: Vec<(f64, Vec<f64>, f64, bool)> = Vec::with_capacity(grid.len());
    for &h in &grid {
        let mut m = inner(h, &origin);
        if let Some((_, prev, _, _)) = per_grid.last() {
            if prev != &origin {
                let warm = inner(h, prev);
                if warm.f < m.f {
                    m = warm;
                }
            }
        }
        trace.push(TraceEntry {
            h,
            free: m.x.clone(),
            objective: -m.f,
        });
        per_grid.push((h, m.x, m.f, m.converged));
    }

    let mut k_best = 0;
    for k in 1..per_grid.len() {
        if per_grid[k].2 < per_grid[k_best].2 {
            k_best = k;
        }
    }
    let (mut h_best, mut x_best, mut f_best, mut conv_best) = per_grid[k_best].clone();

    if per_grid.len() >= 2 {
        let lo = grid[k_best.saturating_sub(1)];
        let hi = grid[(k_best + 1).min(grid.len() - 1)];
        let mut polish: Vec<(f64, Vec<f64>, f64, bool)> = Vec::new();
        let warm = x_best.clone();
        golden_section(
            |h| {
                let m = inner(h, &warm);
                let f = m.f;
                polish.push((h, m.x, m.f, m.converged));
                f
            },
            lo,
            hi,
            1e-3,
            20,
        );
        for (h, x, f, c) in polish {
            trace.push(TraceEntry {
                h,
                free: x.clone(),
                objective: -f,
            });
            if f < f_best || (f == f_best && h < h_best) {
                (h_best, x_best, f_best, conv_best) = (h, x, f, c);
            }
        }
    }

    let theta = IndexParam::from_free(x_best);
    let mut terms = Vec::with_capacity(data.n());
    let objective = evaluate(data, &theta, h_best, criterion, mask, Some(&mut terms));
    let flat_surface = is_flat(data, theta_n, h_best, criterion, mask, radius, objective.value, &terms);
    Ok(Step2Output {
        theta,
        h: h_best,
        objective,
        converged: conv_best && !flat_surface,
        optimizer_converged: conv_best,
        flat_surface,
        trace,
    })
}

/// Probes the trust-region boundary along each axis; the surface is flat when no
/// probe moves the objective by more than one standard error of the objective.
#[allow(clippy::too_many_arguments)]
fn is_flat(
    data: &Dataset,
    theta_n: &IndexParam,
    h: f64,
    criterion: &Criterion,
    mask: &[bool],
    radius: f64,
    value: f64,
    terms: &[f64],
) -> bool {
    if radius == 0.0 || theta_n.free().is_empty() || terms.len() < 2 {
        return false;
    }
    let m = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / m;
    let sd = (terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    // objective is a sum over n, divided by n
    let se = sd * m.sqrt() / data.n() as f64;
    let mut max_drop: f64 = 0.0;
    for k in 0..theta_n.free().len() {
        for sign in [-1.0, 1.0] {
            let mut free = theta_n.free().to_vec();
            free[k] += sign * radius;
            let v = evaluate(data, &IndexParam::from_free(free), h, criterion, mask, None).value;
            max_drop = max_drop.max(value - v);
        }
    }
    max_drop < se
}

/// The h-profile of the objective at fixed `theta` over the domain grid.
pub fn psi_cv_profile(
    data: &Dataset,
    theta: &IndexParam,
    criterion: &Criterion,
    domain: &SearchDomain,
    mask: &[bool],
) -> Result<Vec<(f64, f64)>> {
    domain.validate()?;
    check_objective_inputs(data, theta, domain.h_lo, criterion, mask)?;
    Ok(domain
        .grid()
        .into_iter()
        .map(|h| (h, evaluate(data, theta, h, criterion, mask, None).value))
        .collect())
}

/// User-facing settings for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub family: Family,
    /// Step 1 criterion; defaults to least squares for GLS and Poisson otherwise.
    pub step1: Option<Step1Criterion>,
    /// Variance link used for the nuisance moment and GLS weights; defaults to the family
    /// itself, or NegBin for GLS.
    pub variance_family: Option<Family>,
    pub pilot_h: Option<f64>,
    /// Density trim threshold in index units; defaults to `0.01 / sd(index)`.
    pub trim_c: Option<f64>,
    pub h_lo: Option<f64>,
    pub h_hi: Option<f64>,
    pub d_n: Option<f64>,
    pub h_grid_size: usize,
    pub fixed_trim_quantiles: (f64, f64),
    pub rho: f64,
    pub seed: u64,
    /// Free index components for a single local Step 1 search; `None` uses the multi-start policy.
    pub step1_start: Option<Vec<f64>>,
}

impl FitConfig {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            step1: None,
            variance_family: None,
            pilot_h: None,
            trim_c: None,
            h_lo: None,
            h_hi: None,
            d_n: None,
            h_grid_size: DEFAULT_H_GRID,
            fixed_trim_quantiles: (0.025, 0.975),
            rho: 0.0,
            seed: 0,
            step1_start: None,
        }
    }

    pub fn step1_criterion(&self) -> Step1Criterion {
        self.step1.unwrap_or_else(|| Step1Criterion::for_family(self.family))
    }

    pub fn resolved_variance_family(&self) -> Family {
        self.variance_family.unwrap_or(match self.family {
            Family::GaussianGls => Family::NegBin,
            f => f,
        })
    }
}

/// Standardized-index trim threshold used when none is given.
pub const DEFAULT_TRIM_C_STANDARDIZED: f64 = 0.01;

/// Share of clamped means among kept observations above which a warning is raised.
pub const CLAMP_WARNING_SHARE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: IndexParam,
    pub h_hat: f64,
    pub alpha_tilde: NuisanceParam,
    pub family: Family,
    pub variance_family: Family,
    pub step1_criterion: Step1Criterion,
    pub theta_step1: IndexParam,
    pub step1_objective: f64,
    pub pilot_h: f64,
    pub trim_c: f64,
    pub domain: SearchDomain,
    pub objective: f64,
    pub trim_mask: Vec<bool>,
    pub step1_trim_mask: Vec<bool>,
    pub gls_weights: Option<Vec<f64>>,
    pub clamp_count: usize,
    pub degenerate_count: usize,
    pub converged: bool,
    pub optimizer_converged: bool,
    pub flat_surface: bool,
    pub warnings: Vec<String>,
    pub trace: Vec<TraceEntry>,
}

impl FitResult {
    pub fn criterion(&self) -> Criterion {
        match &self.gls_weights {
            Some(w) => Criterion::Gls { weights: w.clone() },
            None => Criterion::Lefn {
                family: self.family,
                alpha: self.alpha_tilde.alpha,
            },
        }
    }

    pub fn trimmed_count(&self) -> usize {
        self.trim_mask.iter().filter(|&&k| !k).count()
    }
}

/// Sample standard deviation of the index values at `theta`.
pub fn index_sd(data: &Dataset, theta: &IndexParam) -> f64 {
    pilot::sample_sd(&data.index_values(theta))
}

/// Runs Step 1, the nuisance moment estimator, and Step 2.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let (n, d) = (data.n(), data.d());
    if n < d + 2 {
        return Err(Error::InsufficientData { needed: d + 2, got: n });
    }
    let pilot_h = config.pilot_h.unwrap_or_else(|| default_pilot_bandwidth(n));
    let (lo_q, hi_q) = config.fixed_trim_quantiles;
    let step1_trim = fixed_trim_set(data, lo_q, hi_q);
    let step1 = match &config.step1_start {
        Some(start) => step1_from(data, config.step1_criterion(), pilot_h, &step1_trim, start)?,
        None => step1_preliminary(data, config.step1_criterion(), pilot_h, &step1_trim, config.seed)?,
    };
    fit_with_step1(data, config, step1, step1_trim)
}

/// Nuisance estimation and Step 2 from an existing Step 1 result.
///
/// `step1_trim` is the fixed trim set that produced `step1`.
pub fn fit_with_step1(
    data: &Dataset,
    config: &FitConfig,
    step1: Step1Result,
    step1_trim: Vec<bool>,
) -> Result<FitResult> {
    let n = data.n();
    let pilot_h = config.pilot_h.unwrap_or_else(|| default_pilot_bandwidth(n));
    let step1_criterion = config.step1_criterion();
    let theta_n = step1.theta.clone();

    let variance_family = config.resolved_variance_family();
    let alpha = estimate_nuisance(data, variance_family, &theta_n, pilot_h, &step1_trim, config.rho)?;
    let mut warnings = Vec::new();
    if !step1.converged {
        warnings.push("step 1 optimizer reached its evaluation limit".to_string());
    }

    let gls_weights = if config.family == Family::GaussianGls {
        let r_hat = full_sample_means(data, &theta_n, pilot_h);
        let floor = variance_family.mean_lower_bound();
        let mut bad = 0usize;
        let w: Vec<f64> = r_hat
            .iter()
            .map(|r| {
                let r = match r {
                    Some(r) if *r >= floor => *r,
                    _ => {
                        bad += 1;
                        floor.max(crate::family::R_MIN)
                    }
                };
                variance_family.g_raw(r, alpha.alpha).max(f64::MIN_POSITIVE)
            })
            .collect();
        if bad > 0 {
            warnings.push(format!("{bad} GLS weights used a floored mean"));
        }
        Some(w)
    } else {
        None
    };
    let criterion = match &gls_weights {
        Some(w) => Criterion::Gls { weights: w.clone() },
        None => Criterion::Lefn {
            family: config.family,
            alpha: alpha.alpha,
        },
    };

    let sd = index_sd(data, &theta_n);
    let trim_c = config.trim_c.unwrap_or(DEFAULT_TRIM_C_STANDARDIZED / sd);
    let trim = TrimmingSpec::DensityThreshold {
        c: trim_c,
        pilot_theta: theta_n.clone(),
        pilot_h,
    };
    let trim_mask = trim.mask(data)?;

    let default_domain = SearchDomain::default_for(n, sd, &theta_n);
    let domain = SearchDomain {
        h_lo: config.h_lo.unwrap_or(default_domain.h_lo),
        h_hi: config.h_hi.unwrap_or(default_domain.h_hi),
        d_n: config.d_n.unwrap_or(default_domain.d_n),
        h_grid_size: config.h_grid_size,
    };
    let step2 = step2_joint(data, &theta_n, &criterion, &domain, &trim_mask)?;

    if step2.flat_surface {
        warnings.push("objective is flat across the trust region".to_string());
    }
    let share = step2.objective.clamped as f64 / step2.objective.contributing.max(1) as f64;
    if share > CLAMP_WARNING_SHARE {
        warnings.push(format!(
            "{:.1}% of kept observations had their smoothed mean clamped",
            100.0 * share
        ));
    }
    Ok(FitResult {
        theta_hat: step2.theta,
        h_hat: step2.h,
        alpha_tilde: alpha,
        family: config.family,
        variance_family,
        step1_criterion,
        theta_step1: theta_n,
        step1_objective: step1.objective,
        pilot_h,
        trim_c,
        domain,
        objective: step2.objective.value,
        trim_mask,
        step1_trim_mask: step1_trim,
        gls_weights,
        clamp_count: step2.objective.clamped,
        degenerate_count: step2.objective.degenerate,
        converged: step2.converged,
        optimizer_converged: step2.optimizer_converged,
        flat_surface: step2.flat_surface,
        warnings,
        trace: step2.trace,
    })
}
