//! Sandwich variance, efficiency bound, link-function bands, and the plug-in bandwidth.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::family::R_MIN;
use crate::kernel::{kernel_constants, CompensatedSum, IndexSmoother, Kernel, SortedIndex};

/// Condition number of `J_n` above which it is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// One observation's contribution to the sandwich.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichTerm {
    pub dc: f64,
    pub resid: f64,
    pub grad: Vec<f64>,
    pub trimmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcovResult {
    pub i_n: Vec<Vec<f64>>,
    pub j_n: Vec<Vec<f64>>,
    /// `J_n^{-1} I_n J_n^{-1} / n`
    pub vcov: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    /// asymptotic variance lower bound (not divided by n)
    pub bound_k: Option<Vec<Vec<f64>>>,
    pub n: usize,
}

impl VcovResult {
    /// Normal-theory intervals `theta +- z se` at level `1 - q`.
    pub fn confidence_intervals(&self, theta_free: &[f64], q: f64) -> Result<Vec<(f64, f64)>> {
        let z = normal_quantile(q)?;
        Ok(theta_free
            .iter()
            .zip(&self.std_errors)
            .map(|(t, se)| (t - z * se, t + z * se))
            .collect())
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Two-sided normal critical value `z_{1 - q/2}`.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidConfig(format!("level q must lie in (0, 1), got {q}")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - q / 2.0))
}

fn invert_checked(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sv = m.clone().svd(false, false).singular_values;
    let (max, min) = (sv.max(), sv.min());
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) || !max.is_finite() {
        return Err(Error::SingularJ(cond));
    }
    m.clone().try_inverse().ok_or(Error::SingularJ(cond))
}

/// `I_n`, `J_n`, and `vcov` from per-observation pieces; trimmed rows contribute zero.
pub fn assemble_sandwich(terms: &[SandwichTerm], n: usize) -> Result<VcovResult> {
    let k = terms
        .first()
        .map(|t| t.grad.len())
        .ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    if n < k + 1 {
        return Err(Error::InsufficientData { needed: k + 1, got: n });
    }
    if terms.iter().any(|t| t.grad.len() != k) {
        return Err(Error::InvalidConfig("gradient lengths differ".into()));
    }
    let mut i_acc = vec![CompensatedSum::default(); k * k];
    let mut j_acc = vec![CompensatedSum::default(); k * k];
    for t in terms.iter().filter(|t| !t.trimmed) {
        let w_i = t.dc * t.dc * t.resid * t.resid;
        for a in 0..k {
            for b in 0..k {
                let gg = t.grad[a] * t.grad[b];
                i_acc[a * k + b].add(w_i * gg);
                j_acc[a * k + b].add(t.dc * gg);
            }
        }
    }
    let nf = n as f64;
    let i_n = DMatrix::from_fn(k, k, |a, b| i_acc[a * k + b].value() / nf);
    let j_n = DMatrix::from_fn(k, k, |a, b| j_acc[a * k + b].value() / nf);
    let j_inv = invert_checked(&j_n)?;
    let mut vcov = &j_inv * &i_n * &j_inv / nf;
    vcov = (&vcov + vcov.transpose()) * 0.5;
    let std_errors = (0..k).map(|a| vcov[(a, a)].max(0.0).sqrt()).collect();
    Ok(VcovResult {
        i_n: to_rows(&i_n),
        j_n: to_rows(&j_n),
        vcov: to_rows(&vcov),
        std_errors,
        bound_k: None,
        n,
    })
}

/// Sandwich at `(theta_hat, h_hat)` using the full-sample smoother, plus the efficiency bound.
///
/// Observations outside the fit's trim mask, or with no kernel support, are excluded.
pub fn sandwich_from_fit(data: &Dataset, fit: &FitResult) -> Result<VcovResult> {
    if fit.trim_mask.len() != data.n() {
        return Err(Error::InvalidConfig("fit does not belong to this dataset".into()));
    }
    let criterion = fit.criterion();
    let floor = criterion.mean_floor();
    let smoother = IndexSmoother::new(data, &fit.theta_hat);
    let alpha = fit.alpha_tilde.alpha;
    let k = data.d() - 1;
    let mut terms = Vec::with_capacity(data.n());
    let mut bound_acc = vec![CompensatedSum::default(); k * k];
    for (i, (z, &y)) in data.rows().zip(data.y()).enumerate() {
        let kept = fit.trim_mask[i];
        let piece = if kept { smoother.gradient_at(z, fit.h_hat, None).ok() } else { None };
        let Some((out, grad)) = piece else {
            terms.push(SandwichTerm {
                dc: 0.0,
                resid: 0.0,
                grad: vec![0.0; k],
                trimmed: true,
            });
            continue;
        };
        let r = out.r_hat.expect("gradient_at rejects degenerate points").max(floor);
        let v = fit.variance_family.g_raw(r.max(R_MIN), alpha);
        if v > 0.0 && v.is_finite() {
            for a in 0..k {
                for b in 0..k {
                    bound_acc[a * k + b].add(grad.grad[a] * grad.grad[b] / v);
                }
            }
        }
        terms.push(SandwichTerm {
            dc: criterion.dc_dr(i, r),
            resid: y - r,
            grad: grad.grad,
            trimmed: false,
        });
    }
    let mut result = assemble_sandwich(&terms, data.n())?;
    let nf = data.n() as f64;
    let k_inv = DMatrix::from_fn(k, k, |a, b| bound_acc[a * k + b].value() / nf);
    result.bound_k = invert_checked(&k_inv).ok().map(|m| to_rows(&m));
    Ok(result)
}

/// Kernel-weighted local polynomial of degree 2 at `t`: returns `(r, r', r'')`.
pub fn local_quadratic(sorted: &SortedIndex, t: f64, h: f64) -> Option<(f64, f64, f64)> {
    let (ts, ys, _) = sorted.sorted();
    let kernel = sorted.kernel();
    let window = sorted.window(t, h);
    if window.len() < 3 {
        return None;
    }
    let mut xtx = DMatrix::<f64>::zeros(3, 3);
    let mut xty = DVector::<f64>::zeros(3);
    for p in window {
        let u = (ts[p] - t) / h;
        let w = kernel.eval(u);
        // scaled design (1, u, u^2) keeps the system well conditioned
        let x = [1.0, u, u * u];
        for a in 0..3 {
            xty[a] += w * x[a] * ys[p];
            for b in 0..3 {
                xtx[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    let sol = xtx.cholesky()?.solve(&xty);
    Some((sol[0], sol[1] / h, 2.0 * sol[2] / (h * h)))
}

/// Pilot bandwidth multiplier for derivative plug-ins.
pub const DERIVATIVE_PILOT_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBandPoint {
    pub t: f64,
    pub r_hat: f64,
    pub f_hat: f64,
    /// `beta(t) = (K1/2) (r'' + 2 r' f'/f)`
    pub bias: f64,
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
    /// band centered at `r_hat - h^2 beta`
    pub lower_bias_corrected: f64,
    pub upper_bias_corrected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBand {
    pub level: f64,
    pub h: f64,
    pub points: Vec<LinkBandPoint>,
}

/// Band at each grid point, or `OutsideSupport` for points with `f_hat <= c`.
pub fn link_band_points(data: &Dataset, fit: &FitResult, grid: &[f64], q: f64) -> Result<Vec<Result<LinkBandPoint>>> {
    let z = normal_quantile(q)?;
    let kc = kernel_constants();
    let t_data = data.index_values(&fit.theta_hat);
    let sorted = SortedIndex::new(&t_data, data.y());
    let h = fit.h_hat;
    let hp = DERIVATIVE_PILOT_FACTOR * h;
    let n = data.n() as f64;
    let point = |t: f64| -> Result<LinkBandPoint> {
        let out = sorted.smooth(t, h, None);
        let r = match out.r_hat {
            Some(r) if out.f_hat > fit.trim_c => r,
            _ => return Err(Error::OutsideSupport(t)),
        };
        let (_, r1, r2) = local_quadratic(&sorted, t, hp).ok_or(Error::OutsideSupport(t))?;
        let pilot = sorted.smooth(t, hp, None);
        let f1 = sorted.density_derivative(t, hp);
        let bias = 0.5 * kc.k1 * (r2 + 2.0 * r1 * f1 / pilot.f_hat);
        let v = fit.variance_family.g_raw(r.max(R_MIN), fit.alpha_tilde.alpha);
        let half_width = z * (kc.k2 * v / (n * h * out.f_hat)).sqrt();
        let centre = r - h * h * bias;
        Ok(LinkBandPoint {
            t,
            r_hat: r,
            f_hat: out.f_hat,
            bias,
            half_width,
            lower: r - half_width,
            upper: r + half_width,
            lower_bias_corrected: centre - half_width,
            upper_bias_corrected: centre + half_width,
        })
    };
    Ok(grid.iter().map(|&t| point(t)).collect())
}

/// Pointwise bands at level `1 - q` on `grid`.
pub fn link_band(data: &Dataset, fit: &FitResult, grid: &[f64], q: f64) -> Result<LinkBand> {
    let points = link_band_points(data, fit, grid, q)?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(LinkBand {
        level: 1.0 - q,
        h: fit.h_hat,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthDiagnostics {
    /// squared-bias constant, sign flipped so that it is positive
    pub c1: f64,
    /// variance constant, sign flipped so that it is positive
    pub c2: f64,
    pub h_opt: Option<f64>,
    pub h_hat_ratio: Option<f64>,
    pub informative: bool,
}

/// Plug-in estimates of the bias and variance constants and `h_opt = (C2 / 4 C1)^{1/5} n^{-1/5}`.
pub fn bandwidth_diagnostics(data: &Dataset, fit: &FitResult) -> Result<BandwidthDiagnostics> {
    if fit.trim_mask.len() != data.n() {
        return Err(Error::InvalidConfig("fit does not belong to this dataset".into()));
    }
    let kc = kernel_constants();
    let criterion = fit.criterion();
    let t_data = data.index_values(&fit.theta_hat);
    let sorted = SortedIndex::new(&t_data, data.y());
    let h = fit.h_hat;
    let hp = DERIVATIVE_PILOT_FACTOR * h;
    let mut c1 = CompensatedSum::default();
    let mut c2 = CompensatedSum::default();
    for (i, &t) in t_data.iter().enumerate() {
        if !fit.trim_mask[i] {
            continue;
        }
        let out = sorted.smooth(t, h, None);
        let Some(r) = out.r_hat else { continue };
        let Some((_, r1, r2)) = local_quadratic(&sorted, t, hp) else {
            continue;
        };
        let pilot = sorted.smooth(t, hp, None);
        let f1 = sorted.density_derivative(t, hp);
        let r = r.max(criterion.mean_floor());
        let dc = criterion.dc_dr(i, r);
        let v = fit.variance_family.g_raw(r.max(R_MIN), fit.alpha_tilde.alpha);
        let b = r2 + 2.0 * r1 * f1 / pilot.f_hat;
        // a bias below rounding level relative to the mean counts as zero
        let b = if (b * hp * hp).abs() <= 1e-9 * r.abs() { 0.0 } else { b };
        c1.add(0.5 * dc * b * b);
        c2.add(0.5 * dc * v / out.f_hat);
    }
    let nf = data.n() as f64;
    let c1 = kc.k1 * kc.k1 / 4.0 * c1.value() / nf;
    let c2 = kc.k2 * c2.value() / nf;
    let informative = c1 > 0.0 && c2 > 0.0 && c1.is_finite() && c2.is_finite();
    let h_opt = informative.then(|| (c2 / (4.0 * c1)).powf(0.2) * nf.powf(-0.2));
    Ok(BandwidthDiagnostics {
        c1,
        c2,
        h_opt,
        h_hat_ratio: h_opt.map(|ho| h / ho),
        informative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn term(dc: f64, resid: f64, grad: Vec<f64>) -> SandwichTerm {
        SandwichTerm {
            dc,
            resid,
            grad,
            trimmed: false,
        }
    }

    #[test]
    fn unit_sandwich() {
        let terms: Vec<_> = (0..10)
            .map(|i| term(1.0, if i % 2 == 0 { 1.0 } else { -1.0 }, vec![1.0]))
            .collect();
        let v = assemble_sandwich(&terms, 10).unwrap();
        assert_relative_eq!(v.i_n[0][0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(v.j_n[0][0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(v.vcov[0][0], 0.1, epsilon = 1e-14);
    }

    #[test]
    fn correct_specification_gives_i_equal_j() {
        let terms: Vec<_> = (0..8)
            .map(|i| {
                let dc = 0.5 + i as f64 * 0.25;
                term(dc, (1.0 / dc).sqrt(), vec![1.0 + i as f64, (i as f64).sin()])
            })
            .collect();
        let v = assemble_sandwich(&terms, 8).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert_relative_eq!(v.i_n[a][b], v.j_n[a][b], epsilon = 1e-12);
            }
        }
        let j_inv = DMatrix::from_fn(2, 2, |a, b| v.j_n[a][b]).try_inverse().unwrap() / 8.0;
        assert_relative_eq!(v.vcov[0][1], j_inv[(0, 1)], epsilon = 1e-12);
    }

    #[test]
    fn zero_gradients_are_singular() {
        let terms = vec![term(1.0, 1.0, vec![0.0, 0.0]); 5];
        assert!(matches!(assemble_sandwich(&terms, 5), Err(Error::SingularJ(_))));
    }

    #[test]
    fn trimmed_rows_do_not_count() {
        let mut terms = vec![term(1.0, 1.0, vec![1.0]); 4];
        terms.push(SandwichTerm {
            dc: 100.0,
            resid: 100.0,
            grad: vec![50.0],
            trimmed: true,
        });
        let v = assemble_sandwich(&terms, 5).unwrap();
        assert_relative_eq!(v.j_n[0][0], 0.8, epsilon = 1e-14);
    }

    #[test]
    fn local_quadratic_is_exact_on_parabolas() {
        let t: Vec<f64> = (0..60).map(|i| -3.0 + i as f64 * 0.1).collect();
        let y: Vec<f64> = t.iter().map(|v| 2.0 * v * v - v + 0.5).collect();
        let s = SortedIndex::new(&t, &y);
        let (r, r1, r2) = local_quadratic(&s, 0.3, 0.8).unwrap();
        assert_relative_eq!(r, 2.0 * 0.09 - 0.3 + 0.5, epsilon = 1e-9);
        assert_relative_eq!(r1, 2.0 * 2.0 * 0.3 - 1.0, epsilon = 1e-9);
        assert_relative_eq!(r2, 4.0, epsilon = 1e-8);
        assert!(local_quadratic(&s, 100.0, 0.8).is_none());
    }

    #[test]
    fn normal_quantiles() {
        assert_relative_eq!(normal_quantile(0.05).unwrap(), 1.959_963_984_540_054, epsilon = 1e-9);
        assert!(normal_quantile(0.0).is_err());
    }
}
