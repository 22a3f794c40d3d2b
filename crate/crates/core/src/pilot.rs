//! Parametric pilot fits (OLS and log-linear Poisson) used to seed and trim Step 1.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;

fn design(data: &Dataset) -> DMatrix<f64> {
    let (n, d) = (data.n(), data.d());
    DMatrix::from_fn(n, d + 1, |i, k| if k == 0 { 1.0 } else { data.row(i)[k - 1] })
}

/// Weighted least squares `(X'WX)^{-1} X'Wy`; `None` if the system is singular.
pub(crate) fn weighted_ls(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let xtw = DMatrix::from_fn(x.ncols(), x.nrows(), |k, i| x[(i, k)] * w[i]);
    let a = &xtw * x;
    let b = &xtw * y;
    a.cholesky().map(|c| c.solve(&b))
}

/// OLS of `y` on `(1, Z)`; returns the slope vector (length d).
pub fn ols_slopes(data: &Dataset) -> Option<Vec<f64>> {
    let x = design(data);
    let y = DVector::from_column_slice(data.y());
    let w = DVector::from_element(data.n(), 1.0);
    weighted_ls(&x, &y, &w).map(|b| b.as_slice()[1..].to_vec())
}

/// Log-linear Poisson GLM of `y` on `(1, Z)` by IRLS; returns the slopes.
///
/// `None` when responses are negative or the iteration fails.
pub fn poisson_glm_slopes(data: &Dataset) -> Option<Vec<f64>> {
    if data.y().iter().any(|&v| v < 0.0) {
        return None;
    }
    let ybar = data.y().iter().sum::<f64>() / data.n() as f64;
    if ybar <= 0.0 {
        return None;
    }
    let x = design(data);
    let y = DVector::from_column_slice(data.y());
    let mut beta = DVector::zeros(x.ncols());
    beta[0] = ybar.ln();
    for _ in 0..50 {
        let eta = &x * &beta;
        let mu = eta.map(|e| e.clamp(-30.0, 30.0).exp());
        let z = DVector::from_fn(x.nrows(), |i, _| eta[i] + (y[i] - mu[i]) / mu[i]);
        let next = weighted_ls(&x, &z, &mu)?;
        let change = (&next - &beta).amax();
        beta = next;
        if !beta.iter().all(|b| b.is_finite()) {
            return None;
        }
        if change < 1e-9 {
            break;
        }
    }
    Some(beta.as_slice()[1..].to_vec())
}

/// Rescales slopes so the first equals one; `None` if the first is negligible.
pub fn normalize_direction(slopes: &[f64]) -> Option<Vec<f64>> {
    let norm = slopes.iter().map(|v| v * v).sum::<f64>().sqrt();
    let first = *slopes.first()?;
    if !(first.abs() > 1e-3 * norm) {
        return None;
    }
    Some(slopes[1..].iter().map(|v| v / first).collect())
}

/// Empirical quantile with linear interpolation (type 7).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}
