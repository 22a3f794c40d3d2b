//! Goodness-of-fit statistics for count models with a Negative Binomial variance link.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::CompensatedSum;

/// Default cut points: cells `0, 1, 2, 3, 4, 5` and `> 5`.
pub const DEFAULT_CUTS: [u64; 6] = [0, 1, 2, 3, 4, 5];

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidConfig(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    Ok(())
}

/// `P = sum (y_i - r_i)^2 / omega_i`.
pub fn pearson_stat(y: &[f64], r_hat: &[f64], omega_hat: &[f64]) -> Result<f64> {
    check_lengths(y.len(), r_hat.len())?;
    check_lengths(y.len(), omega_hat.len())?;
    let mut acc = CompensatedSum::default();
    for ((&yi, &ri), &wi) in y.iter().zip(r_hat).zip(omega_hat) {
        if !(wi > 0.0) {
            if wi == 0.0 && yi == ri {
                continue;
            }
            return Err(Error::Domain(format!("variance {wi} must be positive")));
        }
        acc.add((yi - ri).powi(2) / wi);
    }
    Ok(acc.value())
}

/// `x ln(x / m)` with `0 ln 0 = 0`.
fn xlogx_over(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / m).ln()
    }
}

/// Unit deviance of one observation; `alpha = 0` is the Poisson limit.
fn unit_deviance(y: f64, r: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 2.0 * (xlogx_over(y, r) - (y - r));
    }
    let inv = 1.0 / alpha;
    // (y + 1/alpha) ln((y + 1/alpha) / (r + 1/alpha)) via log1p for small alpha
    let second = (y + inv) * ((alpha * y).ln_1p() - (alpha * r).ln_1p());
    2.0 * (xlogx_over(y, r) - second)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("nuisance {alpha} must be nonnegative")));
    }
    Ok(())
}

/// Negative Binomial deviance `D`; `alpha = 0` gives the Poisson deviance.
pub fn deviance_stat(y: &[f64], r_hat: &[f64], alpha: f64) -> Result<f64> {
    check_lengths(y.len(), r_hat.len())?;
    check_alpha(alpha)?;
    let mut acc = CompensatedSum::default();
    for (&yi, &ri) in y.iter().zip(r_hat) {
        // a zero mean is admissible only for a zero count
        if !(ri > 0.0 || (ri == 0.0 && yi == 0.0)) {
            return Err(Error::Domain(format!("mean {ri} must be positive")));
        }
        if yi < 0.0 {
            return Err(Error::Domain(format!("count {yi} must be nonnegative")));
        }
        acc.add(unit_deviance(yi, ri, alpha));
    }
    Ok(acc.value())
}

/// Deviance pseudo R-squared against the constant-mean fit `r = mean(y)`.
pub fn r2_dev(y: &[f64], r_hat: &[f64], alpha: f64) -> Result<f64> {
    check_lengths(y.len(), r_hat.len())?;
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    if y.iter().all(|&v| v == y[0]) || !(ybar > 0.0) {
        return Err(Error::DegenerateBaseline);
    }
    let baseline = deviance_stat(y, &vec![ybar; y.len()], alpha)?;
    if !(baseline > 0.0) {
        return Err(Error::DegenerateBaseline);
    }
    Ok(1.0 - deviance_stat(y, r_hat, alpha)? / baseline)
}

/// Probabilities `P(Y = 0..=max)` under NegBin(mean `r`, nuisance `alpha`), Poisson at `alpha = 0`.
pub fn count_pmf(r: f64, alpha: f64, max: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max as usize + 1);
    let (mut p, ratio) = if alpha == 0.0 {
        ((-r).exp(), r)
    } else {
        let q = alpha * r / (1.0 + alpha * r);
        ((-(alpha * r).ln_1p() / alpha).exp(), q)
    };
    for k in 0..=max {
        out.push(p);
        let kf = k as f64;
        p *= if alpha == 0.0 {
            ratio / (kf + 1.0)
        } else {
            (kf + 1.0 / alpha) / (kf + 1.0) * ratio
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofCell {
    pub label: String,
    /// smallest count in the cell
    pub lo: u64,
    /// largest count in the cell; `None` for the open tail
    pub hi: Option<u64>,
    pub empirical: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, Copy)]
struct Span {
    lo: u64,
    hi: Option<u64>,
}

impl Span {
    fn contains(&self, y: u64) -> bool {
        y >= self.lo && self.hi.is_none_or(|h| y <= h)
    }

    fn label(&self) -> String {
        match self.hi {
            None if self.lo == 0 => ">=0".to_string(),
            None => format!(">{}", self.lo - 1),
            Some(h) if h == self.lo => h.to_string(),
            Some(h) => format!("{}-{}", self.lo, h),
        }
    }
}

fn spans(cuts: &[u64]) -> Result<Vec<Span>> {
    if cuts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("cell cut points must be strictly increasing".into()));
    }
    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut lo = 0;
    for &c in cuts {
        out.push(Span { lo, hi: Some(c) });
        lo = c + 1;
    }
    out.push(Span { lo, hi: None });
    Ok(out)
}

/// `xi = n sum (p_bar_j - p_hat_j)^2 / p_bar_j` over the cells defined by `cuts`.
///
/// Each cut point closes a cell; the final cell is the open tail. Cells with no
/// observations are merged into the next cell, and an empty tail into the one before.
pub fn chi_square_cells(y: &[f64], r_hat: &[f64], alpha: f64, cuts: &[u64]) -> Result<(f64, Vec<GofCell>)> {
    check_lengths(y.len(), r_hat.len())?;
    check_alpha(alpha)?;
    let mut counts = Vec::with_capacity(y.len());
    for &v in y {
        if !(v >= 0.0 && v.fract() == 0.0) {
            return Err(Error::Domain(format!("response {v} is not a count")));
        }
        counts.push(v as u64);
    }
    if r_hat.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
        return Err(Error::Domain("means must be nonnegative".into()));
    }

    let mut cells = spans(cuts)?;
    let observed = |s: &Span| counts.iter().filter(|&&c| s.contains(c)).count();
    let mut j = 0;
    while j < cells.len() {
        if observed(&cells[j]) > 0 {
            j += 1;
        } else if j + 1 < cells.len() {
            cells[j + 1].lo = cells[j].lo;
            cells.remove(j);
        } else if j > 0 {
            cells[j - 1].hi = None;
            cells.remove(j);
        } else {
            return Err(Error::EmptyCell);
        }
    }

    let n = y.len() as f64;
    let max_finite = cells.iter().filter_map(|s| s.hi).max().unwrap_or(0);
    let mut predicted = vec![CompensatedSum::default(); cells.len()];
    for &r in r_hat {
        let pmf = count_pmf(r, alpha, max_finite);
        let mut used = 0.0;
        for (s, acc) in cells.iter().zip(predicted.iter_mut()) {
            let mass = match s.hi {
                Some(h) => pmf[s.lo as usize..=h as usize].iter().sum::<f64>(),
                None => 1.0 - used,
            };
            used += mass;
            acc.add(mass);
        }
    }

    let mut xi = 0.0;
    let table: Vec<GofCell> = cells
        .iter()
        .zip(&predicted)
        .map(|(s, p)| {
            let empirical = observed(s) as f64 / n;
            let predicted = p.value() / n;
            xi += (empirical - predicted).powi(2) / empirical;
            GofCell {
                label: s.label(),
                lo: s.lo,
                hi: s.hi,
                empirical,
                predicted,
            }
        })
        .collect();
    Ok((n * xi, table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub n: usize,
    pub alpha: f64,
    pub mean_response: f64,
    pub pearson: f64,
    pub deviance: f64,
    /// absent when the constant-mean baseline has zero deviance
    pub r2_dev: Option<f64>,
    pub xi: f64,
    pub cells: Vec<GofCell>,
}

/// All statistics with `omega_i = r_i (1 + alpha r_i)`.
pub fn gof_report(y: &[f64], r_hat: &[f64], alpha: f64, cuts: &[u64]) -> Result<GofReport> {
    check_lengths(y.len(), r_hat.len())?;
    check_alpha(alpha)?;
    let omega: Vec<f64> = r_hat.iter().map(|&r| r * (1.0 + alpha * r)).collect();
    let pearson = pearson_stat(y, r_hat, &omega)?;
    let deviance = deviance_stat(y, r_hat, alpha)?;
    let r2 = match r2_dev(y, r_hat, alpha) {
        Ok(v) => Some(v),
        Err(Error::DegenerateBaseline) => None,
        Err(e) => return Err(e),
    };
    let (xi, cells) = chi_square_cells(y, r_hat, alpha, cuts)?;
    Ok(GofReport {
        n: y.len(),
        alpha,
        mean_response: y.iter().sum::<f64>() / y.len() as f64,
        pearson,
        deviance,
        r2_dev: r2,
        xi,
        cells,
    })
}
