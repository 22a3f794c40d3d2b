//! Linear exponential families with a nuisance parameter.
//!
//! Each family gives the log-density up to a term free of the mean,
//! `psi(y, r; alpha) = B(r, alpha) + C(r, alpha) y`, with `dB/dr + r dC/dr = 0`
//! and `1 / (dC/dr) = g(r, alpha)`, the conditional variance link.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower edge of the admissible mean domain for count and gamma families.
pub const R_MIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "poisson")]
    Poisson,
    #[serde(rename = "negbin")]
    NegBin,
    #[serde(rename = "gamma")]
    Gamma,
    /// Normal with variance `alpha`; with per-observation variances this is GLS.
    #[serde(rename = "gaussian-gls")]
    GaussianGls,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Poisson, Family::NegBin, Family::Gamma, Family::GaussianGls];

    pub fn id(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::NegBin => "negbin",
            Family::Gamma => "gamma",
            Family::GaussianGls => "gaussian-gls",
        }
    }

    /// Admissible mean domain as an open lower bound (upper bound is +inf).
    pub fn mean_lower_bound(self) -> f64 {
        match self {
            Family::GaussianGls => f64::NEG_INFINITY,
            _ => R_MIN,
        }
    }

    pub fn mean_admissible(self, r: f64) -> bool {
        match self {
            Family::GaussianGls => r.is_finite(),
            _ => r.is_finite() && r >= R_MIN,
        }
    }

    pub fn alpha_admissible(self, alpha: f64) -> bool {
        match self {
            Family::Poisson => true,
            Family::NegBin => alpha.is_finite() && alpha >= 0.0,
            Family::Gamma | Family::GaussianGls => alpha.is_finite() && alpha > 0.0,
        }
    }

    fn check(self, r: f64, alpha: f64) -> Result<()> {
        if !self.mean_admissible(r) {
            return Err(Error::Domain(format!("mean {r} outside the {} domain", self.id())));
        }
        if !self.alpha_admissible(alpha) {
            return Err(Error::Domain(format!("nuisance {alpha} outside the {} domain", self.id())));
        }
        Ok(())
    }

    /// Unchecked `B(r, alpha)`; callers guarantee admissibility.
    #[inline]
    pub(crate) fn b_raw(self, r: f64, alpha: f64) -> f64 {
        match self {
            Family::Poisson => -r,
            Family::NegBin if alpha == 0.0 => -r,
            Family::NegBin => -(alpha * r).ln_1p() / alpha,
            Family::Gamma => -alpha * r.ln(),
            Family::GaussianGls => -r * r / (2.0 * alpha),
        }
    }

    #[inline]
    pub(crate) fn c_raw(self, r: f64, alpha: f64) -> f64 {
        match self {
            Family::Poisson => r.ln(),
            Family::NegBin if alpha == 0.0 => r.ln(),
            Family::NegBin => r.ln() - (alpha * r).ln_1p(),
            Family::Gamma => -alpha / r,
            Family::GaussianGls => r / alpha,
        }
    }

    #[inline]
    pub(crate) fn dc_dr_raw(self, r: f64, alpha: f64) -> f64 {
        match self {
            Family::Poisson => 1.0 / r,
            Family::NegBin => 1.0 / (r * (1.0 + alpha * r)),
            Family::Gamma => alpha / (r * r),
            Family::GaussianGls => 1.0 / alpha,
        }
    }

    #[inline]
    pub(crate) fn psi_raw(self, y: f64, r: f64, alpha: f64) -> f64 {
        self.b_raw(r, alpha) + self.c_raw(r, alpha) * y
    }

    #[inline]
    pub(crate) fn g_raw(self, r: f64, alpha: f64) -> f64 {
        match self {
            Family::Poisson => r,
            Family::NegBin => r * (1.0 + alpha * r),
            Family::Gamma => r * r / alpha,
            Family::GaussianGls => alpha,
        }
    }

    pub fn b(self, r: f64, alpha: f64) -> Result<f64> {
        self.check(r, alpha)?;
        Ok(self.b_raw(r, alpha))
    }

    pub fn c(self, r: f64, alpha: f64) -> Result<f64> {
        self.check(r, alpha)?;
        Ok(self.c_raw(r, alpha))
    }

    pub fn db_dr(self, r: f64, alpha: f64) -> Result<f64> {
        self.check(r, alpha)?;
        Ok(match self {
            Family::Poisson => -1.0,
            Family::NegBin => -1.0 / (1.0 + alpha * r),
            Family::Gamma => -alpha / r,
            Family::GaussianGls => -r / alpha,
        })
    }

    pub fn dc_dr(self, r: f64, alpha: f64) -> Result<f64> {
        self.check(r, alpha)?;
        Ok(self.dc_dr_raw(r, alpha))
    }

    pub fn d2c_dr2(self, r: f64, alpha: f64) -> Result<f64> {
        self.check(r, alpha)?;
        Ok(match self {
            Family::Poisson => -1.0 / (r * r),
            Family::NegBin => {
                let s = 1.0 + alpha * r;
                -1.0 / (r * r) + alpha * alpha / (s * s)
            }
            Family::Gamma => -2.0 * alpha / (r * r * r),
            Family::GaussianGls => 0.0,
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown family '{s}'")))
    }
}

/// Nuisance parameter of the active family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceParam {
    pub alpha: f64,
}

/// `psi(y, r; alpha) = B(r, alpha) + C(r, alpha) y`, the log-density without `D(y, alpha)`.
pub fn psi(family: Family, y: f64, r: f64, alpha: f64) -> Result<f64> {
    family.check(r, alpha)?;
    Ok(family.psi_raw(y, r, alpha))
}

/// `d psi / dr = C'(r, alpha) (y - r)`.
pub fn d_psi_dr(family: Family, y: f64, r: f64, alpha: f64) -> Result<f64> {
    Ok(family.dc_dr(r, alpha)? * (y - r))
}

/// Conditional variance `g(r, alpha)`.
pub fn variance_link(family: Family, r: f64, alpha: f64) -> Result<f64> {
    family.check(r, alpha)?;
    Ok(family.g_raw(r, alpha))
}

/// GLS contribution `-(y - r)^2 / w`.
pub fn gls_weighted_sq(y: f64, r: f64, w: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::Domain(format!("GLS weight must be positive, got {w}")));
    }
    Ok(-(y - r).powi(2) / w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psi_examples() {
        assert_relative_eq!(psi(Family::NegBin, 1.0, 1.0, 1.0).unwrap(), -1.386_294_361_119_890_6, epsilon = 1e-12);
        assert_eq!(psi(Family::Poisson, 2.0, 1.0, 0.0).unwrap(), -1.0);
        for &r in &[0.3, 1.0, 7.5] {
            assert_relative_eq!(psi(Family::Gamma, r, r, 1.0).unwrap(), -r.ln() - 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn score_examples() {
        for fam in Family::ALL {
            assert_eq!(d_psi_dr(fam, 2.5, 2.5, 0.7).unwrap(), 0.0);
        }
        assert_eq!(d_psi_dr(Family::Poisson, 2.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(d_psi_dr(Family::NegBin, 0.0, 1.0, 1.0).unwrap(), -0.5);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance_link(Family::NegBin, 0.5, 2.0).unwrap(), 1.0);
        assert_eq!(variance_link(Family::NegBin, 3.0, 0.0).unwrap(), 3.0);
        assert_eq!(variance_link(Family::Gamma, 2.0, 4.0).unwrap(), 1.0);
    }

    #[test]
    fn gls_examples() {
        assert_eq!(gls_weighted_sq(1.5, 1.5, 3.0).unwrap(), 0.0);
        assert_eq!(gls_weighted_sq(2.0, 1.0, 1.0).unwrap(), -1.0);
        assert_eq!(gls_weighted_sq(3.0, 1.0, 2.0).unwrap(), -2.0);
        assert!(gls_weighted_sq(3.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn domain_errors() {
        assert!(psi(Family::NegBin, 1.0, 0.0, 1.0).is_err());
        assert!(psi(Family::NegBin, 1.0, 1.0, -0.1).is_err());
        assert!(psi(Family::Gamma, 1.0, 1.0, 0.0).is_err());
        assert!(variance_link(Family::Poisson, -1.0, 0.0).is_err());
        assert!(psi(Family::GaussianGls, 1.0, -3.0, 1.0).is_ok());
    }

    #[test]
    fn ids_round_trip() {
        for fam in Family::ALL {
            assert_eq!(fam.id().parse::<Family>().unwrap(), fam);
        }
        assert!("binomial".parse::<Family>().is_err());
    }

    #[test]
    fn negbin_approaches_poisson() {
        for &(y, r) in &[(0.0, 0.5), (3.0, 2.0), (10.0, 12.5)] {
            let nb = psi(Family::NegBin, y, r, 1e-8).unwrap();
            let po = psi(Family::Poisson, y, r, 0.0).unwrap();
            assert!((nb - po).abs() < 1e-6);
        }
    }
}
