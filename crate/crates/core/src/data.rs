//! Response/covariate container and the pinned index direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Responses `y` and an `n x d` covariate matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    y: Vec<f64>,
    z: Vec<f64>,
    d: usize,
}

impl Dataset {
    pub fn new(y: Vec<f64>, z: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("at least one covariate is required".into()));
        }
        if z.len() != y.len() * d {
            return Err(Error::InvalidConfig(format!(
                "covariate buffer has {} values, expected {} x {}",
                z.len(),
                y.len(),
                d
            )));
        }
        if y.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite value in data".into()));
        }
        Ok(Self { y, z, d })
    }

    pub fn from_rows(y: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidConfig("ragged covariate rows".into()));
        }
        let z = rows.iter().flatten().copied().collect();
        Self::new(y, z, d)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.z.chunks_exact(self.d)
    }

    /// Index values `Z_i' theta` for every row.
    pub fn index_values(&self, theta: &IndexParam) -> Vec<f64> {
        debug_assert_eq!(theta.dim(), self.d);
        self.rows().map(|z| theta.project(z)).collect()
    }

    pub fn with_responses(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.z.clone(), self.d)
    }

    /// Keeps rows where `keep[i]` is true.
    pub fn subset(&self, keep: &[bool]) -> Self {
        let mut y = Vec::new();
        let mut z = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                y.push(self.y[i]);
                z.extend_from_slice(self.row(i));
            }
        }
        Self { y, z, d: self.d }
    }
}

/// Index direction with its first component pinned to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexParam {
    free: Vec<f64>,
}

impl IndexParam {
    /// Builds `(1, free...)`.
    pub fn from_free(free: Vec<f64>) -> Self {
        Self { free }
    }

    /// Builds from a full vector; fails unless the first entry is exactly one.
    pub fn from_full(theta: &[f64]) -> Result<Self> {
        match theta.split_first() {
            Some((&first, rest)) if first == 1.0 => Ok(Self { free: rest.to_vec() }),
            _ => Err(Error::InvalidConfig("first index component must equal 1".into())),
        }
    }

    pub fn free(&self) -> &[f64] {
        &self.free
    }

    pub fn dim(&self) -> usize {
        self.free.len() + 1
    }

    pub fn full(&self) -> Vec<f64> {
        std::iter::once(1.0).chain(self.free.iter().copied()).collect()
    }

    pub fn project(&self, z: &[f64]) -> f64 {
        z[0] + z[1..].iter().zip(&self.free).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Euclidean distance between free parts.
    pub fn distance(&self, other: &IndexParam) -> f64 {
        self.free
            .iter()
            .zip(&other.free)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}
