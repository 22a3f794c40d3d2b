//! Quartic-kernel density and Nadaraya-Watson smoothers on a scalar index.
//!
//! All sums run over the index values in sorted order and use compensated
//! (Neumaier) accumulation, so results do not depend on how callers split
//! work across threads. Only the observations inside `[t - h, t + h]` are
//! visited; the window is located by binary search on the sorted index.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, IndexParam};
use crate::error::{Error, Result};

/// Densities below this value are reported as degenerate instead of divided by.
pub const DENSITY_GUARD: f64 = 1e-12;

/// Second moment and roughness of a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    pub k1: f64,
    pub k2: f64,
}

/// A symmetric second-order kernel supported on `[-1, 1]`.
pub trait Kernel: Copy + Send + Sync {
    fn eval(&self, u: f64) -> f64;
    fn derivative(&self, u: f64) -> f64;
    fn constants(&self) -> KernelConstants;
}

/// `K(u) = 15/16 (1 - u^2)^2` on `[-1, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Quartic;

impl Kernel for Quartic {
    #[inline]
    fn eval(&self, u: f64) -> f64 {
        if u.abs() >= 1.0 {
            0.0
        } else {
            let a = 1.0 - u * u;
            0.9375 * a * a
        }
    }

    #[inline]
    fn derivative(&self, u: f64) -> f64 {
        if u.abs() >= 1.0 {
            0.0
        } else {
            -3.75 * u * (1.0 - u * u)
        }
    }

    fn constants(&self) -> KernelConstants {
        KernelConstants {
            k1: 1.0 / 7.0,
            k2: 5.0 / 7.0,
        }
    }
}

pub fn kernel_eval(u: f64) -> f64 {
    Quartic.eval(u)
}

pub fn kernel_constants() -> KernelConstants {
    Quartic.constants()
}

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Smoother output at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherOutput {
    /// `gamma_hat / f_hat`, or `None` when the density is below [`DENSITY_GUARD`].
    pub r_hat: Option<f64>,
    pub f_hat: f64,
    pub gamma_hat: f64,
}

impl SmootherOutput {
    fn from_sums(weight_sum: f64, weighted_y: f64, norm: f64) -> Self {
        let f_hat = weight_sum / norm;
        let gamma_hat = weighted_y / norm;
        let r_hat = (f_hat >= DENSITY_GUARD).then(|| gamma_hat / f_hat);
        Self {
            r_hat,
            f_hat,
            gamma_hat,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.r_hat.is_none()
    }
}

/// Index values sorted once, with responses carried along.
#[derive(Debug, Clone)]
pub struct SortedIndex<K: Kernel = Quartic> {
    kernel: K,
    t: Vec<f64>,
    y: Vec<f64>,
    /// sorted position -> original observation id
    order: Vec<usize>,
    /// original observation id -> sorted position
    rank: Vec<usize>,
}

impl SortedIndex<Quartic> {
    pub fn new(index_values: &[f64], responses: &[f64]) -> Self {
        Self::with_kernel(Quartic, index_values, responses)
    }
}

impl<K: Kernel> SortedIndex<K> {
    pub fn with_kernel(kernel: K, index_values: &[f64], responses: &[f64]) -> Self {
        assert_eq!(index_values.len(), responses.len());
        let mut order: Vec<usize> = (0..index_values.len()).collect();
        order.sort_by(|&a, &b| index_values[a].total_cmp(&index_values[b]).then(a.cmp(&b)));
        let mut rank = vec![0; order.len()];
        for (pos, &id) in order.iter().enumerate() {
            rank[id] = pos;
        }
        Self {
            kernel,
            t: order.iter().map(|&i| index_values[i]).collect(),
            y: order.iter().map(|&i| responses[i]).collect(),
            order,
            rank,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn kernel(&self) -> K {
        self.kernel
    }

    /// Sorted positions `j` with `|t - t_j| < h`.
    #[inline]
    pub(crate) fn window(&self, t: f64, h: f64) -> Range<usize> {
        let lo = self.t.partition_point(|&v| v <= t - h);
        let hi = self.t.partition_point(|&v| v < t + h);
        lo..hi.max(lo)
    }

    /// Sorted index values and responses, for callers that walk windows themselves.
    pub(crate) fn sorted(&self) -> (&[f64], &[f64], &[usize]) {
        (&self.t, &self.y, &self.order)
    }

    /// Smoother at `t`, optionally leaving out original observation `exclude`.
    pub fn smooth(&self, t: f64, h: f64, exclude: Option<usize>) -> SmootherOutput {
        let skip = exclude.map(|i| self.rank[i]);
        let mut kw = CompensatedSum::default();
        let mut yw = CompensatedSum::default();
        for j in self.window(t, h) {
            if Some(j) == skip {
                continue;
            }
            let w = self.kernel.eval((t - self.t[j]) / h);
            kw.add(w);
            yw.add(w * self.y[j]);
        }
        let m = self.len() - usize::from(skip.is_some());
        SmootherOutput::from_sums(kw.value(), yw.value(), m as f64 * h)
    }

    /// Leave-one-out smoother at every observation's own index value, in original order.
    pub fn loo_at_data(&self, h: f64) -> Vec<SmootherOutput> {
        self.at_data(h, true)
    }

    /// Full-sample smoother at every observation's own index value, in original order.
    pub fn full_at_data(&self, h: f64) -> Vec<SmootherOutput> {
        self.at_data(h, false)
    }

    fn at_data(&self, h: f64, leave_out: bool) -> Vec<SmootherOutput> {
        let n = self.len();
        let norm = (n - usize::from(leave_out)) as f64 * h;
        let mut out = vec![
            SmootherOutput {
                r_hat: None,
                f_hat: 0.0,
                gamma_hat: 0.0
            };
            n
        ];
        for p in 0..n {
            let t = self.t[p];
            let mut kw = CompensatedSum::default();
            let mut yw = CompensatedSum::default();
            for j in self.window(t, h) {
                if leave_out && j == p {
                    continue;
                }
                let w = self.kernel.eval((t - self.t[j]) / h);
                kw.add(w);
                yw.add(w * self.y[j]);
            }
            out[self.order[p]] = SmootherOutput::from_sums(kw.value(), yw.value(), norm);
        }
        out
    }

    /// Kernel density derivative `f'(t) = (n h^2)^{-1} sum K'((t - t_j)/h)`.
    pub fn density_derivative(&self, t: f64, h: f64) -> f64 {
        let mut acc = CompensatedSum::default();
        for j in self.window(t, h) {
            acc.add(self.kernel.derivative((t - self.t[j]) / h));
        }
        acc.value() / (self.len() as f64 * h * h)
    }
}

/// Full-sample Nadaraya-Watson smoother at `t`.
pub fn nw_smooth(t: f64, index_values: &[f64], responses: &[f64], h: f64) -> Result<SmootherOutput> {
    check_inputs(index_values, responses, h, 1)?;
    Ok(SortedIndex::new(index_values, responses).smooth(t, h, None))
}

/// Leave-one-out smoother at `t` with observation `i` removed and `(n-1)^{-1}` normalization.
pub fn nw_smooth_loo(
    i: usize,
    t: f64,
    index_values: &[f64],
    responses: &[f64],
    h: f64,
) -> Result<SmootherOutput> {
    check_inputs(index_values, responses, h, 2)?;
    if i >= index_values.len() {
        return Err(Error::Domain(format!("observation {i} out of range")));
    }
    Ok(SortedIndex::new(index_values, responses).smooth(t, h, Some(i)))
}

fn check_inputs(index_values: &[f64], responses: &[f64], h: f64, min_n: usize) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("bandwidth must be positive, got {h}")));
    }
    if index_values.len() != responses.len() {
        return Err(Error::Domain("index and response lengths differ".into()));
    }
    if index_values.len() < min_n {
        return Err(Error::InsufficientData {
            needed: min_n,
            got: index_values.len(),
        });
    }
    Ok(())
}

/// Derivative of the smoother with respect to the free index components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexGradient {
    pub grad: Vec<f64>,
}

/// Smoother over a dataset projected on a fixed direction; supports index gradients.
#[derive(Debug, Clone)]
pub struct IndexSmoother<'a> {
    data: &'a Dataset,
    theta: IndexParam,
    sorted: SortedIndex,
}

impl<'a> IndexSmoother<'a> {
    pub fn new(data: &'a Dataset, theta: &IndexParam) -> Self {
        let t = data.index_values(theta);
        Self {
            data,
            theta: theta.clone(),
            sorted: SortedIndex::new(&t, data.y()),
        }
    }

    pub fn theta(&self) -> &IndexParam {
        &self.theta
    }

    pub fn sorted(&self) -> &SortedIndex {
        &self.sorted
    }

    pub fn smooth_at(&self, z: &[f64], h: f64, exclude: Option<usize>) -> SmootherOutput {
        self.sorted.smooth(self.theta.project(z), h, exclude)
    }

    /// Smoother value and its gradient in the free components of theta at covariate `z`.
    ///
    /// `theta` enters both the evaluation point `z' theta` and every `Z_j' theta`.
    pub fn gradient_at(
        &self,
        z: &[f64],
        h: f64,
        exclude: Option<usize>,
    ) -> Result<(SmootherOutput, IndexGradient)> {
        let out = self.smooth_at(z, h, exclude);
        let r = out.r_hat.ok_or(Error::DegenerateDensity(out.f_hat))?;
        let t = self.theta.project(z);
        let (ts, ys, order) = self.sorted.sorted();
        let kernel = self.sorted.kernel();
        let k = self.theta.free().len();
        let mut weight = CompensatedSum::default();
        let mut acc = vec![CompensatedSum::default(); k];
        for p in self.sorted.window(t, h) {
            let j = order[p];
            if Some(j) == exclude {
                continue;
            }
            let u = (t - ts[p]) / h;
            weight.add(kernel.eval(u));
            let coef = (ys[p] - r) * kernel.derivative(u) / h;
            if coef == 0.0 {
                continue;
            }
            let zj = self.data.row(j);
            for (a, c) in acc.iter_mut().enumerate() {
                c.add(coef * (z[a + 1] - zj[a + 1]));
            }
        }
        let denom = weight.value();
        Ok((
            out,
            IndexGradient {
                grad: acc.iter().map(|c| c.value() / denom).collect(),
            },
        ))
    }
}

/// Gradient of the full-sample smoother `r_hat(z' theta; theta)` in the free components of theta.
pub fn index_gradient(z: &[f64], theta: &IndexParam, data: &Dataset, h: f64) -> Result<IndexGradient> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("bandwidth must be positive, got {h}")));
    }
    if z.len() != data.d() || theta.dim() != data.d() {
        return Err(Error::Domain("dimension mismatch".into()));
    }
    IndexSmoother::new(data, theta).gradient_at(z, h, None).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quartic_values() {
        assert_eq!(kernel_eval(0.0), 0.9375);
        assert_eq!(kernel_eval(1.0), 0.0);
        assert_eq!(kernel_eval(-1.0), 0.0);
        assert_eq!(kernel_eval(0.5), 0.52734375);
        assert_eq!(kernel_eval(0.3), kernel_eval(-0.3));
        assert_eq!(kernel_eval(2.5), 0.0);
    }

    #[test]
    fn quartic_derivative_matches_difference() {
        for &u in &[-0.9, -0.4, 0.0, 0.2, 0.75] {
            let e = 1e-6;
            let fd = (kernel_eval(u + e) - kernel_eval(u - e)) / (2.0 * e);
            assert_relative_eq!(Quartic.derivative(u), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn symmetric_pair_averages() {
        let out = nw_smooth(0.0, &[-0.5, 0.5], &[0.0, 2.0], 1.0).unwrap();
        assert_relative_eq!(out.r_hat.unwrap(), 1.0, epsilon = 1e-15);
        let out = nw_smooth(0.25, &[-0.5, 0.5], &[0.0, 2.0], 1.0).unwrap();
        // 2 K(0.25) / (K(0.75) + K(0.25))
        assert_relative_eq!(out.r_hat.unwrap(), 1.642_335_766_423_357_8, epsilon = 1e-12);
    }

    #[test]
    fn loo_with_two_points_returns_other_response() {
        let out = nw_smooth_loo(0, 0.5, &[0.0, 0.5], &[3.0, 7.0], 1.0).unwrap();
        assert_eq!(out.r_hat, Some(7.0));
    }

    #[test]
    fn constant_response_reproduced() {
        let t = [0.1, 0.4, -0.3, 0.9, 1.3];
        let y = [4.0; 5];
        for &x in &[0.0, 0.5, 1.0] {
            let out = nw_smooth(x, &t, &y, 0.6).unwrap();
            assert_relative_eq!(out.r_hat.unwrap(), 4.0, epsilon = 1e-14);
            let out = nw_smooth_loo(1, x, &t, &y, 0.6).unwrap();
            assert_relative_eq!(out.r_hat.unwrap(), 4.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn empty_window_is_degenerate() {
        let out = nw_smooth(10.0, &[0.0, 1.0], &[1.0, 2.0], 0.5).unwrap();
        assert!(out.is_degenerate());
        assert_eq!(out.f_hat, 0.0);
    }

    #[test]
    fn invalid_arguments() {
        assert!(nw_smooth(0.0, &[0.0], &[1.0], 0.0).is_err());
        assert!(nw_smooth(0.0, &[0.0, 1.0], &[1.0], 1.0).is_err());
        assert!(nw_smooth_loo(0, 0.0, &[0.0], &[1.0], 1.0).is_err());
        assert!(nw_smooth_loo(3, 0.0, &[0.0, 1.0], &[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn degenerate_gradient_errors() {
        let data = Dataset::from_rows(vec![1.0, 2.0], &[vec![0.0, 0.0], vec![0.1, 0.0]]).unwrap();
        let theta = IndexParam::from_free(vec![1.0]);
        let err = index_gradient(&[50.0, 0.0], &theta, &data, 0.5).unwrap_err();
        assert!(matches!(err, Error::DegenerateDensity(_)));
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1.0);
        for _ in 0..10 {
            s.add(1e-16);
        }
        s.add(-1.0);
        assert_relative_eq!(s.value(), 1e-15, epsilon = 1e-30);
    }
}
