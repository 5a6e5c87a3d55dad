//! Loss functions driving the fluid equations.
//!
//! The grid solvers only need the value of the Hamiltonian and a bound on
//! its slope for the CFL condition, so anything convex and nonincreasing
//! can be plugged in: a discrete demand law, or one of the smooth
//! closed-form losses used for manufactured test problems.

use crate::demand::{DemandDistribution, MultiDemandDistribution};

/// Convex nonincreasing scalar loss `g`.
pub trait Loss: Sync {
    fn value(&self, z: f64) -> f64;

    /// An upper bound for `|g'(w)|` over `w >= z`.
    fn slope_bound(&self, z: f64) -> f64;
}

impl Loss for DemandDistribution {
    fn value(&self, z: f64) -> f64 {
        self.loss_g(z)
    }

    fn slope_bound(&self, z: f64) -> f64 {
        self.loss_slope_bound(z)
    }
}

impl<L: Loss + ?Sized> Loss for &L {
    fn value(&self, z: f64) -> f64 {
        (**self).value(z)
    }

    fn slope_bound(&self, z: f64) -> f64 {
        (**self).slope_bound(z)
    }
}

/// `g(z) = scale * exp(-rate * z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialLoss {
    pub scale: f64,
    pub rate: f64,
}

impl ExponentialLoss {
    pub fn new(scale: f64, rate: f64) -> Self {
        Self { scale, rate }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        -self.scale * self.rate * (-self.rate * z).exp()
    }
}

impl Loss for ExponentialLoss {
    fn value(&self, z: f64) -> f64 {
        self.scale * (-self.rate * z).exp()
    }

    fn slope_bound(&self, z: f64) -> f64 {
        self.derivative(z).abs()
    }
}

/// Loss of a price with triangular density `2 (top - p) / top^2` on
/// `[0, top]`: `g(z) = (top - z)^3 / (3 top^2)` for `z <= top`, zero above.
///
/// It is `C^2`, which makes it the standard smooth instance for residual
/// studies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangularPriceLoss {
    pub top: f64,
}

impl TriangularPriceLoss {
    pub fn new(top: f64) -> Self {
        Self { top }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        let r = (self.top - z).max(0.0);
        -(r * r) / (self.top * self.top)
    }
}

impl Loss for TriangularPriceLoss {
    fn value(&self, z: f64) -> f64 {
        let r = (self.top - z).max(0.0);
        r * r * r / (3.0 * self.top * self.top)
    }

    fn slope_bound(&self, z: f64) -> f64 {
        // |g'| is decreasing for z <= top and zero beyond
        self.derivative(z.min(self.top)).abs()
    }
}

/// Convex loss `G` of the capacity shadow prices in m dimensions,
/// nonincreasing in every argument.
pub trait MultiLoss: Sync {
    fn dim(&self) -> usize;

    fn value(&self, z: &[f64]) -> f64;

    /// Upper bound of `|dG/dz_k|` over the orthant `{w >= lo}`.
    fn slope_bound(&self, lo: &[f64], k: usize) -> f64;
}

impl MultiLoss for MultiDemandDistribution {
    fn dim(&self) -> usize {
        MultiDemandDistribution::dim(self)
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.multi_g_unchecked(z)
    }

    fn slope_bound(&self, lo: &[f64], k: usize) -> f64 {
        MultiDemandDistribution::slope_bound(self, lo, k)
    }
}

/// Views a scalar loss as a one-dimensional [`MultiLoss`].
#[derive(Debug, Clone, Copy)]
pub struct SingleAxis<L>(pub L);

impl<L: Loss> MultiLoss for SingleAxis<L> {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.0.value(z[0])
    }

    fn slope_bound(&self, lo: &[f64], _k: usize) -> f64 {
        self.0.slope_bound(lo[0])
    }
}

/// `G(z) = g(w . z)` for nonnegative weights `w`: a request that always
/// asks for `w_k` units of resource `k` with a random price.
#[derive(Debug, Clone)]
pub struct RidgeLoss<L> {
    pub inner: L,
    pub weights: Vec<f64>,
}

impl<L: Loss> RidgeLoss<L> {
    pub fn new(inner: L, weights: Vec<f64>) -> Self {
        Self { inner, weights }
    }

    fn project(&self, z: &[f64]) -> f64 {
        self.weights.iter().zip(z).map(|(w, zk)| w * zk).sum()
    }
}

impl<L: Loss> MultiLoss for RidgeLoss<L> {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.inner.value(self.project(z))
    }

    fn slope_bound(&self, lo: &[f64], k: usize) -> f64 {
        self.weights[k] * self.inner.slope_bound(self.project(lo))
    }
}

/// `G(z) = sum_k g_k(z_k)`: independent single-resource request streams.
#[derive(Debug, Clone)]
pub struct SeparableLoss<L>(pub Vec<L>);

impl<L: Loss> MultiLoss for SeparableLoss<L> {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.0.iter().zip(z).map(|(g, &zk)| g.value(zk)).sum()
    }

    fn slope_bound(&self, lo: &[f64], k: usize) -> f64 {
        self.0[k].slope_bound(lo[k])
    }
}
