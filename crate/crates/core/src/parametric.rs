//! Parametric (characteristic) construction of solutions of the
//! homogeneous Monge-Ampère equation in two variables.
//!
//! Given a scalar `R(ξ)` and a line family `y - x ξ = f(ξ)`, the field
//!
//! ```text
//! u_x = R(ξ) - ξ R'(ξ),   u_y = R'(ξ)
//! ```
//!
//! is a gradient, constant along each line, and its potential satisfies
//! `u_xx u_yy = u_xy^2`. It solves `u_x + g(u_y) = 0` exactly when
//! `R = ξ R' - g(R')`, i.e. `ξ = g'(R'(ξ))`, so the line slope is the
//! characteristic speed. [`ParametricSolution::legendre`] builds `R` that
//! way from `g` and the inverse of `g'`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::loss::Loss;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Samples used to confirm that `f(ξ) + x ξ` is monotone on the domain.
const MONOTONE_PROBES: usize = 64;
const ROOT_TOL: f64 = 1e-12;

/// Two generating functions, the ξ-interval on which the line family is
/// used, and an anchor point where `u` is known.
#[derive(Clone)]
pub struct ParametricSolution {
    r: ScalarFn,
    r_prime: ScalarFn,
    f: ScalarFn,
    pub domain: (f64, f64),
    /// `(x0, y0, u0)`
    pub anchor: (f64, f64, f64),
    /// Gauss-Legendre panels for the line integral that recovers `u`.
    pub panels: usize,
}

impl std::fmt::Debug for ParametricSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParametricSolution")
            .field("domain", &self.domain)
            .field("anchor", &self.anchor)
            .finish_non_exhaustive()
    }
}

impl ParametricSolution {
    pub fn new(
        r: impl Fn(f64) -> f64 + Send + Sync + 'static,
        r_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        domain: (f64, f64),
        anchor: (f64, f64, f64),
    ) -> Self {
        Self {
            r: Arc::new(r),
            r_prime: Arc::new(r_prime),
            f: Arc::new(f),
            domain,
            anchor,
            panels: 8,
        }
    }

    /// `R' = (g')^{-1}(ξ)` and `R = ξ R' - g(R')`, which makes the induced
    /// field solve `u_x + g(u_y) = 0` for any line family `f`.
    pub fn legendre<L: Loss + Send + 'static>(
        loss: L,
        slope_inverse: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        domain: (f64, f64),
        anchor: (f64, f64, f64),
    ) -> Self {
        let inv: ScalarFn = Arc::new(slope_inverse);
        let inv_r = inv.clone();
        let r = move |xi: f64| {
            let p = inv_r(xi);
            xi * p - loss.value(p)
        };
        let mut sol = Self::new(r, |_| 0.0, f, domain, anchor);
        sol.r_prime = inv;
        sol
    }

    /// Special case `g(z) = scale * exp(-rate * z)`:
    /// `R'(ξ) = -ln(-ξ / (scale * rate)) / rate` on `ξ < 0`.
    pub fn exponential(
        scale: f64,
        rate: f64,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        domain: (f64, f64),
        anchor: (f64, f64, f64),
    ) -> Self {
        Self::legendre(
            crate::loss::ExponentialLoss::new(scale, rate),
            move |xi: f64| -(-xi / (scale * rate)).ln() / rate,
            f,
            domain,
            anchor,
        )
    }

    /// Special case of the triangular price density on `[0, top]`:
    /// `R'(ξ) = top (1 - sqrt(-ξ))` on `-1 <= ξ <= 0`.
    pub fn triangular(
        top: f64,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        domain: (f64, f64),
        anchor: (f64, f64, f64),
    ) -> Self {
        Self::legendre(
            crate::loss::TriangularPriceLoss::new(top),
            move |xi: f64| top * (1.0 - (-xi).max(0.0).sqrt()),
            f,
            domain,
            anchor,
        )
    }

    pub fn r(&self, xi: f64) -> f64 {
        (self.r)(xi)
    }

    pub fn r_prime(&self, xi: f64) -> f64 {
        (self.r_prime)(xi)
    }

    pub fn f(&self, xi: f64) -> f64 {
        (self.f)(xi)
    }

    /// Line parameter of the characteristic through `(x, y)`.
    ///
    /// Fails when no line of the family reaches the point, or when
    /// `f(ξ) + x ξ` is not monotone on the domain (lines cross).
    pub fn resolve_xi(&self, x: f64, y: f64) -> Result<f64> {
        let (lo, hi) = self.domain;
        let phi = |xi: f64| (self.f)(xi) + x * xi - y;

        let probes: Vec<f64> = (0..=MONOTONE_PROBES)
            .map(|k| phi(lo + (hi - lo) * k as f64 / MONOTONE_PROBES as f64))
            .collect();
        if probes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("line family is not finite on [{lo}, {hi}]")));
        }
        let rising = probes.windows(2).all(|w| w[1] > w[0]);
        let falling = probes.windows(2).all(|w| w[1] < w[0]);
        if !(rising || falling) {
            return Err(Error::Numerical(format!(
                "characteristics cross: f(xi) + {x} xi is not monotone on [{lo}, {hi}]"
            )));
        }
        let (f_lo, f_hi) = (probes[0], probes[MONOTONE_PROBES]);
        if f_lo == 0.0 {
            return Ok(lo);
        }
        if f_hi == 0.0 {
            return Ok(hi);
        }
        if (f_lo > 0.0) == (f_hi > 0.0) {
            return Err(Error::Numerical(format!(
                "no characteristic of the family reaches ({x}, {y})"
            )));
        }
        let (mut a, mut b) = (lo, hi);
        let mut fa = f_lo;
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let fm = phi(mid);
            if fm == 0.0 {
                return Ok(mid);
            }
            if (fm > 0.0) == (fa > 0.0) {
                a = mid;
                fa = fm;
            } else {
                b = mid;
            }
            if (b - a).abs() <= ROOT_TOL * mid.abs().max(1.0) {
                break;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// `(u_x, u_y)` at `(x, y)`.
    pub fn gradient(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let xi = self.resolve_xi(x, y)?;
        let rp = self.r_prime(xi);
        Ok((self.r(xi) - xi * rp, rp))
    }

    /// `(u, u_x, u_y)`; `u` is the anchor value plus the line integral of
    /// the gradient along the straight segment from the anchor.
    pub fn evaluate(&self, x: f64, y: f64) -> Result<(f64, f64, f64)> {
        let (x0, y0, u0) = self.anchor;
        let (dx, dy) = (x - x0, y - y0);
        let mut acc = 0.0;
        let panels = self.panels.max(1);
        for p in 0..panels {
            let (a, b) = (p as f64 / panels as f64, (p + 1) as f64 / panels as f64);
            for &(node, weight) in rule16() {
                let s = 0.5 * (a + b) + 0.5 * (b - a) * node;
                let (gx, gy) = self.gradient(x0 + s * dx, y0 + s * dy)?;
                acc += 0.5 * (b - a) * weight * (gx * dx + gy * dy);
            }
        }
        let (ux, uy) = self.gradient(x, y)?;
        Ok((u0 + acc, ux, uy))
    }
}

/// Free-function form of [`ParametricSolution::evaluate`].
pub fn evaluate_parametric(sol: &ParametricSolution, x: f64, y: f64) -> Result<(f64, f64, f64)> {
    sol.evaluate(x, y)
}

/// `|u_x + g(u_y)|` of the induced field at `(x, y)`.
pub fn pde_residual_at<L: Loss>(sol: &ParametricSolution, loss: &L, x: f64, y: f64) -> Result<f64> {
    let (ux, uy) = sol.gradient(x, y)?;
    Ok((ux + loss.value(uy)).abs())
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on
/// the Legendre recurrence.
pub(crate) fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        out.push((-x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

fn rule16() -> &'static [(f64, f64)] {
    static RULE: std::sync::OnceLock<Vec<(f64, f64)>> = std::sync::OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}
