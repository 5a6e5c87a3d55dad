//! Second-order (diffusion) approximation of the supply process.
//!
//! The fluid center `s(t)` solves `ds/dt = A(u_y(t, d - s))`, where `A` is
//! the acceptance rate at the marginal value `u_y`. Fluctuations around it
//! follow the driftless SDE `dY = sqrt(A (1 - A)) dW`, and revenue
//! fluctuations `dZ = P dY` with `P` the mean accepted unit price at the
//! current threshold.

use std::io::{self, Write};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::demand::DemandDistribution;
use crate::error::{range, validation, Error, Result};
use crate::fluid::FluidField;
use crate::rng::substream;
use crate::sim::{scaled_fluctuations, PathEnsemble};
use crate::stats::{ks_critical, ks_two_sample, mean_var};

/// Default number of time steps across the whole horizon.
pub const DEFAULT_STEPS: usize = 2048;

/// Significance level of the reported KS critical value.
pub const KS_ALPHA: f64 = 0.01;

/// Relative slack under which a price counts as tied with the threshold.
/// Shadow prices read from a grid carry rounding noise, and ties are
/// accepted.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Threshold lowered by the tie tolerance.
#[inline]
pub(crate) fn tie_threshold(x: f64) -> f64 {
    x - TIE_TOLERANCE * x.abs().max(1.0)
}

/// How the acceptance coefficient is obtained from the marginal value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientMode {
    /// Probability that an arrival clears the threshold (a true
    /// Bernoulli parameter).
    AcceptProb,
    /// The loss function `g` itself, clamped into `[0, 1]`.
    VerbatimLoss,
}

/// Coefficients of the limit at one marginal value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    /// Expected units supplied per period.
    pub rate: f64,
    /// Variance of the units supplied per period.
    pub variance: f64,
    /// Mean unit price of the accepted requests.
    pub price: f64,
    /// The raw coefficient left `[0, 1]` and was clamped.
    pub clamped: bool,
}

/// Limit coefficients at threshold `x`.
///
/// Prices within [`TIE_TOLERANCE`] of `x` are accepted.
/// In [`CoefficientMode::AcceptProb`] the supplied quantity per period is
/// `Q 1{P >= x}`, whose mean and variance reduce to `A` and `A (1 - A)` for
/// unit demand. In [`CoefficientMode::VerbatimLoss`] the Bernoulli
/// parameter is `g(x)` clamped into `[0, 1]`.
pub fn coefficients(dist: &DemandDistribution, x: f64, mode: CoefficientMode) -> Coefficients {
    let (mut units, mut units_sq, mut revenue) = (0.0, 0.0, 0.0);
    let cut = tie_threshold(x);
    for a in dist.atoms() {
        if a.price >= cut {
            let q = a.quantity as f64;
            units += a.prob * q;
            units_sq += a.prob * q * q;
            revenue += a.prob * q * a.price;
        }
    }
    let price = if units > 0.0 { revenue / units } else { 0.0 };
    match mode {
        CoefficientMode::AcceptProb => Coefficients {
            rate: units,
            variance: (units_sq - units * units).max(0.0),
            price,
            clamped: false,
        },
        CoefficientMode::VerbatimLoss => {
            let raw = dist.loss_g(x);
            let c = raw.clamp(0.0, 1.0);
            Coefficients { rate: c, variance: c * (1.0 - c), price, clamped: c != raw }
        }
    }
}

/// Uniform mesh of `[t0, t1]` with step as close to `dt` as divides the
/// span.
pub fn time_mesh(t_span: (f64, f64), dt: f64) -> Result<Vec<f64>> {
    let (t0, t1) = t_span;
    if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
        return Err(validation(format!("time span [{t0}, {t1}] must be finite and increasing")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(validation("time step must be positive"));
    }
    let span = t1 - t0;
    let ratio = span / dt;
    let steps = if (ratio - ratio.round()).abs() <= 1e-9 * ratio.max(1.0) {
        ratio.round()
    } else {
        ratio.ceil()
    } as usize;
    let steps = steps.max(1);
    if steps as u64 > crate::dp::TABLE_CELL_BUDGET {
        return Err(Error::Resource(format!("{steps} time steps exceed the budget")));
    }
    let h = span / steps as f64;
    Ok((0..=steps).map(|k| if k == steps { t1 } else { t0 + k as f64 * h }).collect())
}

/// Classic RK4 for `ds/dt = rate(t, s)` on a given mesh, with every
/// component clamped into `[0, cap_k]` after each step.
pub(crate) fn rk4_clamped<F>(mesh: &[f64], caps: &[f64], rate: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
{
    let m = caps.len();
    let mut s = vec![0.0; m];
    let mut out = Vec::with_capacity(mesh.len());
    out.push(s.clone());
    let mut stage = vec![0.0; m];
    for w in mesh.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let k1 = rate(t, &s)?;
        for k in 0..m {
            stage[k] = s[k] + 0.5 * h * k1[k];
        }
        let k2 = rate(t + 0.5 * h, &stage)?;
        for k in 0..m {
            stage[k] = s[k] + 0.5 * h * k2[k];
        }
        let k3 = rate(t + 0.5 * h, &stage)?;
        for k in 0..m {
            stage[k] = s[k] + h * k3[k];
        }
        let k4 = rate(t + h, &stage)?;
        for k in 0..m {
            let next = s[k] + h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            s[k] = next.clamp(s[k].max(0.0), caps[k]);
        }
        out.push(s.clone());
    }
    Ok(out)
}

/// Sampled fluid center with the limit coefficients along it.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterPath {
    pub mode: CoefficientMode,
    pub capacity: f64,
    pub times: Vec<f64>,
    pub s: Vec<f64>,
    /// Per-period variance of the supplied units at each mesh time.
    pub variance: Vec<f64>,
    /// Mean accepted unit price at each mesh time.
    pub price: Vec<f64>,
    /// Some coefficient along the center had to be clamped.
    pub clamped: bool,
}

impl CenterPath {
    /// Piecewise-linear interpolation of mesh values.
    fn interp(&self, values: &[f64], t: f64) -> Result<f64> {
        let (t0, t1) = (self.times[0], *self.times.last().unwrap());
        let slack = 1e-9 * (t1 - t0).max(1.0);
        if !(t >= t0 - slack && t <= t1 + slack) {
            return Err(range(format!("time {t} outside [{t0}, {t1}]")));
        }
        let h = (t1 - t0) / (self.times.len() - 1) as f64;
        let pos = ((t - t0) / h).clamp(0.0, (self.times.len() - 1) as f64);
        let k = (pos.floor() as usize).min(self.times.len() - 2);
        let w = pos - k as f64;
        Ok(values[k] * (1.0 - w) + values[k + 1] * w)
    }

    pub fn s_at(&self, t: f64) -> Result<f64> {
        self.interp(&self.s, t)
    }

    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        Ok(self.interp(&self.variance, t)?.sqrt())
    }

    pub fn price_at(&self, t: f64) -> Result<f64> {
        self.interp(&self.price, t)
    }

    /// Trapezoidal `int_{t0}^{t} sigma^2`, the variance the SDE should
    /// reach at mesh time `t`.
    pub fn integrated_variance(&self, t: f64) -> Result<f64> {
        let end = self.interp(&self.variance, t)?;
        let mut acc = 0.0;
        for k in 0..self.times.len() - 1 {
            let (a, b) = (self.times[k], self.times[k + 1]);
            if b <= t {
                acc += 0.5 * (b - a) * (self.variance[k] + self.variance[k + 1]);
            } else {
                if t > a {
                    acc += 0.5 * (t - a) * (self.variance[k] + end);
                }
                break;
            }
        }
        Ok(acc)
    }

    /// `t,s,sigma,price` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,s,sigma,price")?;
        for k in 0..self.times.len() {
            writeln!(w, "{},{},{},{}", self.times[k], self.s[k], self.variance[k].sqrt(), self.price[k])?;
        }
        Ok(())
    }
}

/// Integrates the center ODE with a caller-supplied rate `rate(t, s)`.
pub fn integrate_center<F>(rate: F, capacity: f64, t_span: (f64, f64), dt: f64) -> Result<Vec<(f64, f64)>>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    if !(capacity >= 0.0) {
        return Err(validation("capacity must be nonnegative"));
    }
    let mesh = time_mesh(t_span, dt)?;
    let s = rk4_clamped(&mesh, &[capacity], |t, s| {
        if capacity - s[0] <= 0.0 {
            Ok(vec![0.0])
        } else {
            Ok(vec![rate(t, s[0])?])
        }
    })?;
    Ok(mesh.into_iter().zip(s.into_iter().map(|v| v[0])).collect())
}

/// Solves `ds/dt = A(u_y(t, d - s))` from `s(t0) = 0`, reading `u_y` from
/// `field` by bilinear interpolation.
///
/// Fails with a range error when the swept region leaves the field.
pub fn solve_center_ode(
    field: &FluidField,
    dist: &DemandDistribution,
    mode: CoefficientMode,
    d: f64,
    t_span: (f64, f64),
    dt: f64,
) -> Result<CenterPath> {
    let grid = field.grid;
    let slack = 1e-9;
    if t_span.0 < -slack || t_span.1 > grid.x_max * (1.0 + slack) {
        return Err(range(format!(
            "time span [{}, {}] leaves the field's [0, {}]",
            t_span.0, t_span.1, grid.x_max
        )));
    }
    if !(d >= 0.0) || d > grid.y_max * (1.0 + slack) {
        return Err(range(format!("capacity {d} leaves the field's [0, {}]", grid.y_max)));
    }
    let coef = |t: f64, s: f64| -> Result<Coefficients> {
        let y = (d - s).clamp(0.0, d);
        let t = t.min(grid.x_max);
        Ok(coefficients(dist, field.u_y_at(t, y)?, mode))
    };
    let mesh = time_mesh(t_span, dt)?;
    let s = rk4_clamped(&mesh, &[d], |t, s| {
        if d - s[0] <= 0.0 {
            Ok(vec![0.0])
        } else {
            Ok(vec![coef(t, s[0])?.rate])
        }
    })?;
    let s: Vec<f64> = s.into_iter().map(|v| v[0]).collect();

    let mut variance = Vec::with_capacity(mesh.len());
    let mut price = Vec::with_capacity(mesh.len());
    let mut clamped = false;
    for (&t, &sk) in mesh.iter().zip(&s) {
        let c = coef(t, sk)?;
        let exhausted = d - sk <= 0.0;
        variance.push(if exhausted { 0.0 } else { c.variance });
        price.push(c.price);
        clamped |= c.clamped;
    }
    Ok(CenterPath { mode, capacity: d, times: mesh, s, variance, price, clamped })
}

/// Euler-Maruyama paths of `(Y, Z)` with the center they fluctuate around.
#[derive(Debug, Clone, PartialEq)]
pub struct SdePathSet {
    pub n_paths: usize,
    pub seed: u64,
    pub dt: f64,
    /// Recorded times, ascending.
    pub times: Vec<f64>,
    /// Center `s(t)` at the recorded times.
    pub center: Vec<f64>,
    /// `n_paths x times.len()`, path-major.
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    /// A diffusion coefficient was clamped into range.
    pub clamped: bool,
    /// Produced outside the unit-demand setting of the limit theorem.
    pub experimental: bool,
}

impl SdePathSet {
    fn width(&self) -> usize {
        self.times.len()
    }

    pub fn y_at(&self, col: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.y[p * self.width() + col]).collect()
    }

    pub fn z_at(&self, col: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.z[p * self.width() + col]).collect()
    }

    pub fn terminal_y(&self) -> Vec<f64> {
        self.y_at(self.width() - 1)
    }

    /// Column holding time `t`, which must be a recorded time.
    pub fn column_for(&self, t: f64) -> Result<usize> {
        let tol = 1e-9 * self.times.last().unwrap().abs().max(1.0);
        self.times
            .iter()
            .position(|&r| (r - t).abs() <= tol)
            .ok_or_else(|| range(format!("time {t} was not recorded by the SDE run")))
    }

    /// `path,t,center,y,z` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "path,t,center,y,z")?;
        let width = self.width();
        for p in 0..self.n_paths {
            for c in 0..width {
                let k = p * width + c;
                writeln!(w, "{p},{},{},{},{}", self.times[c], self.center[c], self.y[k], self.z[k])?;
            }
        }
        Ok(())
    }

    /// `t,center,mean_y,var_y,mean_z,var_z` rows.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,center,mean_y,var_y,mean_z,var_z")?;
        for c in 0..self.width() {
            let (my, vy) = mean_var(&self.y_at(c));
            let (mz, vz) = mean_var(&self.z_at(c));
            writeln!(w, "{},{},{my},{vy},{mz},{vz}", self.times[c], self.center[c])?;
        }
        Ok(())
    }
}

/// Mesh and sampling parameters of an SDE run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeConfig {
    pub t_span: (f64, f64),
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Record every `stride`-th step (and the last one).
    pub stride: usize,
}

impl SdeConfig {
    /// `DEFAULT_STEPS` steps over `t_span`, every step recorded.
    pub fn new(t_span: (f64, f64), n_paths: usize, seed: u64) -> Self {
        Self {
            t_span,
            dt: (t_span.1 - t_span.0) / DEFAULT_STEPS as f64,
            n_paths,
            seed,
            stride: 1,
        }
    }
}

/// Recorded step indices for `steps` steps at `stride`.
pub(crate) fn recorded_steps(steps: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=steps).step_by(stride.max(1)).collect();
    if v.last() != Some(&steps) {
        v.push(steps);
    }
    v
}

/// Independent Euler-Maruyama paths of `m` driftless components with
/// per-step coefficients `sigma[k][step]`. Component `k` of path `p` draws
/// its normals from stream `p * m + k`. Returns, per path, the recorded
/// values of each component, component-major within the path.
pub(crate) fn em_components(
    sigma: &[Vec<f64>],
    h: f64,
    record: &[usize],
    n_paths: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let m = sigma.len();
    let steps = *record.last().unwrap();
    let root = h.sqrt();
    (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(m * record.len());
            for (k, sig) in sigma.iter().enumerate() {
                let mut rng = substream(seed, (p * m + k) as u64);
                let mut y = 0.0;
                let mut next = 0;
                for step in 0..=steps {
                    if next < record.len() && record[next] == step {
                        out.push(y);
                        next += 1;
                    }
                    if step == steps {
                        break;
                    }
                    let n: f64 = StandardNormal.sample(&mut rng);
                    y += sig[step] * root * n;
                }
            }
            out
        })
        .collect()
}

/// Simulates `dY = sigma(t) dW`, `dZ = price(t) dY` from `Y = Z = 0`.
///
/// `sigma` and `price` are evaluated at the left end of each step.
pub fn euler_maruyama<C, S, P>(center: C, sigma: S, price: P, cfg: &SdeConfig) -> Result<SdePathSet>
where
    C: Fn(f64) -> f64,
    S: Fn(f64) -> f64,
    P: Fn(f64) -> f64,
{
    let mesh = time_mesh(cfg.t_span, cfg.dt)?;
    run_on_mesh(&mesh, center, sigma, price, cfg, false)
}

fn run_on_mesh<C, S, P>(
    mesh: &[f64],
    center: C,
    sigma: S,
    price: P,
    cfg: &SdeConfig,
    clamped: bool,
) -> Result<SdePathSet>
where
    C: Fn(f64) -> f64,
    S: Fn(f64) -> f64,
    P: Fn(f64) -> f64,
{
    if cfg.n_paths == 0 {
        return Err(validation("n_paths must be positive"));
    }
    let steps = mesh.len() - 1;
    let h = (mesh[steps] - mesh[0]) / steps as f64;
    let sig: Vec<f64> = mesh[..steps].iter().map(|&t| sigma(t)).collect();
    if let Some(bad) = sig.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(validation(format!("diffusion coefficient must be finite and >= 0, got {bad}")));
    }
    let prices: Vec<f64> = mesh[..steps].iter().map(|&t| price(t)).collect();
    let record = recorded_steps(steps, cfg.stride);
    let width = record.len();

    let root = h.sqrt();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = substream(cfg.seed, p as u64);
            let (mut y, mut z) = (0.0, 0.0);
            let mut ys = Vec::with_capacity(width);
            let mut zs = Vec::with_capacity(width);
            let mut next = 0;
            for step in 0..=steps {
                if next < width && record[next] == step {
                    ys.push(y);
                    zs.push(z);
                    next += 1;
                }
                if step == steps {
                    break;
                }
                let n: f64 = StandardNormal.sample(&mut rng);
                let dy = sig[step] * root * n;
                y += dy;
                z += prices[step] * dy;
            }
            (ys, zs)
        })
        .collect();

    let mut y = Vec::with_capacity(cfg.n_paths * width);
    let mut z = Vec::with_capacity(cfg.n_paths * width);
    for (a, b) in rows {
        y.extend(a);
        z.extend(b);
    }
    Ok(SdePathSet {
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        dt: h,
        times: record.iter().map(|&k| mesh[k]).collect(),
        center: record.iter().map(|&k| center(mesh[k])).collect(),
        y,
        z,
        clamped,
        experimental: false,
    })
}

/// Runs the SDE on the center's own mesh with its coefficients.
pub fn simulate_diffusion(center: &CenterPath, n_paths: usize, seed: u64, stride: usize) -> Result<SdePathSet> {
    let mesh = &center.times;
    let index = |t: f64| {
        let h = (mesh[mesh.len() - 1] - mesh[0]) / (mesh.len() - 1) as f64;
        (((t - mesh[0]) / h).round() as usize).min(mesh.len() - 1)
    };
    let cfg = SdeConfig {
        t_span: (mesh[0], mesh[mesh.len() - 1]),
        dt: mesh[1] - mesh[0],
        n_paths,
        seed,
        stride,
    };
    run_on_mesh(
        mesh,
        |t| center.s[index(t)],
        |t| center.variance[index(t)].sqrt(),
        |t| center.price[index(t)],
        &cfg,
        center.clamped,
    )
}

/// One requested time of a Monte Carlo vs SDE comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctuationRow {
    pub t: f64,
    pub var_empirical: f64,
    pub var_sde: f64,
    pub ks_stat: f64,
    pub ks_crit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationReport {
    pub n: f64,
    pub rows: Vec<FluctuationRow>,
    /// Run outside the unit-demand theorem (batch conjecture mode).
    pub experimental: bool,
    pub clamped: bool,
}

impl FluctuationReport {
    /// `t,var_empirical,var_sde,ks_stat,ks_crit` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,var_empirical,var_sde,ks_stat,ks_crit")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.t, r.var_empirical, r.var_sde, r.ks_stat, r.ks_crit)?;
        }
        Ok(())
    }

    /// Human-readable block.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        if self.experimental {
            s.push_str("EXPERIMENTAL: batch-demand conjecture mode, no limit theorem applies\n");
        }
        if self.clamped {
            s.push_str("WARNING: diffusion coefficient clamped into [0, 1]\n");
        }
        s.push_str(&format!("scale n = {}\n", self.n));
        s.push_str("t          var_mc      var_sde     ratio    ks       ks_crit  verdict\n");
        for r in &self.rows {
            let ratio = if r.var_sde > 0.0 { r.var_empirical / r.var_sde } else { f64::NAN };
            let verdict = if r.ks_stat <= r.ks_crit { "match" } else { "differ" };
            s.push_str(&format!(
                "{:<10.6} {:<11.6} {:<11.6} {:<8.4} {:<8.5} {:<8.5} {verdict}\n",
                r.t, r.var_empirical, r.var_sde, ratio, r.ks_stat, r.ks_crit
            ));
        }
        s
    }
}

/// Compares scaled Monte Carlo fluctuations `n^{-1/2}(y(n t) - n s(t))`
/// with the SDE's `Y_t` at each requested time.
///
/// The supply count is integer valued, so before the KS test every SDE
/// sample is mapped to the fluctuation of the nearest integer count,
/// `(round(n s + sqrt(n) Y) - n s) / sqrt(n)`; variances use the raw
/// samples. Batch demand is rejected unless `allow_batch_conjecture`.
pub fn fluctuation_compare(
    dist: &DemandDistribution,
    ensemble: &PathEnsemble,
    sde: &SdePathSet,
    n: f64,
    times: &[f64],
    allow_batch_conjecture: bool,
) -> Result<FluctuationReport> {
    let batch = !dist.is_unit_demand();
    if batch && !allow_batch_conjecture {
        return Err(validation(
            "fluctuation comparison needs unit demand; enable the batch conjecture mode explicitly",
        ));
    }
    let cols: Vec<usize> = times.iter().map(|&t| sde.column_for(t)).collect::<Result<_>>()?;
    let center = |t: f64| {
        let col = sde.column_for(t).expect("requested times were checked");
        sde.center[col]
    };
    let mc = scaled_fluctuations(ensemble, center, n, times)?;
    let root = n.sqrt();
    let rows = times
        .iter()
        .zip(&cols)
        .zip(&mc)
        .map(|((&t, &col), emp)| {
            let ys = sde.y_at(col);
            let c = n * sde.center[col];
            let lattice: Vec<f64> = ys.iter().map(|&y| ((c + root * y).round() - c) / root).collect();
            FluctuationRow {
                t,
                var_empirical: mean_var(emp).1,
                var_sde: mean_var(&ys).1,
                ks_stat: ks_two_sample(emp, &lattice),
                ks_crit: ks_critical(KS_ALPHA, emp.len(), lattice.len()),
            }
        })
        .collect();
    Ok(FluctuationReport {
        n,
        rows,
        experimental: batch || sde.experimental,
        clamped: sde.clamped,
    })
}
