//! The stochastic knapsack with `m` resource types.
//!
//! Axis 0 of every multi-dimensional grid is scaled elapsed time `x0`;
//! axes `1..=m` are the scaled remaining capacities. Requests carry a total
//! reward (not a unit price), and a request is feasible only if every
//! component fits. For `m = 1` each routine performs the same floating
//! point operations, in the same order, as its one-dimensional counterpart
//! applied to [`DemandDistribution::to_multi`] or [`SingleAxis`], so the
//! outputs coincide bit for bit.
//!
//! [`DemandDistribution::to_multi`]: crate::demand::DemandDistribution::to_multi
//! [`SingleAxis`]: crate::loss::SingleAxis

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::demand::MultiDemandDistribution;
use crate::diffusion::{em_components, recorded_steps, rk4_clamped, tie_threshold, time_mesh, CoefficientMode};
use crate::dp::{check_budget, ORACLE_LEAF_BUDGET};
use crate::error::{range, validation, Error, Result};
use crate::fluid::{noise_floor, InteriorResidual};
use crate::gridio::{Axis, GridData};
use crate::interp::multilinear;
use crate::loss::MultiLoss;

/// Largest capacity dimension the grid solver accepts.
pub const MAX_GRID_DIM: usize = 3;

/// Rows smaller than this are swept on the calling thread.
const PARALLEL_ROW: usize = 4096;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

fn decode(mut c: usize, shape: &[usize], out: &mut [usize]) {
    for k in (0..shape.len()).rev() {
        out[k] = c % shape[k];
        c /= shape[k];
    }
}

/// Dense table `V(t, d^1, ..., d^m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiValueTable {
    horizon: usize,
    capacities: Vec<usize>,
    values: Vec<f64>,
}

impl MultiValueTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn capacities(&self) -> &[usize] {
        &self.capacities
    }

    /// Row-major values, `t` outer then capacity axes in order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn shape(&self) -> Vec<usize> {
        self.capacities.iter().map(|&w| w + 1).collect()
    }

    fn slice_len(&self) -> usize {
        self.capacities.iter().map(|&w| w + 1).product()
    }

    fn offset(&self, d: &[usize]) -> usize {
        let st = strides(&self.shape());
        d.iter().zip(&st).map(|(a, b)| a * b).sum()
    }

    fn check(&self, t: usize, d: &[usize]) -> Result<()> {
        if d.len() != self.capacities.len() {
            return Err(validation(format!(
                "capacity vector has {} components, table has {}",
                d.len(),
                self.capacities.len()
            )));
        }
        if t > self.horizon || d.iter().zip(&self.capacities).any(|(a, w)| a > w) {
            return Err(range(format!(
                "(t={t}, d={d:?}) outside table with T={} W={:?}",
                self.horizon, self.capacities
            )));
        }
        Ok(())
    }

    pub fn value(&self, t: usize, d: &[usize]) -> Result<f64> {
        self.check(t, d)?;
        Ok(self.values[t * self.slice_len() + self.offset(d)])
    }

    /// Unchecked lookup; panics outside the table.
    pub fn get(&self, t: usize, d: &[usize]) -> f64 {
        self.value(t, d).expect("index inside table")
    }

    fn continuation(&self, t: usize, d: &[usize]) -> f64 {
        if t >= self.horizon {
            0.0
        } else {
            self.values[(t + 1) * self.slice_len() + self.offset(d)]
        }
    }

    /// Accept iff the request fits and `r + V(t+1, d-q) >= V(t+1, d)`.
    pub fn accept(&self, t: usize, d: &[usize], reward: f64, q: &[u32]) -> Result<bool> {
        self.check(t, d)?;
        if q.len() != d.len() || q.contains(&0) {
            return Err(validation("request needs one positive quantity per resource"));
        }
        if q.iter().zip(d).any(|(&qk, &dk)| qk as usize > dk) {
            return Ok(false);
        }
        let rest: Vec<usize> = d.iter().zip(q).map(|(&dk, &qk)| dk - qk as usize).collect();
        Ok(reward + self.continuation(t, &rest) >= self.continuation(t, d))
    }

    /// `t,d1,...,dm,value` rows in storage order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let m = self.capacities.len();
        let head: Vec<String> = (1..=m).map(|k| format!("d{k}")).collect();
        writeln!(w, "t,{},value", head.join(","))?;
        let shape = self.shape();
        let n = self.slice_len();
        let mut d = vec![0usize; m];
        for t in 0..=self.horizon {
            for c in 0..n {
                decode(c, &shape, &mut d);
                let cols: Vec<String> = d.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{t},{},{}", cols.join(","), self.values[t * n + c])?;
            }
        }
        Ok(())
    }
}

/// Backward recursion with per-request reward, for capacities
/// `capacities` and last period `horizon`.
pub fn solve_dp_multi(
    dist: &MultiDemandDistribution,
    capacities: &[usize],
    horizon: usize,
) -> Result<MultiValueTable> {
    let m = dist.dim();
    if capacities.len() != m {
        return Err(validation(format!(
            "capacity vector has {} components, distribution has {m}",
            capacities.len()
        )));
    }
    if horizon < 1 {
        return Err(validation("horizon must be >= 1"));
    }
    let cells = capacities
        .iter()
        .try_fold(horizon as u64 + 1, |acc, &w| acc.checked_mul(w as u64 + 1));
    check_budget(cells, "multi value table")?;

    let shape: Vec<usize> = capacities.iter().map(|&w| w + 1).collect();
    let st = strides(&shape);
    let n: usize = shape.iter().product();
    let atom_offsets: Vec<usize> = dist
        .atoms()
        .iter()
        .map(|a| a.quantities.iter().zip(&st).map(|(&q, s)| q as usize * s).sum())
        .collect();
    let mut dvec = vec![0usize; m];
    let mut feasible = vec![false; n * dist.atoms().len()];
    let mut tail = vec![0.0; n];
    let mut d64 = vec![0u64; m];
    for c in 0..n {
        decode(c, &shape, &mut dvec);
        for (a_idx, a) in dist.atoms().iter().enumerate() {
            feasible[c * dist.atoms().len() + a_idx] =
                a.quantities.iter().zip(&dvec).all(|(&q, &dk)| q as usize <= dk);
        }
        for (o, &v) in d64.iter_mut().zip(&dvec) {
            *o = v as u64;
        }
        tail[c] = dist.theta_tail_unchecked(&d64);
    }
    let stay = dist.no_arrival_prob();
    let na = dist.atoms().len();

    let mut values = vec![0.0; (horizon + 1) * n];
    for c in 0..n {
        let mut v = 0.0;
        for (a_idx, a) in dist.atoms().iter().enumerate() {
            if feasible[c * na + a_idx] {
                v += a.prob * a.reward;
            }
        }
        values[horizon * n + c] = v;
    }

    let cell = |c: usize, next: &[f64]| {
        let keep = next[c];
        let mut v = keep * (stay + tail[c]);
        for (a_idx, a) in dist.atoms().iter().enumerate() {
            if feasible[c * na + a_idx] {
                v += a.prob * (a.reward + next[c - atom_offsets[a_idx]]).max(keep);
            }
        }
        v
    };
    for t in (0..horizon).rev() {
        let (head, rest) = values.split_at_mut((t + 1) * n);
        let row = &mut head[t * n..];
        let next = &rest[..n];
        if n >= PARALLEL_ROW {
            row.par_iter_mut().enumerate().for_each(|(c, out)| *out = cell(c, next));
        } else {
            for (c, out) in row.iter_mut().enumerate() {
                *out = cell(c, next);
            }
        }
    }
    Ok(MultiValueTable { horizon, capacities: capacities.to_vec(), values })
}

/// Exhaustive optimal expected reward from period `t` with capacities `d`.
pub fn multi_enumeration_oracle(
    dist: &MultiDemandDistribution,
    capacities: &[usize],
    horizon: usize,
    t: usize,
) -> Result<f64> {
    if capacities.len() != dist.dim() {
        return Err(validation("capacity vector length differs from the dimension"));
    }
    if t > horizon {
        return Err(range(format!("start period {t} beyond horizon {horizon}")));
    }
    let branches = dist.atoms().len() as u64 + 1;
    let periods = (horizon - t + 1) as u32;
    match branches.checked_pow(periods) {
        Some(n) if n <= ORACLE_LEAF_BUDGET => {}
        _ => {
            return Err(Error::Resource(format!(
                "enumeration tree {branches}^{periods} exceeds {ORACLE_LEAF_BUDGET} leaves"
            )))
        }
    }
    let mut d = capacities.to_vec();
    Ok(enumerate_multi(dist, &mut d, t, horizon))
}

fn enumerate_multi(dist: &MultiDemandDistribution, d: &mut [usize], s: usize, horizon: usize) -> f64 {
    if s > horizon {
        return 0.0;
    }
    let reject = enumerate_multi(dist, d, s + 1, horizon);
    let mut total = dist.no_arrival_prob() * reject;
    for a in dist.atoms() {
        let fits = a.quantities.iter().zip(d.iter()).all(|(&q, &dk)| q as usize <= dk);
        let best = if fits {
            for (dk, &q) in d.iter_mut().zip(&a.quantities) {
                *dk -= q as usize;
            }
            let take = a.reward + enumerate_multi(dist, d, s + 1, horizon);
            for (dk, &q) in d.iter_mut().zip(&a.quantities) {
                *dk += q as usize;
            }
            take.max(reject)
        } else {
            reject
        };
        total += a.prob * best;
    }
    total
}

/// Extents and cell counts of a grid over `(x0, x1, ..., xm)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiGridSpec {
    pub extents: Vec<f64>,
    pub cells: Vec<usize>,
}

impl MultiGridSpec {
    pub fn new(extents: Vec<f64>, cells: Vec<usize>) -> Self {
        Self { extents, cells }
    }

    /// Number of capacity axes.
    pub fn dim(&self) -> usize {
        self.extents.len() - 1
    }

    pub fn step(&self, axis: usize) -> f64 {
        self.extents[axis] / self.cells[axis] as f64
    }

    pub fn steps(&self) -> Vec<f64> {
        (0..self.extents.len()).map(|a| self.step(a)).collect()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.cells.iter().map(|&c| c + 1).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.extents.len() != self.cells.len() || self.extents.len() < 2 {
            return Err(validation("grid needs a time axis and at least one capacity axis"));
        }
        if self.dim() > MAX_GRID_DIM {
            return Err(validation(format!(
                "grid solver supports at most {MAX_GRID_DIM} capacity axes"
            )));
        }
        if self.extents.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(validation("grid extents must be positive and finite"));
        }
        if self.cells.iter().any(|&c| c < 1) {
            return Err(validation("grid needs at least one cell per axis"));
        }
        let nodes = self.cells.iter().try_fold(1u64, |acc, &c| acc.checked_mul(c as u64 + 1));
        check_budget(nodes, "multi fluid grid")?;
        Ok(())
    }
}

/// Values and gradient of the multi-dimensional fluid solution, row-major
/// with axis 0 outer. `grad[a]` holds `du/dx_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFluidField {
    pub grid: MultiGridSpec,
    pub u: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
}

impl MultiFluidField {
    /// Field sampled from a closed form, with the solver's differences.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: MultiGridSpec, f: F) -> Result<Self> {
        grid.validate()?;
        let shape = grid.shape();
        let steps = grid.steps();
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut x = vec![0.0; shape.len()];
        let u = (0..n)
            .map(|c| {
                decode(c, &shape, &mut idx);
                for a in 0..shape.len() {
                    x[a] = idx[a] as f64 * steps[a];
                }
                f(&x)
            })
            .collect();
        Ok(Self::with_derivatives(grid, u))
    }

    fn with_derivatives(grid: MultiGridSpec, u: Vec<f64>) -> Self {
        let shape = grid.shape();
        let st = strides(&shape);
        let steps = grid.steps();
        let mut idx = vec![0usize; shape.len()];
        let mut grad = vec![vec![0.0; u.len()]; shape.len()];
        for k in 0..u.len() {
            decode(k, &shape, &mut idx);
            for a in 0..shape.len() {
                let (s, h, last) = (st[a], steps[a], shape[a] - 1);
                grad[a][k] = if idx[a] == 0 {
                    (u[k + s] - u[k]) / h
                } else if idx[a] == last {
                    (u[k] - u[k - s]) / h
                } else {
                    (u[k + s] - u[k - s]) / (2.0 * h)
                };
            }
        }
        Self { grid, u, grad }
    }

    pub fn u_at(&self, point: &[f64]) -> Result<f64> {
        multilinear(&self.u, &self.grid.shape(), &self.grid.steps(), point)
    }

    pub fn grad_at(&self, point: &[f64]) -> Result<Vec<f64>> {
        let (shape, steps) = (self.grid.shape(), self.grid.steps());
        self.grad.iter().map(|g| multilinear(g, &shape, &steps, point)).collect()
    }

    pub fn to_grid_data(&self) -> GridData {
        let axes = self
            .grid
            .extents
            .iter()
            .zip(&self.grid.cells)
            .map(|(&e, &c)| Axis { nodes: c as u64 + 1, min: 0.0, max: e })
            .collect();
        let mut fields = vec![("u".to_string(), self.u.clone())];
        for (a, g) in self.grad.iter().enumerate() {
            fields.push((format!("du_dx{a}"), g.clone()));
        }
        GridData { axes, fields }
    }

    pub fn from_grid_data(data: &GridData) -> Result<Self> {
        if data.axes.iter().any(|a| a.min != 0.0 || a.nodes < 2) {
            return Err(validation("fluid grids start at the origin with >= 2 nodes per axis"));
        }
        let grid = MultiGridSpec::new(
            data.axes.iter().map(|a| a.max).collect(),
            data.axes.iter().map(|a| a.nodes as usize - 1).collect(),
        );
        grid.validate()?;
        let n: usize = grid.shape().iter().product();
        let get = |name: &str| {
            data.field(name)
                .filter(|v| v.len() == n)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| validation(format!("missing or malformed field {name}")))
        };
        let u = get("u")?;
        let grad = (0..data.axes.len()).map(|a| get(&format!("du_dx{a}"))).collect::<Result<_>>()?;
        Ok(Self { grid, u, grad })
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        self.to_grid_data().write(w)
    }

    pub fn read_binary<R: io::Read>(r: R) -> Result<Self> {
        Self::from_grid_data(&GridData::read(r)?)
    }
}

/// Marches `u_{x0} + G(u_{x1}, ..., u_{xm}) = 0` backward from the
/// terminal slice `u(X, .) = h`, with `u = 0` on every face `x_k = 0`.
///
/// Each node uses backward (upwind) differences along the capacity axes.
/// The scheme is monotone when `dx0 * sum_k L_k / dx_k <= 1`, where `L_k`
/// bounds `|dG/dz_k|` above the smallest terminal slopes; otherwise the
/// call fails naming the smallest stable time cell count.
/// Terminal slice `h` on the capacity nodes and the smallest interior
/// terminal slope along each axis, after validating the data.
fn terminal_slice<H: Fn(&[f64]) -> f64>(terminal: &H, grid: &MultiGridSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = grid.dim();
    let shape = grid.shape();
    let steps = grid.steps();
    let cap_shape = &shape[1..];
    let cap_steps = &steps[1..];
    let cst = strides(cap_shape);
    let n: usize = cap_shape.iter().product();

    let mut idx = vec![0usize; m];
    let mut y = vec![0.0; m];
    let mut h = Vec::with_capacity(n);
    for c in 0..n {
        decode(c, cap_shape, &mut idx);
        for k in 0..m {
            y[k] = idx[k] as f64 * cap_steps[k];
        }
        h.push(terminal(&y));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(validation("terminal data must be finite"));
    }
    let mut lo = vec![f64::INFINITY; m];
    for c in 0..n {
        decode(c, cap_shape, &mut idx);
        if idx.contains(&0) && h[c].abs() > 1e-12 {
            return Err(validation(format!("terminal data must vanish on the faces, got {}", h[c])));
        }
        let interior = idx.iter().all(|&i| i > 0);
        for k in 0..m {
            if idx[k] > 0 {
                let diff = h[c] - h[c - cst[k]];
                if diff < 0.0 {
                    return Err(validation("terminal data must be nondecreasing along every axis"));
                }
                if interior {
                    lo[k] = lo[k].min(diff / cap_steps[k]);
                }
            }
        }
    }
    for v in lo.iter_mut() {
        *v = if v.is_finite() { v.max(0.0) } else { 0.0 };
    }
    Ok((h, lo))
}

fn cfl_speed<G: MultiLoss>(loss: &G, lo: &[f64], grid: &MultiGridSpec) -> f64 {
    (0..grid.dim()).map(|k| loss.slope_bound(lo, k) / grid.step(k + 1)).sum()
}

/// Smallest number of time cells `n0` that satisfies the CFL bound for
/// the capacity resolution of `grid` (whose own `n0` is ignored).
pub fn min_stable_time_cells<G, H>(loss: &G, terminal: H, grid: &MultiGridSpec) -> Result<usize>
where
    G: MultiLoss,
    H: Fn(&[f64]) -> f64,
{
    grid.validate()?;
    let (_, lo) = terminal_slice(&terminal, grid)?;
    Ok(((grid.extents[0] * cfl_speed(loss, &lo, grid)).ceil() as usize).max(1))
}

pub fn solve_fluid_multi<G, H>(loss: &G, terminal: H, grid: MultiGridSpec) -> Result<MultiFluidField>
where
    G: MultiLoss,
    H: Fn(&[f64]) -> f64,
{
    grid.validate()?;
    let m = grid.dim();
    if loss.dim() != m {
        return Err(validation(format!("loss has dimension {}, grid has {m}", loss.dim())));
    }
    let steps = grid.steps();
    let shape = grid.shape();
    let cap_shape = &shape[1..];
    let cap_steps = &steps[1..];
    let cst = strides(cap_shape);
    let n: usize = cap_shape.iter().product();
    let (h, lo) = terminal_slice(&terminal, &grid)?;

    let speed = cfl_speed(loss, &lo, &grid);
    if steps[0] * speed > 1.0 + 1e-12 {
        let need = ((grid.extents[0] * speed).ceil() as usize).max(1);
        return Err(Error::Numerical(format!(
            "CFL violated: dx0 * sum_k L_k / dx_k = {} > 1; use n0 >= {need}",
            steps[0] * speed
        )));
    }

    let n0 = grid.cells[0];
    let mut u = vec![0.0; (n0 + 1) * n];
    u[n0 * n..].copy_from_slice(&h);
    let interior: Vec<bool> = (0..n)
        .map(|c| {
            let mut id = vec![0usize; m];
            decode(c, cap_shape, &mut id);
            id.iter().all(|&i| i > 0)
        })
        .collect();
    for c in 0..n {
        if !interior[c] {
            u[n0 * n + c] = 0.0;
        }
    }
    let dx0 = steps[0];
    let node = |c: usize, cur: &[f64]| -> f64 {
        if !interior[c] {
            return 0.0;
        }
        let mut z = [0.0f64; MAX_GRID_DIM];
        for k in 0..m {
            z[k] = (cur[c] - cur[c - cst[k]]) / cap_steps[k];
        }
        cur[c] + dx0 * loss.value(&z[..m])
    };
    for i in (1..=n0).rev() {
        let (head, tail) = u.split_at_mut(i * n);
        let cur = &tail[..n];
        let prev = &mut head[(i - 1) * n..];
        if n >= PARALLEL_ROW {
            prev.par_iter_mut().enumerate().for_each(|(c, out)| *out = node(c, cur));
        } else {
            for (c, out) in prev.iter_mut().enumerate() {
                *out = node(c, cur);
            }
        }
    }
    Ok(MultiFluidField::with_derivatives(grid, u))
}

/// `|u_{x0} + G(grad_x u)|` at interior nodes from the stored gradients.
/// `max |V(t, d) / n - u(t / n, d / n)|` over every lattice point of
/// `table`.
pub fn scaled_dp_error_multi(table: &MultiValueTable, field: &MultiFluidField, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(validation("scale must be positive"));
    }
    if table.capacities().len() != field.grid.dim() {
        return Err(validation("table and field dimensions differ"));
    }
    let nf = n as f64;
    let caps = table.capacities();
    let slice: usize = caps.iter().map(|c| c + 1).product();
    let mut worst: f64 = 0.0;
    let mut d = vec![0usize; caps.len()];
    let mut point = vec![0.0; caps.len() + 1];
    for t in 0..=table.horizon() {
        point[0] = t as f64 / nf;
        for flat in 0..slice {
            let mut rest = flat;
            for k in (0..caps.len()).rev() {
                d[k] = rest % (caps[k] + 1);
                rest /= caps[k] + 1;
                point[k + 1] = d[k] as f64 / nf;
            }
            let u = field.u_at(&point)?;
            worst = worst.max((table.get(t, &d) / nf - u).abs());
        }
    }
    Ok(worst)
}

pub fn pde_residual_multi<G: MultiLoss>(field: &MultiFluidField, loss: &G) -> InteriorResidual {
    let shape = field.grid.shape();
    let m = shape.len() - 1;
    let mut idx = vec![0usize; shape.len()];
    let mut values = Vec::new();
    let mut z = vec![0.0; m];
    for c in 0..field.u.len() {
        decode(c, &shape, &mut idx);
        if idx.iter().zip(&shape).all(|(&i, &s)| i > 0 && i + 1 < s) {
            for k in 0..m {
                z[k] = field.grad[k + 1][c];
            }
            values.push((field.grad[0][c] + loss.value(&z)).abs());
        }
    }
    let max_abs = values.iter().copied().fold(0.0, f64::max);
    InteriorResidual { values, max_abs, normalized: max_abs }
}

/// All permutations of `0..n` in lexicographic order with their signs.
fn permutations(n: usize) -> Vec<(Vec<usize>, f64)> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out.into_iter()
        .map(|p| {
            let mut inversions = 0;
            for i in 0..n {
                for j in i + 1..n {
                    if p[i] > p[j] {
                        inversions += 1;
                    }
                }
            }
            (p, if inversions % 2 == 0 { 1.0 } else { -1.0 })
        })
        .collect()
}

/// `det(D^2 u)` at interior nodes from central second differences,
/// expanded over permutations. The normalized value divides the largest
/// magnitude by the largest single permutation product over the same
/// nodes, and is zero when that scale is at rounding level.
pub fn hessian_det_residual(field: &MultiFluidField) -> Result<InteriorResidual> {
    let lo = vec![0.0; field.grid.extents.len()];
    hessian_det_residual_window(field, &lo, &field.grid.extents)
}

/// [`hessian_det_residual`] restricted to interior nodes whose
/// coordinates lie in the box `[lo, hi]`.
pub fn hessian_det_residual_window(field: &MultiFluidField, lo: &[f64], hi: &[f64]) -> Result<InteriorResidual> {
    let shape = field.grid.shape();
    if lo.len() != shape.len() || hi.len() != shape.len() {
        return Err(validation("window needs one bound per axis"));
    }
    let dims = shape.len();
    if field.grid.cells.iter().any(|&c| c < 6) {
        return Err(validation("need at least 5 interior nodes per axis"));
    }
    let st = strides(&shape);
    let h = field.grid.steps();
    let u = &field.u;
    let perms = permutations(dims);
    let mut idx = vec![0usize; dims];
    let mut hess = vec![0.0; dims * dims];
    let mut values = Vec::new();
    let mut scale: f64 = 0.0;
    for k in 0..u.len() {
        decode(k, &shape, &mut idx);
        if !idx.iter().zip(&shape).all(|(&i, &s)| i > 0 && i + 1 < s) {
            continue;
        }
        let inside = (0..dims).all(|a| {
            let x = idx[a] as f64 * h[a];
            x >= lo[a] - 1e-12 && x <= hi[a] + 1e-12
        });
        if !inside {
            continue;
        }
        for a in 0..dims {
            let sa = st[a];
            hess[a * dims + a] = (u[k + sa] - 2.0 * u[k] + u[k - sa]) / (h[a] * h[a]);
            for b in a + 1..dims {
                let sb = st[b];
                let v = (u[k + sa + sb] - u[k + sa - sb] - u[k - sa + sb] + u[k - sa - sb])
                    / (4.0 * h[a] * h[b]);
                hess[a * dims + b] = v;
                hess[b * dims + a] = v;
            }
        }
        let mut det = 0.0;
        for (p, sign) in &perms {
            let mut prod = hess[p[0]];
            for (row, &col) in p.iter().enumerate().skip(1) {
                prod *= hess[row * dims + col];
            }
            det += sign * prod;
            scale = scale.max(prod.abs());
        }
        values.push(det);
    }
    let max_abs = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let max_u = u.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min_h = h.iter().copied().fold(f64::INFINITY, f64::min);
    let normalized = if scale > noise_floor(max_u, min_h) { max_abs / scale } else { 0.0 };
    Ok(InteriorResidual { values, max_abs, normalized })
}

type VecFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type ScalarFnN = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type MatFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Parametric solution of `det(D^2 u) = 0` in `m + 1` variables from a
/// scalar `R(xi)` and a scalar `L(xi)`, `xi` in `R^m`.
///
/// With the characteristic map `Q = (D^2 R)^{-1} DL`, the point
/// `(x0, x)` carries the parameter solving `x - xi x0 = Q(xi)`, and
///
/// ```text
/// u_{x0} = R - xi . DR,   u_{xj} = R_j,
/// u      = x0 (R - xi . DR) + x . DR - L + offset.
/// ```
#[derive(Clone)]
pub struct MultiParametric {
    pub dim: usize,
    r: ScalarFnN,
    dr: VecFn,
    d2r: MatFn,
    l: ScalarFnN,
    dl: VecFn,
    pub offset: f64,
    /// Starting point of the Newton iteration.
    pub guess: Vec<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl std::fmt::Debug for MultiParametric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MultiParametric")
            .field("dim", &self.dim)
            .field("guess", &self.guess)
            .finish_non_exhaustive()
    }
}

/// Result of [`evaluate_parametric_multi`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiEvaluation {
    pub u: f64,
    /// `(u_{x0}, u_{x1}, ..., u_{xm})`
    pub gradient: Vec<f64>,
    pub xi: Vec<f64>,
    pub iterations: usize,
}

impl MultiParametric {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        r: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        dr: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        d2r: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        l: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        dl: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        guess: Vec<f64>,
    ) -> Self {
        Self {
            dim,
            r: Arc::new(r),
            dr: Arc::new(dr),
            d2r: Arc::new(d2r),
            l: Arc::new(l),
            dl: Arc::new(dl),
            offset: 0.0,
            guess,
            max_iter: 100,
            tol: 1e-13,
        }
    }

    /// Legendre-compatible `R` for the separable loss
    /// `G(z) = sum_k scale exp(-rate z_k)`:
    /// `R_k = -ln(-xi_k / (scale rate)) / rate` on `xi_k < 0`, so the
    /// induced field solves `u_{x0} + G(u_{x1}, ..., u_{xm}) = 0`.
    pub fn exponential(
        dim: usize,
        scale: f64,
        rate: f64,
        l: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        dl: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        guess: Vec<f64>,
    ) -> Self {
        let p = move |xi: f64| -(-xi / (scale * rate)).ln() / rate;
        Self::new(
            dim,
            move |xi| xi.iter().map(|&x| x * p(x) - scale * (-rate * p(x)).exp()).sum(),
            move |xi| xi.iter().map(|&x| p(x)).collect(),
            move |xi| DMatrix::from_diagonal(&DVector::from_iterator(xi.len(), xi.iter().map(|&x| -1.0 / (rate * x)))),
            l,
            dl,
            guess,
        )
    }

    pub fn r(&self, xi: &[f64]) -> f64 {
        (self.r)(xi)
    }

    pub fn dr(&self, xi: &[f64]) -> Vec<f64> {
        (self.dr)(xi)
    }

    /// The characteristic map `Q(xi) = (D^2 R)^{-1} DL`.
    pub fn q_map(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let hess = (self.d2r)(xi);
        let rhs = DVector::from_vec((self.dl)(xi));
        let lu = hess.lu();
        lu.solve(&rhs)
            .map(|v| v.iter().copied().collect())
            .ok_or_else(|| Error::Numerical(format!("D^2 R is singular at xi = {xi:?}")))
    }
}

/// Resolves the parameter of `(x0, x)` by Newton's method on
/// `x - xi x0 - Q(xi) = 0` (Jacobian of `Q` by central differences) and
/// returns the induced value and gradient.
pub fn evaluate_parametric_multi(sol: &MultiParametric, point: &[f64]) -> Result<MultiEvaluation> {
    let m = sol.dim;
    if point.len() != m + 1 {
        return Err(validation(format!("point needs {} coordinates", m + 1)));
    }
    if sol.guess.len() != m {
        return Err(validation("Newton guess has the wrong dimension"));
    }
    let (x0, x) = (point[0], &point[1..]);
    let residual = |xi: &[f64]| -> Result<DVector<f64>> {
        let q = sol.q_map(xi)?;
        Ok(DVector::from_iterator(m, (0..m).map(|j| x[j] - xi[j] * x0 - q[j])))
    };
    let mut xi = sol.guess.clone();
    let mut f = residual(&xi)?;
    let scale = 1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut iterations = 0;
    while f.amax() > sol.tol * scale {
        if iterations >= sol.max_iter {
            return Err(Error::Numerical(format!(
                "Newton did not converge after {iterations} iterations; last iterate xi = {xi:?}, residual {}",
                f.amax()
            )));
        }
        let mut jac = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            let step = 1e-6 * xi[j].abs().max(1e-3);
            let mut up = xi.clone();
            let mut dn = xi.clone();
            up[j] += step;
            dn[j] -= step;
            let (qu, qd) = (sol.q_map(&up)?, sol.q_map(&dn)?);
            for i in 0..m {
                jac[(i, j)] = -(qu[i] - qd[i]) / (2.0 * step);
            }
            jac[(j, j)] -= x0;
        }
        let delta = jac
            .lu()
            .solve(&f)
            .ok_or_else(|| Error::Numerical(format!("singular Newton Jacobian at xi = {xi:?}")))?;
        for j in 0..m {
            xi[j] -= delta[j];
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("Newton diverged; last iterate xi = {xi:?}")));
        }
        f = residual(&xi)?;
        iterations += 1;
    }
    let r = sol.r(&xi);
    let dr = sol.dr(&xi);
    let u0 = r - xi.iter().zip(&dr).map(|(a, b)| a * b).sum::<f64>();
    let u = x0 * u0 + x.iter().zip(&dr).map(|(a, b)| a * b).sum::<f64>() - (sol.l)(&xi) + sol.offset;
    let mut gradient = vec![u0];
    gradient.extend(dr);
    Ok(MultiEvaluation { u, gradient, xi, iterations })
}

/// Per-component limit coefficients at shadow prices `z`.
///
/// Returns `(rates, variances, clamped)`: in accept-probability mode the
/// supply of resource `k` per period is `Q^k 1{reward >= q . z}` (ties
/// within the tie tolerance accepted); in
/// verbatim mode every component uses the Bernoulli parameter `G(z)`
/// clamped into `[0, 1]`.
pub fn multi_coefficients(
    dist: &MultiDemandDistribution,
    z: &[f64],
    mode: CoefficientMode,
) -> (Vec<f64>, Vec<f64>, bool) {
    let m = dist.dim();
    match mode {
        CoefficientMode::AcceptProb => {
            let mut units = vec![0.0; m];
            let mut units_sq = vec![0.0; m];
            for a in dist.atoms() {
                if a.reward >= tie_threshold(a.weighted(z)) {
                    for k in 0..m {
                        let q = a.quantities[k] as f64;
                        units[k] += a.prob * q;
                        units_sq[k] += a.prob * q * q;
                    }
                }
            }
            let var = (0..m).map(|k| (units_sq[k] - units[k] * units[k]).max(0.0)).collect();
            (units, var, false)
        }
        CoefficientMode::VerbatimLoss => {
            let raw = dist.multi_g_unchecked(z);
            let c = raw.clamp(0.0, 1.0);
            (vec![c; m], vec![c * (1.0 - c); m], c != raw)
        }
    }
}

/// Jointly integrated centers `s^k(t)` with per-component coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCenterPath {
    pub mode: CoefficientMode,
    pub capacity: Vec<f64>,
    pub times: Vec<f64>,
    /// `s[step][k]`
    pub s: Vec<Vec<f64>>,
    /// `variance[step][k]`
    pub variance: Vec<Vec<f64>>,
    pub clamped: bool,
}

/// One vector RK4 for `ds^k/dt = rate_k(grad u(t, d - s))`, reading the
/// capacity gradient from `field`.
pub fn solve_centers_multi(
    field: &MultiFluidField,
    dist: &MultiDemandDistribution,
    mode: CoefficientMode,
    d: &[f64],
    t_span: (f64, f64),
    dt: f64,
) -> Result<MultiCenterPath> {
    let m = dist.dim();
    if d.len() != m || field.grid.dim() != m {
        return Err(validation("capacity, distribution and field dimensions differ"));
    }
    let slack = 1e-9;
    let x_max = field.grid.extents[0];
    if t_span.0 < -slack || t_span.1 > x_max * (1.0 + slack) {
        return Err(range(format!(
            "time span [{}, {}] leaves the field's [0, {x_max}]",
            t_span.0, t_span.1
        )));
    }
    for k in 0..m {
        let top = field.grid.extents[k + 1];
        if !(d[k] >= 0.0) || d[k] > top * (1.0 + slack) {
            return Err(range(format!("capacity {} leaves the field's [0, {top}]", d[k])));
        }
    }
    let shape = field.grid.shape();
    let steps = field.grid.steps();
    let coef = |t: f64, s: &[f64]| -> Result<(Vec<f64>, Vec<f64>, bool)> {
        let mut point = Vec::with_capacity(m + 1);
        point.push(t.min(x_max));
        for k in 0..m {
            point.push((d[k] - s[k]).clamp(0.0, d[k]));
        }
        let z = (1..=m)
            .map(|a| multilinear(&field.grad[a], &shape, &steps, &point))
            .collect::<Result<Vec<f64>>>()?;
        Ok(multi_coefficients(dist, &z, mode))
    };
    let exhausted = |s: &[f64]| (0..m).any(|k| d[k] - s[k] <= 0.0);
    let mesh = time_mesh(t_span, dt)?;
    let s = rk4_clamped(&mesh, d, |t, s| {
        if exhausted(s) {
            Ok(vec![0.0; m])
        } else {
            Ok(coef(t, s)?.0)
        }
    })?;
    let mut variance = Vec::with_capacity(mesh.len());
    let mut clamped = false;
    for (&t, sk) in mesh.iter().zip(&s) {
        let (_, var, c) = coef(t, sk)?;
        variance.push(if exhausted(sk) { vec![0.0; m] } else { var });
        clamped |= c;
    }
    Ok(MultiCenterPath { mode, capacity: d.to_vec(), times: mesh, s, variance, clamped })
}

/// Paths of the `m` component fluctuations `dY^k = sigma_k dW^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSdePathSet {
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub dt: f64,
    pub times: Vec<f64>,
    /// `centers[col][k]`
    pub centers: Vec<Vec<f64>>,
    /// Per path, component-major blocks of `times.len()` values.
    pub y: Vec<Vec<f64>>,
    pub clamped: bool,
}

impl MultiSdePathSet {
    /// Samples of `Y^k` at recorded column `col`.
    pub fn y_at(&self, col: usize, k: usize) -> Vec<f64> {
        let w = self.times.len();
        self.y.iter().map(|p| p[k * w + col]).collect()
    }

    /// `path,t,k,center,y` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "path,t,k,center,y")?;
        let width = self.times.len();
        for (p, row) in self.y.iter().enumerate() {
            for k in 0..self.dim {
                for c in 0..width {
                    writeln!(w, "{p},{},{k},{},{}", self.times[c], self.centers[c][k], row[k * width + c])?;
                }
            }
        }
        Ok(())
    }
}

/// Euler-Maruyama on the centers' mesh with independent drivers; path
/// `p` component `k` uses random stream `p * m + k`.
pub fn multi_sde(center: &MultiCenterPath, n_paths: usize, seed: u64, stride: usize) -> Result<MultiSdePathSet> {
    if n_paths == 0 {
        return Err(validation("n_paths must be positive"));
    }
    let m = center.capacity.len();
    let mesh = &center.times;
    let steps = mesh.len() - 1;
    let h = (mesh[steps] - mesh[0]) / steps as f64;
    let sigma: Vec<Vec<f64>> = (0..m)
        .map(|k| (0..steps).map(|i| center.variance[i][k].sqrt()).collect())
        .collect();
    let record = recorded_steps(steps, stride);
    let y = em_components(&sigma, h, &record, n_paths, seed);
    Ok(MultiSdePathSet {
        dim: m,
        n_paths,
        seed,
        dt: h,
        times: record.iter().map(|&i| mesh[i]).collect(),
        centers: record.iter().map(|&i| center.s[i].clone()).collect(),
        y,
        clamped: center.clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{Atom, DemandDistribution, MultiAtom};
    use crate::diffusion::{simulate_diffusion, solve_center_ode};
    use crate::dp::solve_dp;
    use crate::fluid::{monge_ampere_residual, solve_grid, FluidField, GridSpec};
    use crate::loss::{SeparableLoss, SingleAxis, TriangularPriceLoss};

    fn pair() -> MultiDemandDistribution {
        MultiDemandDistribution::new(
            2,
            vec![MultiAtom::new(3.0, vec![1, 1], 0.3), MultiAtom::new(1.0, vec![1, 2], 0.4)],
            0.3,
        )
        .unwrap()
    }

    #[test]
    fn certain_identical_arrivals() {
        let dist = MultiDemandDistribution::new(2, vec![MultiAtom::new(1.0, vec![1, 1], 1.0)], 0.0).unwrap();
        let horizon = 4;
        let table = solve_dp_multi(&dist, &[3, 6], horizon).unwrap();
        for t in 0..=horizon {
            for a in 0..=3 {
                for b in 0..=6 {
                    let want = a.min(b).min(horizon - t + 1) as f64;
                    assert_eq!(table.get(t, &[a, b]), want);
                }
            }
        }
        let empty = solve_dp_multi(&MultiDemandDistribution::empty(2), &[2, 2], 3).unwrap();
        assert!(empty.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_oracle_and_policy() {
        let dist = pair();
        let table = solve_dp_multi(&dist, &[3, 3], 3).unwrap();
        for a in 0..=3 {
            for b in 0..=3 {
                let o = multi_enumeration_oracle(&dist, &[a, b], 3, 0).unwrap();
                assert!((table.get(0, &[a, b]) - o).abs() < 1e-9);
            }
        }
        assert!(!table.accept(0, &[0, 3], 3.0, &[1, 1]).unwrap());
        assert!(table.accept(0, &[3, 3], 3.0, &[1, 1]).unwrap());
        assert!(matches!(table.value(0, &[4, 0]), Err(Error::Range(_))));
        assert!(matches!(solve_dp_multi(&dist, &[4000, 4000], 100), Err(Error::Resource(_))));
    }

    #[test]
    fn csv_has_one_column_per_axis() {
        let table = solve_dp_multi(&pair(), &[1, 1], 1).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,d1,d2,value\n0,0,0,0\n0,0,1,0\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 4);
    }

    #[test]
    fn one_dimensional_embedding_is_bit_identical() {
        let dist = DemandDistribution::new(
            vec![Atom::new(2.0, 1, 0.3), Atom::new(1.0, 2, 0.25), Atom::new(0.5, 1, 0.25)],
            0.2,
        )
        .unwrap();
        let one = solve_dp(&dist, 17, 23).unwrap();
        let multi = solve_dp_multi(&dist.to_multi(), &[17], 23).unwrap();
        assert_eq!(one.values(), multi.values());

        let grid = GridSpec::new(1.0, 1.0, 120, 60);
        let f1 = solve_grid(&dist, |_| 0.0, grid).unwrap();
        let fm = solve_fluid_multi(
            &SingleAxis(&dist),
            |_| 0.0,
            MultiGridSpec::new(vec![1.0, 1.0], vec![120, 60]),
        )
        .unwrap();
        assert_eq!(f1.u, fm.u);
        assert_eq!(f1.u_x, fm.grad[0]);
        assert_eq!(f1.u_y, fm.grad[1]);

        let smooth = |x: f64, y: f64| (x * y).sin() + x * x * y;
        let g1 = FluidField::from_fn(GridSpec::new(1.0, 2.0, 12, 9), smooth).unwrap();
        let gm = MultiFluidField::from_fn(MultiGridSpec::new(vec![1.0, 2.0], vec![12, 9]), |p| smooth(p[0], p[1]))
            .unwrap();
        assert_eq!(monge_ampere_residual(&g1).unwrap(), hessian_det_residual(&gm).unwrap());
    }

    #[test]
    fn one_dimensional_diffusion_embedding_is_bit_identical() {
        let dist = DemandDistribution::new(vec![Atom::new(1.0, 1, 0.3), Atom::new(2.0, 1, 0.3)], 0.4).unwrap();
        let f1 = solve_grid(&dist, |_| 0.0, GridSpec::new(1.0, 1.0, 100, 100)).unwrap();
        let fm = solve_fluid_multi(&SingleAxis(&dist), |_| 0.0, MultiGridSpec::new(vec![1.0, 1.0], vec![100, 100]))
            .unwrap();
        let c1 = solve_center_ode(&f1, &dist, CoefficientMode::AcceptProb, 0.4, (0.0, 1.0), 1.0 / 256.0).unwrap();
        let cm = solve_centers_multi(&fm, &dist.to_multi(), CoefficientMode::AcceptProb, &[0.4], (0.0, 1.0), 1.0 / 256.0)
            .unwrap();
        let sm: Vec<f64> = cm.s.iter().map(|v| v[0]).collect();
        assert_eq!(c1.s, sm);
        let vm: Vec<f64> = cm.variance.iter().map(|v| v[0]).collect();
        assert_eq!(c1.variance, vm);
        let p1 = simulate_diffusion(&c1, 64, 3, 16).unwrap();
        let pm = multi_sde(&cm, 64, 3, 16).unwrap();
        assert_eq!(p1.times, pm.times);
        assert_eq!(p1.y, pm.y.concat());
    }

    #[test]
    fn accept_all_region_is_linear() {
        let dist = pair();
        let grid = MultiGridSpec::new(vec![1.0, 2.0, 3.0], vec![40, 40, 60]);
        let f = solve_fluid_multi(&dist, |_| 0.0, grid).unwrap();
        let e = dist.mean_reward();
        for &(x0, a, b) in &[(0.5, 1.5, 2.5), (0.8, 1.0, 2.0), (1.0, 0.5, 0.5)] {
            let u = f.u_at(&[x0, a, b]).unwrap();
            assert!((u - (1.0 - x0) * e).abs() < 1e-12, "u {u}");
        }
    }

    #[test]
    fn terminal_and_faces() {
        let h = |y: &[f64]| (y[0] - y[0] * y[0] / 4.0) + (y[1] - y[1] * y[1] / 4.0);
        let loss = SeparableLoss(vec![TriangularPriceLoss::new(1.0); 2]);
        let grid = MultiGridSpec::new(vec![1.0, 1.0, 1.0], vec![20, 20, 20]);
        let f = solve_fluid_multi(&loss, |y| if y[0] == 0.0 || y[1] == 0.0 { 0.0 } else { h(y) }, grid.clone())
            .unwrap();
        let last = 20 * 21 * 21;
        for a in 0..=20 {
            for b in 0..=20 {
                let y = [grid.step(1) * a as f64, grid.step(2) * b as f64];
                let want = if a == 0 || b == 0 { 0.0 } else { h(&y) };
                assert_eq!(f.u[last + a * 21 + b], want);
            }
        }
        for i in 0..=20 {
            assert_eq!(f.u[i * 441], 0.0);
        }
        let bad = solve_fluid_multi(&loss, |y| y[0] + y[1], MultiGridSpec::new(vec![1.0, 1.0, 1.0], vec![2, 20, 20]));
        assert!(matches!(bad, Err(Error::Validation(_))));
        let cfl = solve_fluid_multi(&pair(), |_| 0.0, MultiGridSpec::new(vec![1.0, 1.0, 1.0], vec![2, 40, 40]));
        match cfl {
            Err(Error::Numerical(msg)) => assert!(msg.contains("use n0 >=")),
            other => panic!("expected CFL refusal, got {other:?}"),
        }
    }

    #[test]
    fn binary_round_trip() {
        let f = MultiFluidField::from_fn(MultiGridSpec::new(vec![1.0, 2.0, 3.0], vec![3, 4, 5]), |p| p[0] * p[1] + p[2])
            .unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(MultiFluidField::read_binary(buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn hessian_determinant_manufactured() {
        let g = MultiGridSpec::new(vec![1.0, 1.0, 1.0], vec![8, 8, 8]);
        let affine = MultiFluidField::from_fn(g.clone(), |p| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2]).unwrap();
        assert_eq!(hessian_det_residual(&affine).unwrap().normalized, 0.0);
        let square = MultiFluidField::from_fn(g.clone(), |p| p[0] * p[0]).unwrap();
        assert_eq!(hessian_det_residual(&square).unwrap().max_abs, 0.0);
        let full = MultiFluidField::from_fn(g.clone(), |p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).unwrap();
        let r = hessian_det_residual(&full).unwrap();
        assert!((r.max_abs - 8.0).abs() < 1e-9 && (r.normalized - 1.0).abs() < 1e-12);
        let coarse = MultiFluidField::from_fn(MultiGridSpec::new(vec![1.0, 1.0], vec![4, 8]), |p| p[0]).unwrap();
        assert!(hessian_det_residual(&coarse).is_err());
    }

    #[test]
    fn permutation_signs() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], (vec![0, 1, 2], 1.0));
        assert_eq!(p[1], (vec![0, 2, 1], -1.0));
        assert_eq!(p.iter().map(|(_, s)| s).sum::<f64>(), 0.0);
    }

    fn quadratic(m: usize, c: Vec<f64>) -> MultiParametric {
        // R = |xi|^2 / 2 + xi . 1, L = c . xi: Q = c constant
        let c2 = c.clone();
        MultiParametric::new(
            m,
            |xi| xi.iter().map(|v| 0.5 * v * v + v).sum(),
            |xi| xi.iter().map(|v| v + 1.0).collect(),
            |xi| DMatrix::identity(xi.len(), xi.len()),
            move |xi| xi.iter().zip(&c).map(|(a, b)| a * b).sum(),
            move |_| c2.clone(),
            vec![0.0; m],
        )
    }

    #[test]
    fn parametric_quadratic_is_closed_form() {
        let sol = quadratic(2, vec![0.5, -0.25]);
        let ev = evaluate_parametric_multi(&sol, &[2.0, 1.5, 0.75]).unwrap();
        // x - 2 xi = c
        assert!((ev.xi[0] - 0.5).abs() < 1e-12 && (ev.xi[1] - 0.5).abs() < 1e-12);
        assert!(ev.iterations <= 2);
        assert!((ev.gradient[1] - 1.5).abs() < 1e-12);
        // xi = 0 where x = Q(0)
        let ev = evaluate_parametric_multi(&sol, &[3.0, 0.5, -0.25]).unwrap();
        assert!(ev.xi.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(ev.gradient, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn parametric_exponential_solves_pde_and_is_a_potential() {
        let (a, gamma) = (1.0, 2.0);
        let sol = MultiParametric::exponential(
            2,
            a,
            gamma,
            |xi| xi[0] + xi[1] + 0.05 * (xi[0] * xi[0] + xi[1] * xi[1]) + 0.02 * xi[0] * xi[1],
            |xi| vec![1.0 + 0.1 * xi[0] + 0.02 * xi[1], 1.0 + 0.1 * xi[1] + 0.02 * xi[0]],
            vec![-0.3, -0.3],
        );
        let loss = SeparableLoss(vec![crate::loss::ExponentialLoss::new(a, gamma); 2]);
        for &p in &[[0.5, 0.2, 0.3], [0.8, 0.1, 0.6], [0.3, 0.4, 0.2]] {
            let ev = evaluate_parametric_multi(&sol, &p).unwrap();
            assert!(ev.xi.iter().all(|&v| v < 0.0));
            let res = ev.gradient[0] + loss.value(&ev.gradient[1..]);
            assert!(res.abs() < 1e-10, "residual {res}");
            for k in 0..3 {
                let h = 1e-5;
                let mut up = p;
                let mut dn = p;
                up[k] += h;
                dn[k] -= h;
                let fd = (evaluate_parametric_multi(&sol, &up).unwrap().u
                    - evaluate_parametric_multi(&sol, &dn).unwrap().u)
                    / (2.0 * h);
                assert!((fd - ev.gradient[k]).abs() < 1e-6, "axis {k}: {fd} vs {}", ev.gradient[k]);
            }
        }
    }

    #[test]
    fn singular_hessian_is_reported() {
        let sol = MultiParametric::new(
            1,
            |xi| xi[0],
            |_| vec![1.0],
            |_| DMatrix::zeros(1, 1),
            |_| 0.0,
            |_| vec![1.0],
            vec![0.0],
        );
        assert!(matches!(evaluate_parametric_multi(&sol, &[1.0, 1.0]), Err(Error::Numerical(_))));
    }

    #[test]
    fn multi_sde_accept_all_and_symmetry() {
        let dist = MultiDemandDistribution::new(2, vec![MultiAtom::new(1.0, vec![1, 1], 0.5)], 0.5).unwrap();
        let field = solve_fluid_multi(&dist, |_| 0.0, MultiGridSpec::new(vec![1.0, 1.5, 1.5], vec![40, 30, 30]))
            .unwrap();
        let c = solve_centers_multi(&field, &dist, CoefficientMode::AcceptProb, &[1.5, 1.5], (0.0, 1.0), 1.0 / 512.0)
            .unwrap();
        let last = c.s.last().unwrap();
        assert!((last[0] - 0.5).abs() < 1e-9 && (last[1] - 0.5).abs() < 1e-9);
        let set = multi_sde(&c, 10_000, 11, 512).unwrap();
        let col = set.times.len() - 1;
        let v0 = crate::stats::mean_var(&set.y_at(col, 0)).1;
        let v1 = crate::stats::mean_var(&set.y_at(col, 1)).1;
        assert!((v0 / 0.25 - 1.0).abs() < 0.1 && (v1 / 0.25 - 1.0).abs() < 0.1, "{v0} {v1}");
        assert!((v0 - v1).abs() < 4.0 * 0.25 * (2.0f64 / 10_000.0).sqrt() * 2.0f64.sqrt());

        let zero = MultiCenterPath {
            mode: CoefficientMode::AcceptProb,
            capacity: vec![1.0, 1.0],
            times: vec![0.0, 0.5, 1.0],
            s: vec![vec![0.0; 2]; 3],
            variance: vec![vec![0.0; 2]; 3],
            clamped: false,
        };
        let set = multi_sde(&zero, 20, 1, 1).unwrap();
        assert!(set.y.iter().flatten().all(|&v| v == 0.0));
    }
}
