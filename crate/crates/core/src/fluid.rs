//! Grid solver for the fluid limit `u_x + g(u_y) = 0` on `[0, X] x [0, Y]`
//! with `u(X, y) = h(y)` and `u(x, 0) = 0`.
//!
//! `x` is scaled elapsed time and `y` scaled remaining capacity. Because
//! `g` is nonincreasing, characteristics move towards larger `y` as `x`
//! decreases, so the backward march takes the upwind difference from below:
//!
//! ```text
//! u[i-1][j] = u[i][j] + dx * g((u[i][j] - u[i][j-1]) / dy)
//! ```
//!
//! which is monotone as long as `dx * max|g'| <= dy`.

use std::io::{self, Write};

use crate::dp::{check_budget, ValueTable};
use crate::error::{validation, Error, Result};
use crate::interp::multilinear;
use crate::loss::Loss;

/// Extents and node counts of a fluid grid; there are `nx + 1` by `ny + 1`
/// nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_max: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(x_max: f64, y_max: f64, nx: usize, ny: usize) -> Self {
        Self { x_max, y_max, nx, ny }
    }

    pub fn dx(&self) -> f64 {
        self.x_max / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.y_max / self.ny as f64
    }

    fn validate(&self) -> Result<()> {
        if !(self.x_max > 0.0 && self.y_max > 0.0) || !self.x_max.is_finite() || !self.y_max.is_finite() {
            return Err(validation("grid extents must be positive and finite"));
        }
        if self.nx < 1 || self.ny < 1 {
            return Err(validation("grid needs at least one cell per axis"));
        }
        let cells = (self.nx as u64 + 1).checked_mul(self.ny as u64 + 1);
        check_budget(cells, "fluid grid")?;
        Ok(())
    }
}

/// Values and first derivatives of the fluid solution at the grid nodes,
/// row-major with `x` outer.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidField {
    pub grid: GridSpec,
    pub u: Vec<f64>,
    pub u_x: Vec<f64>,
    pub u_y: Vec<f64>,
}

impl FluidField {
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.grid.ny + 1) + j
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.grid.dx()
    }

    pub fn y(&self, j: usize) -> f64 {
        j as f64 * self.grid.dy()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.u[self.idx(i, j)]
    }

    /// Field sampled from a closed form, with derivatives filled by the
    /// same finite differences the solver uses.
    pub fn from_fn<F: Fn(f64, f64) -> f64>(grid: GridSpec, f: F) -> Result<Self> {
        grid.validate()?;
        let (dx, dy) = (grid.dx(), grid.dy());
        let mut u = Vec::with_capacity((grid.nx + 1) * (grid.ny + 1));
        for i in 0..=grid.nx {
            for j in 0..=grid.ny {
                u.push(f(i as f64 * dx, j as f64 * dy));
            }
        }
        Ok(Self::with_derivatives(grid, u))
    }

    fn with_derivatives(grid: GridSpec, u: Vec<f64>) -> Self {
        let (nx, ny) = (grid.nx, grid.ny);
        let (dx, dy) = (grid.dx(), grid.dy());
        let w = ny + 1;
        let mut u_x = vec![0.0; u.len()];
        let mut u_y = vec![0.0; u.len()];
        for i in 0..=nx {
            for j in 0..=ny {
                let k = i * w + j;
                u_x[k] = if i == 0 {
                    (u[k + w] - u[k]) / dx
                } else if i == nx {
                    (u[k] - u[k - w]) / dx
                } else {
                    (u[k + w] - u[k - w]) / (2.0 * dx)
                };
                u_y[k] = if j == 0 {
                    (u[k + 1] - u[k]) / dy
                } else if j == ny {
                    (u[k] - u[k - 1]) / dy
                } else {
                    (u[k + 1] - u[k - 1]) / (2.0 * dy)
                };
            }
        }
        Self { grid, u, u_x, u_y }
    }

    fn interp(&self, values: &[f64], x: f64, y: f64) -> Result<f64> {
        multilinear(
            values,
            &[self.grid.nx + 1, self.grid.ny + 1],
            &[self.grid.dx(), self.grid.dy()],
            &[x, y],
        )
    }

    /// Bilinear `(u, u_x, u_y)` at an arbitrary point of the rectangle.
    pub fn sample(&self, x: f64, y: f64) -> Result<(f64, f64, f64)> {
        Ok((
            self.interp(&self.u, x, y)?,
            self.interp(&self.u_x, x, y)?,
            self.interp(&self.u_y, x, y)?,
        ))
    }

    pub fn u_at(&self, x: f64, y: f64) -> Result<f64> {
        self.interp(&self.u, x, y)
    }

    pub fn u_y_at(&self, x: f64, y: f64) -> Result<f64> {
        self.interp(&self.u_y, x, y)
    }

    /// `x,y,u,u_x,u_y` rows, `x` then `y` ascending.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,y,u,u_x,u_y")?;
        for i in 0..=self.grid.nx {
            for j in 0..=self.grid.ny {
                let k = self.idx(i, j);
                writeln!(w, "{},{},{},{},{}", self.x(i), self.y(j), self.u[k], self.u_x[k], self.u_y[k])?;
            }
        }
        Ok(())
    }
}

/// Smallest `nx` that satisfies the CFL bound for `loss` and terminal data.
pub fn min_stable_nx<L: Loss, H: Fn(f64) -> f64>(loss: &L, terminal: H, grid: GridSpec) -> usize {
    let dy = grid.dy();
    let lo = min_terminal_slope(&terminal, grid);
    let bound = loss.slope_bound(lo);
    ((grid.x_max * bound / dy).ceil() as usize).max(1)
}

fn min_terminal_slope<H: Fn(f64) -> f64>(terminal: &H, grid: GridSpec) -> f64 {
    let dy = grid.dy();
    (1..=grid.ny)
        .map(|j| (terminal(j as f64 * dy) - terminal((j - 1) as f64 * dy)) / dy)
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

/// Marches the upwind scheme backward from `x = X`.
///
/// Fails with a validation error when `h(0) != 0` or `h` decreases, and
/// with a numerical error naming the smallest stable `nx` when the
/// requested resolution violates the CFL bound.
pub fn solve_grid<L: Loss, H: Fn(f64) -> f64>(loss: &L, terminal: H, grid: GridSpec) -> Result<FluidField> {
    grid.validate()?;
    let (nx, ny) = (grid.nx, grid.ny);
    let (dx, dy) = (grid.dx(), grid.dy());
    let w = ny + 1;

    let h: Vec<f64> = (0..=ny).map(|j| terminal(j as f64 * dy)).collect();
    if h.iter().any(|v| !v.is_finite()) {
        return Err(validation("terminal data must be finite"));
    }
    if h[0].abs() > 1e-12 {
        return Err(validation(format!("terminal data must vanish at y = 0, got {}", h[0])));
    }
    if h.windows(2).any(|p| p[1] < p[0]) {
        return Err(validation("terminal data must be nondecreasing in y"));
    }

    let lo = min_terminal_slope(&terminal, grid);
    let speed = loss.slope_bound(lo);
    if dx * speed > dy * (1.0 + 1e-12) {
        let need = ((grid.x_max * speed / dy).ceil() as usize).max(1);
        return Err(Error::Numerical(format!(
            "CFL violated: dx * max|g'| = {} > dy = {dy}; use nx >= {need}",
            dx * speed
        )));
    }

    let mut u = vec![0.0; (nx + 1) * w];
    u[nx * w..].copy_from_slice(&h);
    u[nx * w] = 0.0;
    for i in (1..=nx).rev() {
        let (head, tail) = u.split_at_mut(i * w);
        let cur = &tail[..w];
        let prev = &mut head[(i - 1) * w..];
        prev[0] = 0.0;
        for j in 1..=ny {
            prev[j] = cur[j] + dx * loss.value((cur[j] - cur[j - 1]) / dy);
        }
    }
    Ok(FluidField::with_derivatives(grid, u))
}

/// Residual of a scalar field at the interior nodes, plus summary scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct InteriorResidual {
    /// `(nx - 1) x (ny - 1)` values, row-major.
    pub values: Vec<f64>,
    pub max_abs: f64,
    /// `max_abs` divided by the normalization scale, or `max_abs` itself
    /// when no scale applies.
    pub normalized: f64,
}

/// `|u_x + g(u_y)|` at interior nodes using the stored central differences.
/// `max |V(t, d) / n - u(t / n, d / n)|` over every lattice point of
/// `table`, the scaled-DP error of the fluid limit at scale `n`.
pub fn scaled_dp_error(table: &ValueTable, field: &FluidField, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(validation("scale must be positive"));
    }
    let nf = n as f64;
    let mut worst: f64 = 0.0;
    for t in 0..=table.horizon() {
        for d in 0..=table.capacity() {
            let u = field.u_at(t as f64 / nf, d as f64 / nf)?;
            worst = worst.max((table.get(t, d) / nf - u).abs());
        }
    }
    Ok(worst)
}

pub fn pde_residual<L: Loss>(field: &FluidField, loss: &L) -> InteriorResidual {
    let (nx, ny) = (field.grid.nx, field.grid.ny);
    let mut values = Vec::with_capacity(nx.saturating_sub(1) * ny.saturating_sub(1));
    for i in 1..nx {
        for j in 1..ny {
            let k = field.idx(i, j);
            values.push((field.u_x[k] + loss.value(field.u_y[k])).abs());
        }
    }
    let max_abs = values.iter().copied().fold(0.0, f64::max);
    InteriorResidual { values, max_abs, normalized: max_abs }
}

/// Scale below which a product of second differences is rounding noise:
/// each difference carries roughly `4 eps max|u| / h^2` of error.
pub(crate) fn noise_floor(max_abs_u: f64, min_step: f64) -> f64 {
    let per_difference = 64.0 * f64::EPSILON * max_abs_u.max(f64::MIN_POSITIVE) / (min_step * min_step);
    per_difference * per_difference
}

/// `u_xx u_yy - u_xy^2` from central second differences at interior
/// nodes. The normalized value divides the largest magnitude by the
/// largest `max(|u_xx u_yy|, u_xy^2)` over the same nodes; it is zero when
/// that scale is at rounding level (affine fields).
pub fn monge_ampere_residual(field: &FluidField) -> Result<InteriorResidual> {
    let (nx, ny) = (field.grid.nx, field.grid.ny);
    if nx < 6 || ny < 6 {
        return Err(validation("need at least 5 x 5 interior nodes"));
    }
    let (dx, dy) = (field.grid.dx(), field.grid.dy());
    let w = ny + 1;
    let u = &field.u;
    let mut values = Vec::with_capacity((nx - 1) * (ny - 1));
    let mut scale: f64 = 0.0;
    for i in 1..nx {
        for j in 1..ny {
            let k = i * w + j;
            let uxx = (u[k + w] - 2.0 * u[k] + u[k - w]) / (dx * dx);
            let uyy = (u[k + 1] - 2.0 * u[k] + u[k - 1]) / (dy * dy);
            let uxy = (u[k + w + 1] - u[k + w - 1] - u[k - w + 1] + u[k - w - 1]) / (4.0 * dx * dy);
            let diag = uxx * uyy;
            let off = uxy * uxy;
            values.push(diag - off);
            scale = scale.max(diag.abs()).max(off.abs());
        }
    }
    let max_abs = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let max_u = u.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let normalized = if scale > noise_floor(max_u, dx.min(dy)) { max_abs / scale } else { 0.0 };
    Ok(InteriorResidual { values, max_abs, normalized })
}
