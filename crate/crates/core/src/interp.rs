//! Multilinear interpolation on uniform node grids anchored at the origin.

use crate::error::{range, Result};

/// Slack when deciding whether a query point lies inside the grid.
const EDGE_SLACK: f64 = 1e-9;

/// Interpolates row-major `values` (last axis fastest) with `shape[k]`
/// nodes and spacing `steps[k]` along axis `k` at physical `point`.
pub fn multilinear(values: &[f64], shape: &[usize], steps: &[f64], point: &[f64]) -> Result<f64> {
    let m = shape.len();
    debug_assert_eq!(steps.len(), m);
    debug_assert_eq!(point.len(), m);
    let mut base = vec![0usize; m];
    let mut frac = vec![0f64; m];
    for k in 0..m {
        let last = (shape[k] - 1) as f64;
        let pos = point[k] / steps[k];
        if !(pos >= -EDGE_SLACK && pos <= last + EDGE_SLACK) {
            return Err(range(format!(
                "coordinate {} on axis {k} outside [0, {}]",
                point[k],
                last * steps[k]
            )));
        }
        let pos = pos.clamp(0.0, last);
        let cell = (pos.floor() as usize).min(shape[k].saturating_sub(2));
        base[k] = cell;
        frac[k] = if shape[k] > 1 { pos - cell as f64 } else { 0.0 };
    }
    let mut strides = vec![1usize; m];
    for k in (0..m.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << m) {
        let mut weight = 1.0;
        let mut idx = 0;
        for k in 0..m {
            // axis 0 is the most significant bit of the corner label
            let up = (corner >> (m - 1 - k)) & 1 == 1;
            let (w, i) = if up {
                (frac[k], (base[k] + 1).min(shape[k] - 1))
            } else {
                (1.0 - frac[k], base[k])
            };
            weight *= w;
            idx += i * strides[k];
        }
        acc += weight * values[idx];
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_bilinear_functions() {
        // f(x, y) = 1 + 2x + 3y + xy on a 4 x 5 grid with steps 0.5, 0.25
        let (nx, ny) = (4, 5);
        let mut v = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                let (x, y) = (i as f64 * 0.5, j as f64 * 0.25);
                v.push(1.0 + 2.0 * x + 3.0 * y + x * y);
            }
        }
        for &(x, y) in &[(0.0, 0.0), (0.3, 0.7), (1.5, 1.0), (1.2, 0.1)] {
            let got = multilinear(&v, &[nx, ny], &[0.5, 0.25], &[x, y]).unwrap();
            assert!((got - (1.0 + 2.0 * x + 3.0 * y + x * y)).abs() < 1e-12);
        }
        assert!(multilinear(&v, &[nx, ny], &[0.5, 0.25], &[1.6, 0.0]).is_err());
    }
}
