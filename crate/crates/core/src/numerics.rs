//! Small numerical kernels shared by the solver modules.

use nalgebra::{DMatrix, DVector};

/// Composite Simpson rule for samples on a uniform grid with spacing `h`.
/// An odd number of cells closes with a 3/8 panel; a single cell falls back
/// to the trapezoid rule.
pub fn simpson(values: &[f64], h: f64) -> f64 {
    let cells = values.len().saturating_sub(1);
    match cells {
        0 => 0.0,
        1 => 0.5 * h * (values[0] + values[1]),
        _ => {
            let (even_cells, tail) = if cells.is_multiple_of(2) { (cells, 0) } else { (cells - 3, 3) };
            let mut sum = 0.0;
            for j in (0..even_cells).step_by(2) {
                sum += values[j] + 4.0 * values[j + 1] + values[j + 2];
            }
            let mut total = sum * h / 3.0;
            if tail == 3 {
                let s = even_cells;
                total += 3.0 * h / 8.0
                    * (values[s] + 3.0 * values[s + 1] + 3.0 * values[s + 2] + values[s + 3]);
            }
            total
        }
    }
}

/// Result of [`box_least_squares`].
#[derive(Debug, Clone)]
pub struct BoxLsSolution {
    pub x: DVector<f64>,
    /// `‖offset + V x‖`.
    pub residual: f64,
    pub iterations: usize,
}

/// Minimizes `‖offset + V x‖` subject to `lower ≤ x ≤ upper` by accelerated
/// projected gradient (FISTA), starting from `start` (clipped into the box).
/// Stops once the residual norm drops to `target` or the iterate stalls.
pub fn box_least_squares(
    v: &DMatrix<f64>,
    offset: &DVector<f64>,
    lower: &[f64],
    upper: &[f64],
    start: &DVector<f64>,
    target: f64,
    max_iter: usize,
) -> BoxLsSolution {
    let m = v.ncols();
    let clip = |x: &mut DVector<f64>| {
        for j in 0..m {
            x[j] = x[j].clamp(lower[j], upper[j]);
        }
    };
    let mut x = start.clone();
    clip(&mut x);
    if m == 0 {
        return BoxLsSolution {
            x,
            residual: offset.norm(),
            iterations: 0,
        };
    }
    let gram = v * v.transpose();
    let lipschitz = gram
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    if lipschitz <= 0.0 {
        return BoxLsSolution {
            x,
            residual: offset.norm(),
            iterations: 0,
        };
    }
    let step = 1.0 / lipschitz;
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut best = x.clone();
    let mut best_res = (offset + v * &x).norm();
    let mut iterations = 0;
    while iterations < max_iter && best_res > target {
        iterations += 1;
        let r = offset + v * &y;
        let mut next = &y - v.transpose() * r * step;
        clip(&mut next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let moved = (&next - &x).norm();
        y = &next + (&next - &x) * momentum;
        x = next;
        t = t_next;
        let res = (offset + v * &x).norm();
        if res < best_res {
            best_res = res;
            best.copy_from(&x);
        } else {
            // Restart momentum when the residual goes up.
            y.copy_from(&x);
            t = 1.0;
        }
        if moved <= 1e-15 * (1.0 + x.norm()) {
            break;
        }
    }
    BoxLsSolution {
        x: best,
        residual: best_res,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_for_cubics() {
        for cells in [2usize, 3, 4, 5, 7, 10] {
            let h = 2.0 / cells as f64;
            let values: Vec<f64> = (0..=cells)
                .map(|j| {
                    let x = j as f64 * h;
                    x * x * x - x + 1.0
                })
                .collect();
            assert!((simpson(&values, h) - 4.0).abs() < 1e-13, "cells = {cells}");
        }
    }

    #[test]
    fn box_ls_unconstrained_and_clipped() {
        let v = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let offset = DVector::from_vec(vec![-1.0]);
        let zero = DVector::zeros(2);
        let free = box_least_squares(&v, &offset, &[-5.0, -5.0], &[5.0, 5.0], &zero, 1e-14, 1000);
        assert!(free.residual < 1e-12);
        let tight = box_least_squares(&v, &offset, &[0.0, 0.0], &[0.2, 0.3], &zero, 1e-14, 1000);
        assert!((tight.residual - 0.5).abs() < 1e-12);
    }
}
