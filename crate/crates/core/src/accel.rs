//! Aitken Δ² acceleration for geometrically converging sequences.
//!
//! Iteration traces in this crate converge like `x_n = L + C·β^n + o(β^n)`
//! with `β = f'(q) < 1`. A single Δ² level removes the dominant geometric
//! term; convergence is declared when two successive extrapolants differ by
//! less than the requested tolerance. Once the raw differences sink to the
//! f64 noise floor the extrapolant denominator is rounding garbage, so the
//! driver freezes the last good estimate instead of chasing noise.

/// Result of accelerating a scalar sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelResult {
    pub value: f64,
    /// Index of the last raw term consumed.
    pub n_used: usize,
    pub converged: bool,
}

/// Relative size at which successive raw differences count as exhausted
/// noise rather than signal.
const NOISE_FLOOR: f64 = 1e-14;

fn aitken_step(x0: f64, x1: f64, x2: f64) -> f64 {
    let d1 = x1 - x0;
    let d2 = (x2 - x1) - d1;
    if d2 == 0.0 {
        x2
    } else {
        x0 - d1 * d1 / d2
    }
}

/// Accelerate a fully materialized trace. Scans forward and stops at the
/// first pair of extrapolants within `tol` of each other.
pub fn aitken_scan(xs: &[f64], tol: f64) -> AccelResult {
    let mut prev_y: Option<f64> = None;
    let mut best = *xs.last().unwrap_or(&f64::NAN);
    for n in 0..xs.len().saturating_sub(2) {
        let (x0, x1, x2) = (xs[n], xs[n + 1], xs[n + 2]);
        let scale = x2.abs().max(1e-300);
        // Raw sequence has flattened to machine noise: accept its tail.
        if (x1 - x0).abs() <= NOISE_FLOOR * scale && (x2 - x1).abs() <= NOISE_FLOOR * scale {
            return AccelResult {
                value: x2,
                n_used: n + 2,
                converged: true,
            };
        }
        let y = aitken_step(x0, x1, x2);
        if !y.is_finite() {
            continue;
        }
        best = y;
        if let Some(py) = prev_y {
            if (y - py).abs() < tol {
                return AccelResult {
                    value: y,
                    n_used: n + 2,
                    converged: true,
                };
            }
        }
        prev_y = Some(y);
    }
    AccelResult {
        value: best,
        n_used: xs.len().saturating_sub(1),
        converged: false,
    }
}

/// Result of accelerating a family of sequences column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnAccelResult {
    pub values: Vec<f64>,
    pub n_used: usize,
    pub converged: bool,
}

/// Accelerate per-column limits of a vector-valued trace produced lazily by
/// `next()`. Stops as soon as every column's extrapolant has settled within
/// `tol`, or after `n_max` terms.
pub fn accelerate_columns(
    mut next: impl FnMut() -> Vec<f64>,
    tol: f64,
    n_max: usize,
) -> ColumnAccelResult {
    let first = next();
    let width = first.len();
    let mut window: Vec<Vec<f64>> = vec![first];
    let mut prev_y: Vec<Option<f64>> = vec![None; width];
    let mut settled: Vec<bool> = vec![false; width];
    let mut estimate: Vec<f64> = vec![f64::NAN; width];

    for n in 1..=n_max {
        window.push(next());
        if window.len() < 3 {
            continue;
        }
        if window.len() > 3 {
            window.remove(0);
        }
        for j in 0..width {
            let (x0, x1, x2) = (window[0][j], window[1][j], window[2][j]);
            let scale = x2.abs().max(1e-300);
            if (x1 - x0).abs() <= NOISE_FLOOR * scale && (x2 - x1).abs() <= NOISE_FLOOR * scale {
                estimate[j] = x2;
                settled[j] = true;
                continue;
            }
            let y = aitken_step(x0, x1, x2);
            if y.is_finite() {
                if let Some(py) = prev_y[j] {
                    settled[j] = (y - py).abs() < tol;
                }
                estimate[j] = y;
                prev_y[j] = Some(y);
            } else {
                settled[j] = false;
            }
        }
        if settled.iter().all(|&s| s) {
            return ColumnAccelResult {
                values: estimate,
                n_used: n,
                converged: true,
            };
        }
    }
    ColumnAccelResult {
        values: estimate,
        n_used: n_max,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accelerates_geometric_sequence() {
        // x_n = 2 + 3·0.8^n converges slowly; Δ² nails the limit fast.
        let xs: Vec<f64> = (0..40).map(|n| 2.0 + 3.0 * 0.8f64.powi(n)).collect();
        let r = aitken_scan(&xs, 1e-12);
        assert!(r.converged);
        assert!((r.value - 2.0).abs() < 1e-10, "got {}", r.value);
        assert!(r.n_used < 10, "pure geometric should converge immediately");
    }

    #[test]
    fn mixed_geometric_terms() {
        let xs: Vec<f64> = (0..200)
            .map(|n| 1.0 / 6.0 * (1.0 + 0.83 * 0.8f64.powi(n) + 0.69 * 0.64f64.powi(n)))
            .collect();
        let r = aitken_scan(&xs, 1e-11);
        assert!(r.converged);
        assert!((r.value - 1.0 / 6.0).abs() < 1e-9, "got {}", r.value);
    }

    #[test]
    fn flat_sequence_converges_to_itself() {
        let xs = vec![0.5; 10];
        let r = aitken_scan(&xs, 1e-9);
        assert!(r.converged);
        assert_eq!(r.value, 0.5);
    }

    #[test]
    fn unconverged_without_enough_terms() {
        let xs: Vec<f64> = (0..4).map(|n| 1.0 + 0.999f64.powi(n)).collect();
        let r = aitken_scan(&xs, 1e-15);
        assert!(!r.converged);
    }

    #[test]
    fn columns_converge_independently() {
        let mut n = 0i32;
        let r = accelerate_columns(
            || {
                let v = vec![1.0 + 0.5f64.powi(n), 2.0 + 5.0 * 0.9f64.powi(n)];
                n += 1;
                v
            },
            1e-11,
            300,
        );
        assert!(r.converged);
        assert!((r.values[0] - 1.0).abs() < 1e-9);
        assert!((r.values[1] - 2.0).abs() < 1e-9);
    }
}
