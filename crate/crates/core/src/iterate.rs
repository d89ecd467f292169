//! Generating-function iteration: orbits `f_n(s)`, chain-rule derivatives
//! `f_n'(s)`, n-step transition rows, and the exact closed form for
//! linear-fractional laws.
//!
//! # Cancellation
//!
//! Everything downstream lives off the gap `R_n(s) = q - f_n(s)`, which
//! shrinks like `β^n`. Computing it as a literal subtraction destroys the
//! gap's relative precision as soon as it nears `ulp(q)`, so the iteration
//! runs in the recentered variable directly: with `f` expanded about `q`,
//!
//! ```text
//! R_{n+1} = h(R_n),   h(R) = (q - b_0) + b_1 R - b_2 R^2 + b_3 R^3 - ...
//! ```
//!
//! where `b_k` are the Taylor coefficients of `f` at `q` (so `b_1 = β`).
//! Every term is O(R) or smaller and the gap keeps full relative accuracy
//! down to the underflow threshold. Linear-fractional laws use the exact
//! rational recentered step instead.

use serde::Serialize;
use thiserror::Error;

use crate::asymptotics::{ProcessParams, CRITICAL_TOL};
use crate::offspring::OffspringLaw;
use crate::powerseries::{self, TruncatedSeries};

/// Row-mass threshold above which a truncated transition row is rejected.
pub const ROW_LOSS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IterateError {
    #[error("transition row lost mass {loss:e} > {ROW_LOSS_TOL:e}; increase j_max")]
    TruncationLossExceeded { loss: f64 },
    #[error("closed-form iteration requires a linear-fractional law")]
    NotLinearFractional,
    #[error("law is critical (m = {m}); the fixed-point structure degenerates")]
    CriticalLaw { m: f64 },
    #[error("iterate saturated at step {n}: the gap to q is below f64 resolution, coefficients at this depth are not resolvable")]
    DepthExhausted { n: usize },
}

/// One step of an iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub n: usize,
    /// `f_n(s)`.
    pub f_n: f64,
    /// Gap `R_n(s) = q - f_n(s)`; `None` when no parameters were supplied.
    pub gap: Option<f64>,
    /// `β^n / R_n(s)`, the slowly-varying trace; `None` without parameters
    /// or when the gap vanishes.
    pub beta_n_over_gap: Option<f64>,
}

/// Orbit of `s` under repeated application of the generating function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub s: f64,
    pub q: Option<f64>,
    pub beta: Option<f64>,
    pub rows: Vec<TraceRow>,
}

impl IterationTrace {
    /// The normalized gaps `R_n/β^n` (reciprocal of the stored trace),
    /// for rows where they exist.
    pub fn normalized_gaps(&self) -> Vec<f64> {
        let (Some(_), Some(beta)) = (self.q, self.beta) else {
            return Vec::new();
        };
        let mut pw = 1.0;
        let mut out = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            if let Some(gap) = row.gap {
                out.push(gap / pw);
            }
            pw *= beta;
        }
        out
    }
}

/// The iteration map rewritten in the gap variable `R = q - s`.
#[derive(Debug, Clone)]
pub(crate) enum RecenteredMap {
    /// `h(R) = c_0 + c_1 R + ... + c_D R^D` from the Taylor shift of a pmf.
    Poly { coeffs: Vec<f64> },
    /// Exact rational step `h(R) = b R / (u (u + c R))`, `u = 1 - c q`.
    Rational { b: f64, c: f64, u: f64 },
}

impl RecenteredMap {
    pub(crate) fn new(law: &OffspringLaw, q: f64) -> Self {
        match law {
            OffspringLaw::Pmf { p } => {
                // Taylor shift by repeated synthetic division: afterwards
                // shifted[k] = f^(k)(q)/k!.
                let mut shifted = p.clone();
                let d = shifted.len() - 1;
                for i in 0..d {
                    for j in (i..d).rev() {
                        shifted[j] += q * shifted[j + 1];
                    }
                }
                let mut coeffs = Vec::with_capacity(shifted.len());
                coeffs.push(q - shifted[0]);
                for (k, &b) in shifted.iter().enumerate().skip(1) {
                    coeffs.push(if k % 2 == 1 { b } else { -b });
                }
                RecenteredMap::Poly { coeffs }
            }
            OffspringLaw::LinearFractional { b, c } => RecenteredMap::Rational {
                b: *b,
                c: *c,
                u: 1.0 - c * q,
            },
        }
    }

    /// `R_{n+1}` from `R_n`.
    pub(crate) fn step(&self, r: f64) -> f64 {
        match self {
            RecenteredMap::Poly { coeffs } => {
                let mut acc = 0.0;
                for &c in coeffs.iter().rev() {
                    acc = acc * r + c;
                }
                acc
            }
            RecenteredMap::Rational { b, c, u, .. } => b * r / (u * (u + c * r)),
        }
    }
}

/// Iterate the generating function at a point, recording `f_n(s)` for
/// `n = 0..=n_steps`. When `params` are supplied (the shared fixed-point
/// solution from the asymptotics module) the trace also carries the gap
/// `R_n = q - f_n(s)` and the slowly-varying ratio `β^n/R_n`, computed via
/// the recentered recursion.
pub fn gf_orbit(
    law: &OffspringLaw,
    s: f64,
    n_steps: usize,
    params: Option<&ProcessParams>,
) -> IterationTrace {
    assert!((0.0..1.0).contains(&s), "s must lie in [0,1)");
    match params {
        None => {
            let mut rows = Vec::with_capacity(n_steps + 1);
            let mut value = s;
            for n in 0..=n_steps {
                rows.push(TraceRow {
                    n,
                    f_n: value,
                    gap: None,
                    beta_n_over_gap: None,
                });
                value = law.gf_eval(value).value;
            }
            IterationTrace {
                s,
                q: None,
                beta: None,
                rows,
            }
        }
        Some(p) => {
            let map = RecenteredMap::new(law, p.q);
            let mut rows = Vec::with_capacity(n_steps + 1);
            let mut gap = p.q - s;
            let mut pw = 1.0;
            for n in 0..=n_steps {
                rows.push(TraceRow {
                    n,
                    f_n: p.q - gap,
                    gap: Some(gap),
                    beta_n_over_gap: (gap != 0.0).then(|| pw / gap),
                });
                gap = map.step(gap);
                pw *= p.beta;
            }
            IterationTrace {
                s,
                q: Some(p.q),
                beta: Some(p.beta),
                rows,
            }
        }
    }
}

/// `f_n'(s)` as the chain-rule product of one-step derivatives along the
/// orbit; `f_0' = 1`.
pub fn orbit_derivative(
    law: &OffspringLaw,
    s: f64,
    n_steps: usize,
    params: Option<&ProcessParams>,
) -> f64 {
    let mut product = 1.0;
    match params {
        None => {
            let mut value = s;
            for _ in 0..n_steps {
                let e = law.gf_eval(value);
                product *= e.d1;
                value = e.value;
            }
        }
        Some(p) => {
            let map = RecenteredMap::new(law, p.q);
            let mut gap = p.q - s;
            for _ in 0..n_steps {
                product *= law.gf_eval(p.q - gap).d1;
                gap = map.step(gap);
            }
        }
    }
    product
}

/// An n-step transition row `P_i0(n)..P_ij_max(n)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionRow {
    pub i: u64,
    pub n: usize,
    /// `probs[j] = P_ij(n)` for `j = 0..=j_max`.
    pub probs: Vec<f64>,
    pub truncation_loss: f64,
}

/// Coefficients of `[f_n(s)]^i`, built by series composition and powering.
pub fn transition_row(
    law: &OffspringLaw,
    i: u64,
    n: usize,
    j_max: usize,
) -> Result<TransitionRow, IterateError> {
    assert!(i >= 1, "initial count must be at least 1");
    let series = iterate_series(law, n, j_max)?;
    let powered = if i == 1 {
        series
    } else {
        powerseries::power(&series, i)
    };
    let probs = powered.coeffs()[..=j_max].to_vec();
    let loss = 1.0 - crate::offspring::kahan_sum(probs.iter().copied());
    if loss > ROW_LOSS_TOL {
        return Err(IterateError::TruncationLossExceeded { loss });
    }
    Ok(TransitionRow {
        i,
        n,
        probs,
        truncation_loss: loss.max(0.0),
    })
}

/// The coefficient series of `f_n` at truncation order `j_max`
/// (`f_0` is the identity).
///
/// The outer factor keeps the law's full support: the inner constant term
/// `f_k(0)` is nonzero, so low-order coefficients of a composition depend
/// on every order of the outer series. Only the inner side is truncated.
pub fn iterate_series(
    law: &OffspringLaw,
    n: usize,
    j_max: usize,
) -> Result<TruncatedSeries, IterateError> {
    assert!(j_max >= 1);
    if n == 0 {
        return Ok(TruncatedSeries::identity(j_max));
    }
    let f = full_support_series(law, j_max);
    let mut iter = f.truncated_to(j_max);
    for k in 1..n {
        // Once f_k(0) rounds to 1 the iterate has saturated in f64 and
        // deeper coefficients are pure noise.
        iter = powerseries::compose(&f, &iter)
            .map_err(|_| IterateError::DepthExhausted { n: k })?;
    }
    Ok(iter)
}

/// The law's generating function at an order covering its whole (possibly
/// truncated linear-fractional) support, never below `j_max`.
pub(crate) fn full_support_series(law: &OffspringLaw, j_max: usize) -> TruncatedSeries {
    let order = match law.degree() {
        Some(d) => d.max(j_max),
        None => law.to_finite_pmf().order.max(j_max),
    };
    TruncatedSeries::from_law(law, order)
}

/// Exact n-step iterate of a linear-fractional law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfIterate {
    pub f_n: f64,
    /// `R_n(s) = q - f_n(s)`, exact.
    pub gap: f64,
}

/// Closed-form `f_n(s)` for the linear-fractional family.
///
/// The generating function is a Möbius map; with distinct fixed points
/// `q` (multiplier `β = f'(q)`) and `w`, diagonalizing its 2×2 matrix is
/// equivalent to conjugating by `φ(s) = (s-q)/(s-w)`, under which the n-th
/// iterate is multiplication by `β^n`:
///
/// ```text
/// y = β^n φ(s),   R_n(s) = (w - q)·y/(1 - y),   f_n(s) = q - R_n(s).
/// ```
///
/// One fixed point is always 1; the other is `p_0/c`. The non-critical
/// assumption keeps them distinct.
pub fn lf_exact(law: &OffspringLaw, s: f64, n: usize) -> Result<LfIterate, IterateError> {
    let OffspringLaw::LinearFractional { b, c } = law else {
        return Err(IterateError::NotLinearFractional);
    };
    assert!((0.0..1.0).contains(&s), "s must lie in [0,1)");
    let m = b / ((1.0 - c) * (1.0 - c));
    if (m - 1.0).abs() <= CRITICAL_TOL {
        return Err(IterateError::CriticalLaw { m });
    }
    let s0 = law.p0() / c;
    let (q, w) = if m < 1.0 { (1.0, s0) } else { (s0, 1.0) };
    if n == 0 {
        return Ok(LfIterate { f_n: s, gap: q - s });
    }
    let beta = b / ((1.0 - c * q) * (1.0 - c * q));
    let y = beta.powi(n as i32) * (s - q) / (s - w);
    let gap = (w - q) * y / (1.0 - y);
    Ok(LfIterate { f_n: q - gap, gap })
}
