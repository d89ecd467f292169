//! Fixed points, structural parameters, limit estimation and bounds.
//!
//! For a non-critical law the gap `R_n(s) = q - f_n(s)` decays like
//! `A(s)·β^n` with `β = f'(q)`. The closed-form prediction for the profile
//! is
//!
//! ```text
//! A_γ(s) = (q - s)/(1 + γ(q - s)),    γ = b_q/(β - β²),  b_q = f''(q)/2,
//! ```
//!
//! which puts the predicted decay constant at `K = A_γ(0) = q/(1 + qγ)`.
//! That prediction is exact on the linear-fractional family. Off it, this
//! module treats the generating-function iteration limit `K̂` as ground
//! truth and the closed form as a model prediction: reports carry both and
//! their gap, and no identity asserts their equality away from the
//! linear-fractional family. (Desk-scale iteration of `f(s) = 3/4 + s²/4`
//! gives `K̂ ≈ 0.393` against a closed-form 0.5; surfacing that gap is part
//! of the point.)
//!
//! The measured profile is summarized pointwise by
//! `δ̂(s) = 2(1/Â(s) - 1/(q-s))`, which the series bounds `Δ₁ ≤ δ̂ ≤ Δ₂`
//! of [`delta_bounds`] must sandwich at every probed `s`.

use serde::Serialize;
use thiserror::Error;

use crate::accel::{self, ColumnAccelResult};
use crate::iterate::RecenteredMap;
use crate::offspring::{kahan_sum, OffspringLaw};
use crate::powerseries::{self, TruncatedSeries};

/// Laws with `|m - 1|` at or below this are rejected: every formula here
/// divides by `β - β²` or `1 - β`.
pub const CRITICAL_TOL: f64 = 1e-9;

/// Iteration depth cap for coefficient-limit extraction.
const COEFF_N_MAX: usize = 400;

/// Default tolerance for coefficient-limit extrapolation.
const COEFF_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalityClass {
    Subcritical,
    Supercritical,
}

/// Structural parameters shared by every downstream computation, so that
/// all modules work from one fixed-point solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProcessParams {
    /// Offspring mean `m = f'(1-)`.
    pub m: f64,
    /// Extinction probability: smallest fixed point of `f` on `(0,1]`.
    pub q: f64,
    /// `β = f'(q) < 1`.
    pub beta: f64,
    /// `b_q = f''(q)/2`.
    pub b_q: f64,
    /// `γ = b_q/(β - β²)`.
    pub gamma: f64,
    /// `γ_q = q·f''(q)/(β - β²)`.
    pub gamma_q: f64,
    /// `δ = γ_q/q = 2γ`, the closed-form pin for the profile parameter.
    pub delta_theory: f64,
    /// Closed-form decay constant `K = q/(1 + qγ)`.
    pub k_theory: f64,
    pub class: CriticalityClass,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AsymptoticsError {
    #[error("law is critical within {CRITICAL_TOL:e} (m = {m}); rejected")]
    CriticalLaw { m: f64 },
    #[error("limit did not converge within {n_used} iterations")]
    NotConverged { n_used: usize },
}

/// Extinction probability `q`.
///
/// Subcritical laws return exactly 1. Supercritical laws bracket the root
/// of `f(s) - s` below the stationary point of the convex difference and
/// refine by bisection plus safeguarded Newton steps to `|f(q)-q| ≈ ulp`.
pub fn extinction_probability(law: &OffspringLaw) -> Result<f64, AsymptoticsError> {
    let m = law.moments().m;
    if (m - 1.0).abs() <= CRITICAL_TOL {
        return Err(AsymptoticsError::CriticalLaw { m });
    }
    if m < 1.0 {
        return Ok(1.0);
    }
    // f' is increasing with f'(0) = p_1 < 1 < m = f'(1): bisect for the
    // point where f' crosses 1. h = f - id is positive on [0,q) and
    // negative on (q, s*], so [0, s*] brackets q with a sign change.
    let (mut dlo, mut dhi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (dlo + dhi);
        if law.gf_eval(mid).d1 < 1.0 {
            dlo = mid;
        } else {
            dhi = mid;
        }
    }
    let (mut lo, mut hi) = (0.0, dlo);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if law.gf_eval(mid).value - mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..40 {
        let e = law.gf_eval(x);
        let hx = e.value - x;
        if hx == 0.0 {
            break;
        }
        if hx > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let mut next = x - hx / (e.d1 - 1.0);
        if !(lo..=hi).contains(&next) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 2.0 * f64::EPSILON * x {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// Shared formula for the closed-form profile, so `k_theory` and
/// [`closed_form_gap_limit`] agree bitwise.
fn profile(q: f64, gamma: f64, s: f64) -> f64 {
    (q - s) / (1.0 + gamma * (q - s))
}

/// Derive all structural parameters of a non-critical law.
pub fn derive_params(law: &OffspringLaw) -> Result<ProcessParams, AsymptoticsError> {
    let m = law.moments().m;
    let q = extinction_probability(law)?;
    let at_q = law.gf_eval(q);
    let beta = at_q.d1;
    let b_q = at_q.d2 / 2.0;
    let denom = beta - beta * beta;
    let gamma = b_q / denom;
    let gamma_q = q * at_q.d2 / denom;
    Ok(ProcessParams {
        m,
        q,
        beta,
        b_q,
        gamma,
        gamma_q,
        delta_theory: gamma_q / q,
        k_theory: profile(q, gamma, 0.0),
        class: if m < 1.0 {
            CriticalityClass::Subcritical
        } else {
            CriticalityClass::Supercritical
        },
    })
}

/// The closed-form profile `A_γ(s) = (q-s)/(1+γ(q-s))`.
pub fn closed_form_gap_limit(params: &ProcessParams, s: f64) -> f64 {
    profile(params.q, params.gamma, s)
}

/// Its derivative `-1/(1+γ(q-s))²`.
pub fn closed_form_gap_limit_deriv(params: &ProcessParams, s: f64) -> f64 {
    let d = 1.0 + params.gamma * (params.q - s);
    -1.0 / (d * d)
}

/// Normalized residual of the Schröder relation for the closed-form
/// profile: `|A_γ(f_n(qs)) - β^n·A_γ(qs)| / β^n`. Zero (to rounding) on
/// the linear-fractional family, where `A_γ` is the true limit.
pub fn closed_form_schroder_residual(
    law: &OffspringLaw,
    params: &ProcessParams,
    s: f64,
    n: usize,
) -> f64 {
    let map = RecenteredMap::new(law, params.q);
    let mut gap = params.q - params.q * s;
    let mut pw = 1.0;
    for _ in 0..n {
        gap = map.step(gap);
        pw *= params.beta;
    }
    let lhs = profile(params.q, params.gamma, params.q - gap);
    let rhs = pw * profile(params.q, params.gamma, params.q * s);
    (lhs - rhs).abs() / pw
}

/// Default probe points for the measured profile: `{0, q/4, q/2, 3q/4}`
/// plus the midpoint of `(q,1)` when it exists (subcritical laws have
/// `q = 1`, leaving nothing above).
pub fn default_probe_points(params: &ProcessParams) -> Vec<f64> {
    let q = params.q;
    let mut pts = vec![0.0, 0.25 * q, 0.5 * q, 0.75 * q];
    if q < 1.0 {
        pts.push(0.5 * (1.0 + q));
    }
    pts
}

/// The measured profile at one probe point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaProbe {
    pub s: f64,
    /// `Â(s) = lim R_n(s)/β^n`.
    pub a_hat: f64,
    /// `δ̂(s) = 2(1/Â(s) - 1/(q-s))`.
    pub delta_hat: f64,
    pub n_used: usize,
    pub converged: bool,
}

/// Empirical limits from generating-function iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitEstimate {
    /// `K̂ = Â(0)`, the ground-truth decay constant.
    pub k_hat: f64,
    /// `δ̂(s)` per probed point.
    pub probes: Vec<DeltaProbe>,
    pub n_used: usize,
    pub converged: bool,
    /// The slowly-varying trace at `s = 0` (rows carry `β^n/R_n(0)`).
    pub trace: crate::iterate::IterationTrace,
}

impl LimitEstimate {
    pub fn delta_hat_at(&self, s: f64) -> Option<f64> {
        self.probes
            .iter()
            .find(|p| (p.s - s).abs() < 1e-12)
            .map(|p| p.delta_hat)
    }
}

/// Estimate `Â(s)` at each probe by iterating the recentered map and
/// accelerating the geometric tail with one Aitken Δ² level (the error
/// ratio is asymptotically `β`). `s = 0` is always included since it
/// carries `K̂`. Non-convergence is reported through the flags, not as an
/// error: the best estimate is still useful data.
pub fn limit_estimate(
    law: &OffspringLaw,
    params: &ProcessParams,
    s_points: &[f64],
    n_max: usize,
    tol: f64,
) -> LimitEstimate {
    let mut points: Vec<f64> = Vec::with_capacity(s_points.len() + 1);
    points.push(0.0);
    for &s in s_points {
        assert!(
            (0.0..1.0).contains(&s) && (s - params.q).abs() > 1e-12,
            "probe points must lie in [0,1) away from q; got {s}"
        );
        if !points.iter().any(|&p| (p - s).abs() < 1e-12) {
            points.push(s);
        }
    }

    let map = RecenteredMap::new(law, params.q);
    let mut probes = Vec::with_capacity(points.len());
    for &s in &points {
        let mut trace = Vec::with_capacity(n_max + 1);
        let mut gap = params.q - s;
        let mut pw = 1.0;
        for _ in 0..=n_max {
            trace.push(gap / pw);
            gap = map.step(gap);
            pw *= params.beta;
        }
        let acc = accel::aitken_scan(&trace, tol);
        probes.push(DeltaProbe {
            s,
            a_hat: acc.value,
            delta_hat: 2.0 * (1.0 / acc.value - 1.0 / (params.q - s)),
            n_used: acc.n_used,
            converged: acc.converged,
        });
    }
    LimitEstimate {
        k_hat: probes[0].a_hat,
        n_used: probes.iter().map(|p| p.n_used).max().unwrap_or(0),
        converged: probes.iter().all(|p| p.converged),
        probes,
        trace: crate::iterate::gf_orbit(law, 0.0, n_max.min(60), Some(params)),
    }
}

/// Series bounds on the measured profile parameter.
///
/// `delta1` and `delta2` are partial sums of
/// `Σ f''(q_a(k))/f'(q_b(k))·β^k` over `q_0(k) = q(1-β^k)`,
/// `q_1(k) = q+(1-q)β^k`, truncated once the geometric tail bound drops
/// below the requested tolerance; the residual is reported in
/// `tail_bound`. When `p_1 = 0` the `k = 0` term of the upper series
/// divides by `f'(0) = 0`: the upper bound is then infinite by the series
/// as written, and is reported so rather than silently dropping the term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsReport {
    pub delta1: f64,
    /// `f64::INFINITY` when `delta2_infinite` is set.
    pub delta2: f64,
    pub delta2_infinite: bool,
    pub terms_used: usize,
    pub tail_bound: f64,
}

pub fn delta_bounds(law: &OffspringLaw, params: &ProcessParams, tol: f64) -> BoundsReport {
    let (q, beta) = (params.q, params.beta);
    let delta2_infinite = law.p1() == 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    let mut bk = 1.0;
    let mut k = 0usize;
    let mut tail = f64::INFINITY;
    while k < 1_000_000 {
        let q0 = q * (1.0 - bk);
        let q1 = q + (1.0 - q) * bk;
        let lo = law.gf_eval(q0);
        let hi = law.gf_eval(q1);
        d1 += lo.d2 / hi.d1 * bk;
        if !delta2_infinite {
            d2 += hi.d2 / lo.d1 * bk;
        }
        k += 1;
        bk *= beta;
        // Both summands are below f''(q1(k))/f'(q0(k)) from here on.
        let q0n = q * (1.0 - bk);
        let q1n = q + (1.0 - q) * bk;
        let f1_lo = law.gf_eval(q0n).d1;
        if f1_lo > 0.0 {
            tail = law.gf_eval(q1n).d2 / f1_lo * bk / (1.0 - beta);
            if tail < tol {
                break;
            }
        }
    }
    BoundsReport {
        delta1: d1,
        delta2: if delta2_infinite { f64::INFINITY } else { d2 },
        delta2_infinite,
        terms_used: k,
        tail_bound: tail,
    }
}

/// One step of the per-step sandwich on `β/R_{n+1}(s) - 1/R_n(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichRow {
    pub n: usize,
    /// `f''(q_0(n)) / (2 f'(q_1(n)))`.
    pub lower: f64,
    /// `β/R_{n+1}(s) - 1/R_n(s)`.
    pub mid: f64,
    /// `f''(q_1(n)) / (2 f'(q_0(n)))`; infinite when `p_1 = 0` at `n = 0`.
    pub upper: f64,
    /// f64 noise allowance on `mid`: the difference of two reciprocals of
    /// order `β^-n` carries roundoff of that magnitude, which eventually
    /// dwarfs the `O(β^n)` width of the bounds themselves.
    pub noise: f64,
}

/// Evaluate the sandwich at every step `n < n_max` for one probe point.
pub fn sandwich_rows(
    law: &OffspringLaw,
    params: &ProcessParams,
    s: f64,
    n_max: usize,
) -> Vec<SandwichRow> {
    assert!((s - params.q).abs() > 1e-12, "sandwich undefined at s = q");
    let (q, beta) = (params.q, params.beta);
    let map = RecenteredMap::new(law, q);
    let mut rows = Vec::with_capacity(n_max);
    let mut gap = q - s;
    let mut bk = 1.0;
    for n in 0..n_max {
        let next = map.step(gap);
        if gap == 0.0 || next == 0.0 {
            break;
        }
        let q0 = q * (1.0 - bk);
        let q1 = q + (1.0 - q) * bk;
        let lo = law.gf_eval(q0);
        let hi = law.gf_eval(q1);
        rows.push(SandwichRow {
            n,
            lower: lo.d2 / (2.0 * hi.d1),
            mid: beta / next - 1.0 / gap,
            upper: hi.d2 / (2.0 * lo.d1),
            noise: 1e-13 * (1.0 / gap.abs() + beta / next.abs()) + 1e-12,
        });
        gap = next;
        bk *= beta;
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureMode {
    ClosedForm,
    Empirical,
}

/// Invariant-series coefficients `ν_j` for `j = 1..=j_max`.
///
/// The profile expands as `Â(s) = Â(0) - Σ_{j≥1} ν_j s^j`; only `j ≥ 1`
/// terms belong to `ν` (the constant `Â(0) > 0` is the decay constant, not
/// a coefficient of the measure).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuCoefficients {
    /// `values[j-1] = ν_j`.
    pub values: Vec<f64>,
    pub mode: MeasureMode,
    pub n_used: usize,
    pub converged: bool,
}

/// `ν_j` either from the closed-form expansion
/// `ν_j = γ^(j-1)/(1+qγ)^(j+1)` or as the extrapolated coefficient limits
/// `ν_j = lim P_1j(n)/β^n` of the iterated series.
pub fn nu_coefficients(
    law: &OffspringLaw,
    params: &ProcessParams,
    j_max: usize,
    mode: MeasureMode,
) -> Result<NuCoefficients, AsymptoticsError> {
    match mode {
        MeasureMode::ClosedForm => {
            let c0 = 1.0 + params.q * params.gamma;
            let ratio = params.gamma / c0;
            let mut values = Vec::with_capacity(j_max);
            let mut v = 1.0 / (c0 * c0);
            for _ in 0..j_max {
                values.push(v);
                v *= ratio;
            }
            Ok(NuCoefficients {
                values,
                mode,
                n_used: 0,
                converged: true,
            })
        }
        MeasureMode::Empirical => {
            let acc = gf_coefficient_limits(law, params, j_max, COEFF_TOL)?;
            Ok(NuCoefficients {
                values: acc.values,
                mode,
                n_used: acc.n_used,
                converged: true,
            })
        }
    }
}

/// Extrapolated limits of the normalized iterate coefficients
/// `P_1j(n)/β^n → ν_j` for `j = 1..=j_max`.
///
/// The iteration is capped where `β^n` reaches the f64 resolution of the
/// coefficients; the Aitken settle point lies well before that for any
/// tolerance above 1e-13.
pub(crate) fn gf_coefficient_limits(
    law: &OffspringLaw,
    params: &ProcessParams,
    j_max: usize,
    tol: f64,
) -> Result<ColumnAccelResult, AsymptoticsError> {
    let n_sat = ((-13.0 * std::f64::consts::LN_10) / params.beta.ln()).ceil() as usize;
    let n_cap = COEFF_N_MAX.min(n_sat.max(8));

    // Outer series at full support: the inner constant term is nonzero, so
    // every outer order feeds the low coefficients of the composition.
    let f = crate::iterate::full_support_series(law, j_max);
    let mut cur: Option<TruncatedSeries> = None; // None = identity (n = 0)
    let mut pw = 1.0;
    let next = || -> Vec<f64> {
        let row: Vec<f64> = match &cur {
            None => (1..=j_max).map(|j| if j == 1 { 1.0 } else { 0.0 }).collect(),
            Some(series) => (1..=j_max).map(|j| series.coeff(j) / pw).collect(),
        };
        // Advance; if the iterate has saturated in f64 leave the state
        // alone, so the trace goes flat and the settle logic accepts it.
        let advanced = match &cur {
            None => Some(f.truncated_to(j_max)),
            Some(series) => powerseries::compose(&f, series).ok(),
        };
        if let Some(series) = advanced {
            cur = Some(series);
            pw *= params.beta;
        }
        row
    };
    let acc = accel::accelerate_columns(next, tol, n_cap);
    if !acc.converged {
        return Err(AsymptoticsError::NotConverged { n_used: acc.n_used });
    }
    Ok(acc)
}

/// The conditional limit law of the population given extinction later than
/// the observation time, together with its mean and the decay constant it
/// implies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YaglomLimit {
    /// Normalized probabilities, `probs[k-1] = P(size = k)`.
    pub probs: Vec<f64>,
    /// Mean `μ` of the limit law.
    pub mean: f64,
    /// `q/μ`, which equals the decay constant `K̂` of the original law.
    pub implied_k: f64,
    pub n_used: usize,
}

/// Conditioning on "dies out, but not yet" is exactly the Harris-
/// Sevastyanov dual process, so the limit law is the dual's normalized
/// coefficient limits. For subcritical laws the dual is the law itself.
pub fn yaglom_conditional(
    law: &OffspringLaw,
    params: &ProcessParams,
    j_max: usize,
) -> Result<YaglomLimit, AsymptoticsError> {
    let dual = law
        .harris_sevastyanov_dual(params.q)
        .expect("derived q is a fixed point");
    let dual_params = derive_params(&dual)?;
    let acc = gf_coefficient_limits(&dual, &dual_params, j_max, COEFF_TOL)?;
    let total = kahan_sum(acc.values.iter().copied());
    let probs: Vec<f64> = acc.values.iter().map(|v| v / total).collect();
    let mean = kahan_sum(probs.iter().enumerate().map(|(idx, &p)| (idx + 1) as f64 * p));
    Ok(YaglomLimit {
        implied_k: params.q / mean,
        probs,
        mean,
        n_used: acc.n_used,
    })
}

/// Comparison of the single-lineage transition probability decay
/// `β^(-n)·P_11(n)` against its closed-form prediction `K²/q²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct P11Report {
    pub empirical_limit: f64,
    /// `K_theory²/q²`.
    pub theory: f64,
    pub discrepancy: f64,
    /// Independent route to the same limit: the empirical coefficient
    /// `ν̂_1 = -Â'(0)`.
    pub nu1_cross_check: Option<f64>,
    /// `p_1 = 0` forces `P_11(n) = 0` for all `n ≥ 1`.
    pub degenerate: bool,
    pub n_used: usize,
    pub converged: bool,
}

/// `P_11(n) = f_n'(0)`: extrapolate `f_n'(0)/β^n` along the orbit.
pub fn p11_check(law: &OffspringLaw, params: &ProcessParams, n_max: usize) -> P11Report {
    let theory = params.k_theory * params.k_theory / (params.q * params.q);
    if law.p1() == 0.0 {
        return P11Report {
            empirical_limit: 0.0,
            theory,
            discrepancy: theory,
            nu1_cross_check: None,
            degenerate: true,
            n_used: 0,
            converged: true,
        };
    }
    let map = RecenteredMap::new(law, params.q);
    let mut trace = Vec::with_capacity(n_max + 1);
    let mut ratio = 1.0;
    let mut gap = params.q;
    for _ in 0..=n_max {
        trace.push(ratio);
        ratio *= law.gf_eval(params.q - gap).d1 / params.beta;
        gap = map.step(gap);
    }
    let acc = accel::aitken_scan(&trace, 1e-11);
    let nu1 = gf_coefficient_limits(law, params, 2, COEFF_TOL)
        .ok()
        .map(|c| c.values[0]);
    P11Report {
        empirical_limit: acc.value,
        theory,
        discrepancy: (acc.value - theory).abs(),
        nu1_cross_check: nu1,
        degenerate: false,
        n_used: acc.n_used,
        converged: acc.converged,
    }
}
