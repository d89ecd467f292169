//! The Q-process: the population chain conditioned on dying out eventually
//! but not yet. Its n-step transition probabilities reweight the plain
//! chain's:
//!
//! ```text
//! Q_ij(n) = j q^(j-i) / (i β^n) · P_ij(n),    i, j ≥ 1,
//! ```
//!
//! and `q^(j-i)·P_ij(n)` is exactly the dual law's transition probability
//! `P^dual_ij(n)` (substitute `s = q·t` in the generating function), so all
//! rows here are built from the Harris-Sevastyanov dual. That keeps every
//! coefficient in `[0,1]` — no `q^(j-i)` overflow for supercritical laws —
//! and makes the row-sum identity `Σ_j Q_ij(n) = 1` an algebraic fact
//! (`f_n(q) = q`, `f_n'(q) = β^n`).
//!
//! The invariant measure `π_j = j q^(j-1) ν_j` is computed two ways:
//! closed-form from the rational profile (`π_j = j(qγ)^(j-1)/(1+qγ)^(j+1)`,
//! exact on linear-fractional laws only) and empirically as extrapolated
//! limits of `Q_1j(n)`. The two sources are kept strictly separate and
//! labeled; comparisons only ever pair like with like.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::asymptotics::{self, AsymptoticsError, MeasureMode, ProcessParams};
use crate::iterate::{self, IterateError, RecenteredMap};
use crate::offspring::{kahan_sum, OffspringLaw};
use crate::powerseries::{self, TruncatedSeries};

/// Default ceiling on visited states during sampling. `β < 1` keeps the
/// chain tight; hitting the cap signals a bug or a near-critical law.
pub const DEFAULT_STATE_CAP: u64 = 10_000;

/// Row tail mass folded into the largest retained state when sampling.
const SAMPLE_TAIL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QProcessError {
    #[error(transparent)]
    Iterate(#[from] IterateError),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
    #[error("state cap {cap} exceeded while resolving the row from state {state}")]
    StateCapExceeded { state: u64, cap: u64 },
}

/// One n-step transition row of the Q-process; `probs[j-1] = Q_ij(n)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QRow {
    pub i: u64,
    pub n: usize,
    pub probs: Vec<f64>,
    pub truncation_loss: f64,
}

fn dual_of(law: &OffspringLaw, params: &ProcessParams) -> OffspringLaw {
    law.harris_sevastyanov_dual(params.q)
        .expect("derived q is a fixed point of f")
}

/// Build `Q_i·(n)` up to state `j_max`. `n = 0` is allowed as the identity
/// row by convention.
pub fn q_row(
    law: &OffspringLaw,
    params: &ProcessParams,
    i: u64,
    n: usize,
    j_max: usize,
) -> Result<QRow, QProcessError> {
    assert!(i >= 1, "source state must be at least 1");
    if n == 0 {
        let mut probs = vec![0.0; j_max];
        if i as usize > j_max {
            return Err(IterateError::TruncationLossExceeded { loss: 1.0 }.into());
        }
        probs[i as usize - 1] = 1.0;
        return Ok(QRow {
            i,
            n,
            probs,
            truncation_loss: 0.0,
        });
    }
    let dual = dual_of(law, params);
    let dual_row = iterate::transition_row(&dual, i, n, j_max)?;
    let scale = 1.0 / (i as f64 * params.beta.powi(n as i32));
    let probs: Vec<f64> = (1..=j_max)
        .map(|j| j as f64 * dual_row.probs[j] * scale)
        .collect();
    let loss = 1.0 - kahan_sum(probs.iter().copied());
    if loss > iterate::ROW_LOSS_TOL {
        return Err(IterateError::TruncationLossExceeded { loss }.into());
    }
    Ok(QRow {
        i,
        n,
        probs,
        truncation_loss: loss.max(0.0),
    })
}

/// The n-step generating function of the Q-process started from `i`:
/// `[f_n(qs)/q]^(i-1) · s·f_n'(qs)/β^n`.
pub fn transition_gf(
    law: &OffspringLaw,
    params: &ProcessParams,
    s: f64,
    n: usize,
    i: u64,
) -> f64 {
    assert!((0.0..=1.0).contains(&s));
    assert!(i >= 1);
    let map = RecenteredMap::new(law, params.q);
    let mut gap = params.q - params.q * s;
    let mut deriv = 1.0;
    for _ in 0..n {
        deriv *= law.gf_eval(params.q - gap).d1;
        gap = map.step(gap);
    }
    let ratio = (params.q - gap) / params.q;
    let w1 = s * deriv / params.beta.powi(n as i32);
    ratio.powi(i as i32 - 1) * w1
}

/// The dual's one-step generating function `f_q(s) = f(qs)/q`.
pub fn dual_gf(law: &OffspringLaw, params: &ProcessParams, s: f64) -> f64 {
    law.gf_eval(params.q * s).value / params.q
}

/// Exact moment identities of the Q-process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QMoments {
    /// One-step mean `α = w'(1-) = 1 + (1-β)γ_q`.
    pub alpha: f64,
    /// `E_i W(n) = (i-1)β^n + 1 + γ_q(1-β^n)`.
    pub mean: f64,
}

pub fn moments(params: &ProcessParams, n: usize, i: u64) -> QMoments {
    let bn = params.beta.powi(n as i32);
    QMoments {
        alpha: 1.0 + (1.0 - params.beta) * params.gamma_q,
        mean: (i as f64 - 1.0) * bn + 1.0 + params.gamma_q * (1.0 - bn),
    }
}

/// `E_i W(n)` by direct differentiation of the generating function: the
/// orbit triple `(f_n(q), f_n'(q), f_n''(q))` is tracked by the chain rule
/// and the product rule applied to `[f_n(qs)/q]^(i-1)·s·f_n'(qs)/β^n` at
/// `s = 1`. Independent of the `γ_q` shortcut in [`moments`].
pub fn mean_w_from_gf(law: &OffspringLaw, params: &ProcessParams, n: usize, i: u64) -> f64 {
    let q = params.q;
    let mut value = q;
    let mut d1 = 1.0;
    let mut d2 = 0.0;
    for _ in 0..n {
        let e = law.gf_eval(value);
        d2 = e.d2 * d1 * d1 + e.d1 * d2;
        d1 = e.d1 * d1;
        value = e.value;
    }
    let bn = params.beta.powi(n as i32);
    let g1 = value / q;
    let i_f = i as f64;
    (i_f - 1.0) * g1.powi(i as i32 - 2) * d1 * (d1 / bn)
        + g1.powi(i as i32 - 1) * (d1 + q * d2) / bn
}

/// The invariant measure of the Q-process with its source labeled.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantMeasure {
    /// Series coefficients `ν_j`, `j = 1..=j_max`.
    pub nu: Vec<f64>,
    /// `π_j = j q^(j-1) ν_j`, `j = 1..=j_max`.
    pub pi: Vec<f64>,
    pub source: MeasureMode,
    /// `‖πQ(1) - π‖₁` over the reported states, with the row space
    /// extended internally until the π tail is below noise, so the number
    /// measures invariance rather than truncation.
    pub residual_l1: f64,
}

/// A state-space length past which the invariant measure's tail is below
/// f64 noise, using the closed-form decay ratio `qγ/(1+qγ)` as a proxy;
/// never below `at_least`. Rows and measures built at this length resolve
/// their mass to ~1e-13.
pub fn tail_resolved_length(params: &ProcessParams, at_least: usize) -> usize {
    let c0 = 1.0 + params.q * params.gamma;
    let ratio = params.q * params.gamma / c0;
    let mut pi = 1.0 / (c0 * c0);
    let mut j = 1usize;
    while pi > 1e-13 && j < 2048 {
        j += 1;
        pi *= ratio * j as f64 / (j as f64 - 1.0);
    }
    j.max(at_least)
}

/// π entries `1..=len` in the requested mode.
fn pi_vector(
    law: &OffspringLaw,
    params: &ProcessParams,
    len: usize,
    mode: MeasureMode,
) -> Result<Vec<f64>, QProcessError> {
    match mode {
        MeasureMode::ClosedForm => {
            // π_j = j (qγ)^(j-1) / (1+qγ)^(j+1), the expansion of
            // -s·A_γ'(qs) = s/(1+qγ(1-s))².
            let c0 = 1.0 + params.q * params.gamma;
            let ratio = params.q * params.gamma / c0;
            let mut out = Vec::with_capacity(len);
            let mut geom = 1.0 / (c0 * c0);
            for j in 1..=len {
                out.push(j as f64 * geom);
                geom *= ratio;
            }
            Ok(out)
        }
        MeasureMode::Empirical => {
            let dual = dual_of(law, params);
            let dual_params = asymptotics::derive_params(&dual)?;
            let acc = asymptotics::gf_coefficient_limits(&dual, &dual_params, len, 1e-12)?;
            Ok(acc
                .values
                .iter()
                .enumerate()
                .map(|(idx, &nu_dual)| (idx + 1) as f64 * nu_dual)
                .collect())
        }
    }
}

/// Invariance defect of a π vector against one application of the one-step
/// transition operator, `Σ_j |Σ_i π_i Q_ij(1) - π_j|` over `j ≤ j_max`.
fn invariance_residual(
    law: &OffspringLaw,
    params: &ProcessParams,
    pi_ext: &[f64],
    j_max: usize,
) -> f64 {
    let dual = dual_of(law, params);
    let f_dual = TruncatedSeries::from_law(&dual, j_max);
    let mut sums = vec![0.0f64; j_max + 1];
    let mut comps = vec![0.0f64; j_max + 1];
    let mut pow = TruncatedSeries::constant(1.0, j_max);
    for (idx, &pi_i) in pi_ext.iter().enumerate() {
        let i = (idx + 1) as f64;
        pow = powerseries::mul(&pow, &f_dual);
        for j in 1..=j_max {
            let term = pi_i * (j as f64) * pow.coeff(j) / (i * params.beta);
            let y = term - comps[j];
            let t = sums[j] + y;
            comps[j] = (t - sums[j]) - y;
            sums[j] = t;
        }
    }
    (1..=j_max).map(|j| (sums[j] - pi_ext[j - 1]).abs()).sum()
}

pub fn invariant_measure(
    law: &OffspringLaw,
    params: &ProcessParams,
    j_max: usize,
    mode: MeasureMode,
) -> Result<InvariantMeasure, QProcessError> {
    let j_ext = tail_resolved_length(params, j_max);
    let pi_ext = pi_vector(law, params, j_ext, mode)?;
    let nu = match mode {
        MeasureMode::ClosedForm => {
            asymptotics::nu_coefficients(law, params, j_max, mode)?.values
        }
        // ν_j = q^(1-j)·π_j/j (coefficients transform under the dual
        // conjugation by q^(j-1)).
        MeasureMode::Empirical => (1..=j_max)
            .map(|j| pi_ext[j - 1] / j as f64 * params.q.powi(1 - j as i32))
            .collect(),
    };
    let residual_l1 = invariance_residual(law, params, &pi_ext, j_max);
    Ok(InvariantMeasure {
        nu,
        pi: pi_ext[..j_max].to_vec(),
        source: mode,
        residual_l1,
    })
}

/// Pointwise residual of π under the one-step Schröder-type relation
/// `π(s) = (w(s)/f_q(s))·π(f_q(s))`, for the requested π source.
pub fn schroder_residual(
    law: &OffspringLaw,
    params: &ProcessParams,
    s_points: &[f64],
    mode: MeasureMode,
) -> Result<Vec<(f64, f64)>, QProcessError> {
    let len = tail_resolved_length(params, 1);
    let pi_series = pi_vector(law, params, len, mode)?;
    let pi_at = |s: f64| -> f64 {
        let mut acc = 0.0;
        for &p in pi_series.iter().rev() {
            acc = (acc + p) * s;
        }
        acc
    };
    let mut out = Vec::with_capacity(s_points.len());
    for &s in s_points {
        assert!((0.0..=1.0).contains(&s));
        let w1 = s * law.gf_eval(params.q * s).d1 / params.beta;
        let fq = dual_gf(law, params, s);
        let rhs = if s == 0.0 { 0.0 } else { w1 / fq * pi_at(fq) };
        out.push((s, (pi_at(s) - rhs).abs()));
    }
    Ok(out)
}

/// Sample a Q-process trajectory `W(0..=steps)` from exact one-step rows
/// built on demand (tail below [`SAMPLE_TAIL_TOL`] folded into the largest
/// retained state). Deterministic for a fixed seed.
pub fn sample_path(
    law: &OffspringLaw,
    params: &ProcessParams,
    w0: u64,
    steps: usize,
    seed: u64,
    state_cap: u64,
) -> Result<Vec<u64>, QProcessError> {
    assert!(w0 >= 1, "the Q-process has no state 0");
    if w0 > state_cap {
        return Err(QProcessError::StateCapExceeded {
            state: w0,
            cap: state_cap,
        });
    }
    let dual = dual_of(law, params);
    let mut rows: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut path = Vec::with_capacity(steps + 1);
    let mut w = w0;
    path.push(w);
    for _ in 0..steps {
        if !rows.contains_key(&w) {
            let cdf = build_row_cdf(&dual, params.beta, w, state_cap)?;
            rows.insert(w, cdf);
        }
        let cdf = &rows[&w];
        let u: f64 = rng.gen();
        let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        w = idx as u64 + 1;
        path.push(w);
    }
    Ok(path)
}

/// Cumulative one-step row from state `i`, grown until the retained mass
/// reaches `1 - SAMPLE_TAIL_TOL`.
fn build_row_cdf(
    dual: &OffspringLaw,
    beta: f64,
    i: u64,
    state_cap: u64,
) -> Result<Vec<f64>, QProcessError> {
    let mut len = 32usize.max(4 * i as usize);
    loop {
        let len_c = len.min(state_cap as usize);
        let f = TruncatedSeries::from_law(dual, len_c);
        let pow = powerseries::power(&f, i);
        let scale = 1.0 / (i as f64 * beta);
        let mut cdf = Vec::with_capacity(len_c);
        let mut cum = 0.0;
        for j in 1..=len_c {
            cum += j as f64 * pow.coeff(j) * scale;
            cdf.push(cum);
        }
        if 1.0 - cum <= SAMPLE_TAIL_TOL {
            *cdf.last_mut().unwrap() = 1.0;
            return Ok(cdf);
        }
        if len_c >= state_cap as usize {
            return Err(QProcessError::StateCapExceeded {
                state: i,
                cap: state_cap,
            });
        }
        len *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics::derive_params;
    use crate::offspring::{linear_fractional, validate};

    fn law(p: &[f64]) -> OffspringLaw {
        validate(p).unwrap()
    }

    fn all_test_laws() -> Vec<OffspringLaw> {
        vec![
            law(&[0.5, 0.25, 0.25]),
            law(&[0.25, 0.0, 0.75]),
            law(&[0.75, 0.0, 0.25]),
            linear_fractional(0.2, 0.5).unwrap(),
        ]
    }

    #[test]
    fn zero_step_row_is_point_mass() {
        let l = law(&[0.5, 0.25, 0.25]);
        let p = derive_params(&l).unwrap();
        let row = q_row(&l, &p, 3, 0, 8).unwrap();
        assert_eq!(row.probs[2], 1.0);
        assert_eq!(row.probs.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn row_sums_to_one() {
        for l in all_test_laws() {
            let p = derive_params(&l).unwrap();
            let j_max = tail_resolved_length(&p, 60);
            for i in [1u64, 2, 3] {
                for n in [1usize, 2, 5, 10] {
                    let row = q_row(&l, &p, i, n, j_max).unwrap();
                    let total: f64 = kahan_sum(row.probs.iter().copied());
                    assert!(
                        (total - 1.0).abs() < 1e-9,
                        "row sum {total} for i={i}, n={n}"
                    );
                }
            }
        }
    }

    #[test]
    fn one_step_entry_by_hand() {
        // Q_12(1) = 2·q·p_2/β = 2·0.25/0.75 for the law with q = 1.
        let l = law(&[0.5, 0.25, 0.25]);
        let p = derive_params(&l).unwrap();
        let row = q_row(&l, &p, 1, 1, 8).unwrap();
        assert!((row.probs[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn gf_normalizes_at_one() {
        for l in all_test_laws() {
            let p = derive_params(&l).unwrap();
            for i in [1u64, 2, 5] {
                for n in [1usize, 3, 10] {
                    let w = transition_gf(&l, &p, 1.0, n, i);
                    assert!((w - 1.0).abs() < 1e-11, "w_{n}^({i})(1) = {w}");
                }
            }
        }
    }

    #[test]
    fn gf_by_hand() {
        // w_1(0.5) = 0.5·f'(0.5)/β = 0.5·0.5/0.75 = 1/3.
        let l = law(&[0.5, 0.25, 0.25]);
        let p = derive_params(&l).unwrap();
        assert!((transition_gf(&l, &p, 0.5, 1, 1) - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn gf_matches_row_sum_expansion() {
        // w_n^{(i)}(s) = Σ_j Q_ij(n) s^j.
        let l = law(&[0.25, 0.0, 0.75]);
        let p = derive_params(&l).unwrap();
        let row = q_row(&l, &p, 2, 3, 80).unwrap();
        for &s in &[0.3, 0.7, 0.9] {
            let direct = transition_gf(&l, &p, s, 3, 2);
            let summed: f64 = row
                .probs
                .iter()
                .enumerate()
                .map(|(idx, &q)| q * s.powi(idx as i32 + 1))
                .sum();
            assert!((direct - summed).abs() < 1e-10, "s={s}: {direct} vs {summed}");
        }
    }

    #[test]
    fn one_step_functional_equation() {
        // w_{n+1}^{(i)}(s) = (w(s)/f_q(s))·w_n^{(i)}(f_q(s)).
        for l in all_test_laws() {
            let p = derive_params(&l).unwrap();
            for i in [1u64, 3] {
                for n in [1usize, 5] {
                    for k in 1..9 {
                        let s = k as f64 / 10.0;
                        let lhs = transition_gf(&l, &p, s, n + 1, i);
                        let w1 = transition_gf(&l, &p, s, 1, 1);
                        let fq = dual_gf(&l, &p, s);
                        let rhs = w1 / fq * transition_gf(&l, &p, fq, n, i);
                        assert!(
                            (lhs - rhs).abs() < 1e-11,
                            "functional equation at s={s}, n={n}, i={i}: {lhs} vs {rhs}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn moments_by_hand_law_b() {
        let l = law(&[0.25, 0.0, 0.75]);
        let p = derive_params(&l).unwrap();
        let m = moments(&p, 1, 1);
        assert!((p.gamma_q - 2.0).abs() < 1e-13);
        assert!((m.alpha - 2.0).abs() < 1e-13);
        assert!((m.mean - 2.0).abs() < 1e-13);
        assert!((moments(&p, 0, 1).mean - 1.0).abs() < 1e-15);
        // n → ∞ mean approaches 1 + γ_q.
        assert!((moments(&p, 400, 1).mean - (1.0 + p.gamma_q)).abs() < 1e-12);
    }

    #[test]
    fn mean_identity_vs_gf_differentiation() {
        for l in all_test_laws() {
            let p = derive_params(&l).unwrap();
            for i in [1u64, 2, 5] {
                for n in [0usize, 1, 5, 20] {
                    let formula = moments(&p, n, i).mean;
                    let direct = mean_w_from_gf(&l, &p, n, i);
                    assert!(
                        (formula - direct).abs() < 1e-11,
                        "E_{i} W({n}): {formula} vs {direct}"
                    );
                }
            }
        }
    }

    #[test]
    fn closed_form_pi_law_b_by_hand() {
        // qγ = 1: π_j = j/2^(j+1).
        let l = law(&[0.25, 0.0, 0.75]);
        let p = derive_params(&l).unwrap();
        let m = invariant_measure(&l, &p, 60, MeasureMode::ClosedForm).unwrap();
        assert!((m.pi[0] - 0.25).abs() < 1e-12);
        assert!((m.pi[1] - 0.25).abs() < 1e-12);
        assert!((m.pi[2] - 3.0 / 16.0).abs() < 1e-12);
        let total = kahan_sum(m.pi.iter().copied());
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pi_equals_j_q_pow_nu_entrywise() {
        for l in all_test_laws() {
            let p = derive_params(&l).unwrap();
            for mode in [MeasureMode::ClosedForm, MeasureMode::Empirical] {
                let m = invariant_measure(&l, &p, 40, mode).unwrap();
                for j in 1..=40usize {
                    let want = j as f64 * p.q.powi(j as i32 - 1) * m.nu[j - 1];
                    assert!(
                        (m.pi[j - 1] - want).abs() < 1e-12,
                        "{mode:?} π_{j}: {} vs {}",
                        m.pi[j - 1],
                        want
                    );
                }
            }
        }
    }

    #[test]
    fn lf_empirical_matches_closed_form() {
        let l = linear_fractional(0.2, 0.5).unwrap();
        let p = derive_params(&l).unwrap();
        let closed = invariant_measure(&l, &p, 60, MeasureMode::ClosedForm).unwrap();
        let emp = invariant_measure(&l, &p, 60, MeasureMode::Empirical).unwrap();
        for j in 0..60 {
            assert!(
                (closed.pi[j] - emp.pi[j]).abs() < 1e-7,
                "π_{}: {} vs {}",
                j + 1,
                closed.pi[j],
                emp.pi[j]
            );
        }
        assert!(emp.residual_l1 < 1e-9, "residual {}", emp.residual_l1);
        assert!(closed.residual_l1 < 1e-9);
    }

    #[test]
    fn empirical_pi_is_invariant_for_all_laws() {
        for l in all_test_laws() {
            let p = derive_params(&l).unwrap();
            let m = invariant_measure(&l, &p, 60, MeasureMode::Empirical).unwrap();
            assert!(
                m.residual_l1 < 1e-6,
                "invariance residual {} for {l:?}",
                m.residual_l1
            );
        }
    }

    #[test]
    fn ratio_convergence_in_source_state() {
        // Q_ij(n)/Q_1j(n) → 1: closer at n = 40 than at n = 5.
        for l in all_test_laws() {
            let p = derive_params(&l).unwrap();
            let probe_js: Vec<usize> = if l.p1() == 0.0 { vec![2, 4, 6] } else { vec![1, 2, 3] };
            for i in [2u64, 3] {
                let near = q_row(&l, &p, i, 5, 120).unwrap();
                let one_near = q_row(&l, &p, 1, 5, 120).unwrap();
                let far = q_row(&l, &p, i, 40, 120).unwrap();
                let one_far = q_row(&l, &p, 1, 40, 120).unwrap();
                for &j in &probe_js {
                    let r5 = near.probs[j - 1] / one_near.probs[j - 1];
                    let r40 = far.probs[j - 1] / one_far.probs[j - 1];
                    assert!(
                        (r40 - 1.0).abs() < (r5 - 1.0).abs(),
                        "i={i} j={j}: |{r40}-1| !< |{r5}-1|"
                    );
                }
            }
        }
    }

    #[test]
    fn chapman_kolmogorov_on_truncated_space() {
        let l = law(&[0.5, 0.25, 0.25]);
        let p = derive_params(&l).unwrap();
        let j_max = 60;
        for (n, m) in [(1usize, 1usize), (1, 2), (2, 3)] {
            // Rows out of high intermediate states spread far; build them
            // long enough that their own truncation stays below 1e-6.
            let second_leg: Vec<QRow> = (1..=j_max)
                .map(|k| q_row(&l, &p, k as u64, m, 4 * j_max).unwrap())
                .collect();
            for i in [1u64, 2] {
                let direct = q_row(&l, &p, i, n + m, j_max).unwrap();
                let first = q_row(&l, &p, i, n, j_max).unwrap();
                for j in 1..=16usize {
                    let acc: f64 = (1..=j_max)
                        .map(|k| first.probs[k - 1] * second_leg[k - 1].probs[j - 1])
                        .sum();
                    assert!(
                        (acc - direct.probs[j - 1]).abs() < 1e-8,
                        "CK failed at i={i}, j={j}, ({n},{m})"
                    );
                }
            }
        }
    }

    #[test]
    fn schroder_residuals() {
        let l = linear_fractional(0.2, 0.5).unwrap();
        let p = derive_params(&l).unwrap();
        for (s, r) in schroder_residual(&l, &p, &[0.0, 0.5, 1.0], MeasureMode::ClosedForm).unwrap()
        {
            assert!(r < 1e-12, "closed-form residual at s={s}: {r}");
        }
        for l in all_test_laws() {
            let p = derive_params(&l).unwrap();
            for (s, r) in
                schroder_residual(&l, &p, &[0.0, 0.25, 0.5, 0.75, 1.0], MeasureMode::Empirical)
                    .unwrap()
            {
                assert!(r < 1e-6, "empirical residual at s={s}: {r} for {l:?}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_positive() {
        let l = law(&[0.25, 0.0, 0.75]);
        let p = derive_params(&l).unwrap();
        let a = sample_path(&l, &p, 1, 200, 42, DEFAULT_STATE_CAP).unwrap();
        let b = sample_path(&l, &p, 1, 200, 42, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&w| w >= 1));
        let c = sample_path(&l, &p, 1, 200, 43, DEFAULT_STATE_CAP).unwrap();
        assert_ne!(a, c, "different seeds should explore different paths");
    }

    #[test]
    fn sampling_rejects_oversized_start() {
        let l = law(&[0.25, 0.0, 0.75]);
        let p = derive_params(&l).unwrap();
        assert!(matches!(
            sample_path(&l, &p, 50_000, 1, 0, DEFAULT_STATE_CAP),
            Err(QProcessError::StateCapExceeded { .. })
        ));
    }

    #[test]
    fn sampled_mean_matches_moment_identity() {
        let l = law(&[0.5, 0.25, 0.25]);
        let p = derive_params(&l).unwrap();
        let steps = 6;
        let runs = 100_000u64;
        let mut sum = 0u64;
        let mut sum_sq = 0u128;
        for seed in 0..runs {
            let path = sample_path(&l, &p, 1, steps, seed, DEFAULT_STATE_CAP).unwrap();
            let w = *path.last().unwrap();
            sum += w;
            sum_sq += (w as u128) * (w as u128);
        }
        let mean = sum as f64 / runs as f64;
        let var = (sum_sq as f64 - runs as f64 * mean * mean) / (runs as f64 - 1.0);
        let stderr = (var / runs as f64).sqrt();
        let want = moments(&p, steps, 1).mean;
        assert!(
            (mean - want).abs() < 3.0 * stderr,
            "sampled mean {mean} vs {want} (stderr {stderr})"
        );
    }
}
