//! Offspring laws, their generating functions, moments, and the
//! Harris-Sevastyanov dual transform.
//!
//! An offspring law is either a finite probability mass list `p_0..p_D` or a
//! member of the linear-fractional family `p_0 = 1 - b/(1-c)`,
//! `p_k = b·c^(k-1)` for `k ≥ 1` with `b, c ∈ (0,1)`. The linear-fractional
//! family is the one built-in parametric family because its generating
//! function iterates have an exact closed form, which makes it the oracle
//! family for everything downstream.
//!
//! Every law satisfies `p_0 > 0`, `p_0 + p_1 < 1` and no single `p_k = 1`;
//! degenerate inputs are rejected with the full list of violated
//! constraints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on `|Σ p_k - 1|` for mass lists.
pub const MASS_TOL: f64 = 1e-12;

/// Tail mass at which linear-fractional laws are cut when a finite pmf is
/// required (series arithmetic, simulation).
pub const LF_TRUNCATION_TAIL: f64 = 1e-15;

/// Tolerance on `|f(q) - q|` when a caller supplies an extinction
/// probability to the dual transform.
pub const FIXED_POINT_TOL: f64 = 1e-10;

/// A single violated validity constraint.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("mass p[{index}] = {value} is negative")]
    NegativeMass { index: usize, value: f64 },
    #[error("mass p[{index}] = {value} is not finite")]
    NonFiniteMass { index: usize, value: f64 },
    #[error("masses sum to {sum} (must be 1 within {MASS_TOL:e})")]
    MassSumMismatch { sum: f64 },
    #[error("degenerate law: {reason}")]
    DegenerateLaw { reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LawError {
    /// Validation failed; lists every violated constraint.
    #[error("invalid offspring law: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    /// The supplied `q` is not a fixed point of the generating function.
    #[error("q = {q} is not a fixed point of f: |f(q) - q| = {residual:e} > {FIXED_POINT_TOL:e}")]
    NotFixedPoint { q: f64, residual: f64 },
}

fn format_violations(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// An offspring distribution. Serialized form matches the law file format:
/// `{"type":"pmf","p":[...]}` or `{"type":"linear_fractional","b":..,"c":..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OffspringLaw {
    Pmf { p: Vec<f64> },
    LinearFractional { b: f64, c: f64 },
}

/// Values of the generating function and its first two derivatives at a
/// point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfEval {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// First and second factorial moments of a law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSet {
    /// Mean offspring count `m = f'(1-)`.
    pub m: f64,
    /// Second factorial moment `f''(1-)`.
    pub second_factorial: f64,
    /// `f''(1-)/2`.
    pub b_one: f64,
}

/// A finite-pmf rendering of a law, with the truncation recorded so that
/// downstream coefficient computations are reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedLaw {
    pub law: OffspringLaw,
    /// Highest retained offspring count.
    pub order: usize,
    /// Mass dropped before renormalization (zero for pmf inputs).
    pub tail_mass: f64,
}

/// Validate a raw mass list into a law, rejecting on any violated
/// constraint.
pub fn validate(raw_masses: &[f64]) -> Result<OffspringLaw, LawError> {
    validate_with(raw_masses, false)
}

/// Like [`validate`] but renormalizes the masses when their sum is off by
/// more than [`MASS_TOL`]. Renormalization never repairs negative masses or
/// degeneracy.
pub fn validate_renormalizing(raw_masses: &[f64]) -> Result<OffspringLaw, LawError> {
    validate_with(raw_masses, true)
}

fn validate_with(raw_masses: &[f64], renormalize: bool) -> Result<OffspringLaw, LawError> {
    assert!(!raw_masses.is_empty(), "mass list must be nonempty");
    let mut violations = Vec::new();
    for (index, &value) in raw_masses.iter().enumerate() {
        if !value.is_finite() {
            violations.push(Violation::NonFiniteMass { index, value });
        } else if value < 0.0 {
            violations.push(Violation::NegativeMass { index, value });
        }
    }

    let sum = kahan_sum(raw_masses.iter().copied());
    let mut masses: Vec<f64> = raw_masses.to_vec();
    if (sum - 1.0).abs() > MASS_TOL {
        if renormalize && violations.is_empty() && sum > 0.0 {
            for p in &mut masses {
                *p /= sum;
            }
        } else {
            violations.push(Violation::MassSumMismatch { sum });
        }
    }

    let p0 = masses[0];
    let p1 = masses.get(1).copied().unwrap_or(0.0);
    if p0 <= 0.0 {
        violations.push(Violation::DegenerateLaw {
            reason: "p_0 = 0 (instant extinction impossible)".into(),
        });
    }
    if p0 + p1 >= 1.0 {
        violations.push(Violation::DegenerateLaw {
            reason: format!("p_0 + p_1 = {} >= 1 (no branching)", p0 + p1),
        });
    }
    if let Some(k) = masses.iter().position(|&p| p == 1.0) {
        violations.push(Violation::DegenerateLaw {
            reason: format!("p_{k} = 1 (deterministic offspring)"),
        });
    }

    if violations.is_empty() {
        Ok(OffspringLaw::Pmf { p: masses })
    } else {
        Err(LawError::Invalid(violations))
    }
}

/// Construct a linear-fractional law `p_0 = 1 - b/(1-c)`, `p_k = b·c^(k-1)`.
pub fn linear_fractional(b: f64, c: f64) -> Result<OffspringLaw, LawError> {
    let mut violations = Vec::new();
    if !b.is_finite() || !(0.0 < b && b < 1.0) {
        violations.push(Violation::DegenerateLaw {
            reason: format!("linear-fractional b = {b} outside (0,1)"),
        });
    }
    if !c.is_finite() || !(0.0 < c && c < 1.0) {
        violations.push(Violation::DegenerateLaw {
            reason: format!("linear-fractional c = {c} outside (0,1)"),
        });
    }
    if violations.is_empty() && b / (1.0 - c) >= 1.0 {
        violations.push(Violation::DegenerateLaw {
            reason: format!("b/(1-c) = {} >= 1 forces p_0 <= 0", b / (1.0 - c)),
        });
    }
    if violations.is_empty() {
        Ok(OffspringLaw::LinearFractional { b, c })
    } else {
        Err(LawError::Invalid(violations))
    }
}

impl OffspringLaw {
    /// Re-run full validation (used after deserializing a law file).
    pub fn revalidate(&self) -> Result<OffspringLaw, LawError> {
        match self {
            OffspringLaw::Pmf { p } => validate(p),
            OffspringLaw::LinearFractional { b, c } => linear_fractional(*b, *c),
        }
    }

    /// `p_0`.
    pub fn p0(&self) -> f64 {
        match self {
            OffspringLaw::Pmf { p } => p[0],
            OffspringLaw::LinearFractional { b, c } => 1.0 - b / (1.0 - c),
        }
    }

    /// `p_1`.
    pub fn p1(&self) -> f64 {
        match self {
            OffspringLaw::Pmf { p } => p.get(1).copied().unwrap_or(0.0),
            OffspringLaw::LinearFractional { b, .. } => *b,
        }
    }

    /// Highest offspring count with positive mass, `None` for the
    /// infinite-support linear-fractional family.
    pub fn degree(&self) -> Option<usize> {
        match self {
            OffspringLaw::Pmf { p } => Some(p.iter().rposition(|&x| x > 0.0).unwrap_or(0)),
            OffspringLaw::LinearFractional { .. } => None,
        }
    }

    pub fn is_linear_fractional(&self) -> bool {
        matches!(self, OffspringLaw::LinearFractional { .. })
    }

    /// Evaluate `(f(s), f'(s), f''(s))`.
    ///
    /// Finite pmfs use a fused Horner pass; linear-fractional laws use the
    /// closed rational form `f(s) = p_0 + b·s/(1-c·s)`.
    pub fn gf_eval(&self, s: f64) -> GfEval {
        assert!(
            (0.0..=1.0).contains(&s),
            "generating function evaluated outside [0,1]: s = {s}"
        );
        match self {
            OffspringLaw::Pmf { p } => {
                let mut value = *p.last().unwrap();
                let mut d1 = 0.0;
                let mut d2 = 0.0;
                for &coeff in p.iter().rev().skip(1) {
                    d2 = d2 * s + d1;
                    d1 = d1 * s + value;
                    value = value * s + coeff;
                }
                GfEval {
                    value,
                    d1,
                    d2: 2.0 * d2,
                }
            }
            OffspringLaw::LinearFractional { b, c } => {
                let denom = 1.0 - c * s;
                GfEval {
                    value: self.p0() + b * s / denom,
                    d1: b / (denom * denom),
                    d2: 2.0 * b * c / (denom * denom * denom),
                }
            }
        }
    }

    /// First two factorial moments, taken from the same evaluation path as
    /// [`Self::gf_eval`] so that derived quantities agree bitwise.
    pub fn moments(&self) -> MomentSet {
        let at_one = self.gf_eval(1.0);
        MomentSet {
            m: at_one.d1,
            second_factorial: at_one.d2,
            b_one: at_one.d2 / 2.0,
        }
    }

    /// Harris-Sevastyanov dual: the law with generating function
    /// `f_q(s) = f(qs)/q`, i.e. masses `p_k·q^(k-1)`. Describes the process
    /// conditioned on eventual extinction; for `q = 1` it is the law itself.
    pub fn harris_sevastyanov_dual(&self, q: f64) -> Result<OffspringLaw, LawError> {
        assert!(0.0 < q && q <= 1.0, "q must lie in (0,1], got {q}");
        let residual = (self.gf_eval(q).value - q).abs();
        if residual > FIXED_POINT_TOL {
            return Err(LawError::NotFixedPoint { q, residual });
        }
        if q == 1.0 {
            return Ok(self.clone());
        }
        match self {
            OffspringLaw::Pmf { p } => {
                let dual: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| pk * q.powi(k as i32 - 1))
                    .collect();
                Ok(OffspringLaw::Pmf { p: dual })
            }
            // p_k q^(k-1) = b (cq)^(k-1): the family is closed under the dual.
            OffspringLaw::LinearFractional { b, c } => Ok(OffspringLaw::LinearFractional {
                b: *b,
                c: c * q,
            }),
        }
    }

    /// Render as a finite pmf, cutting linear-fractional tails at
    /// [`LF_TRUNCATION_TAIL`] and renormalizing. The truncation order is
    /// recorded so downstream coefficients are reproducible.
    pub fn to_finite_pmf(&self) -> TruncatedLaw {
        match self {
            OffspringLaw::Pmf { p } => TruncatedLaw {
                law: self.clone(),
                order: p.len() - 1,
                tail_mass: 0.0,
            },
            OffspringLaw::LinearFractional { b, c } => {
                // Tail mass past index K is b·c^K/(1-c).
                let mut masses = vec![self.p0()];
                let mut pk = *b;
                let mut order = 1;
                while pk * c / (1.0 - c) > LF_TRUNCATION_TAIL {
                    masses.push(pk);
                    pk *= c;
                    order += 1;
                }
                masses.push(pk);
                let tail_mass = pk * c / (1.0 - c);
                let sum = kahan_sum(masses.iter().copied());
                for m in &mut masses {
                    *m /= sum;
                }
                TruncatedLaw {
                    law: OffspringLaw::Pmf { p: masses },
                    order,
                    tail_mass,
                }
            }
        }
    }
}

/// Compensated summation; convolution sums and mass totals route through
/// this to keep rounding at the single-ulp level.
pub fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn law(p: &[f64]) -> OffspringLaw {
        validate(p).unwrap()
    }

    #[test]
    fn validates_well_formed_pmf() {
        let l = law(&[0.5, 0.25, 0.25]);
        assert_eq!(l.degree(), Some(2));
    }

    #[test]
    fn rejects_zero_p0() {
        let err = validate(&[0.0, 1.0]).unwrap_err();
        let LawError::Invalid(vs) = err else {
            panic!("expected Invalid")
        };
        assert!(vs
            .iter()
            .any(|v| matches!(v, Violation::DegenerateLaw { .. })));
    }

    #[test]
    fn rejects_mass_sum_mismatch() {
        let err = validate(&[0.5, 0.6]).unwrap_err();
        let LawError::Invalid(vs) = err else {
            panic!("expected Invalid")
        };
        assert!(vs
            .iter()
            .any(|v| matches!(v, Violation::MassSumMismatch { .. })));
    }

    #[test]
    fn collects_every_violation() {
        let err = validate(&[0.0, 0.5, -0.1]).unwrap_err();
        let LawError::Invalid(vs) = err else {
            panic!("expected Invalid")
        };
        assert!(vs.len() >= 3, "expected all violations listed, got {vs:?}");
    }

    #[test]
    fn renormalize_flag_repairs_scaled_masses() {
        let l = validate_renormalizing(&[1.0, 0.5, 0.5]).unwrap();
        let OffspringLaw::Pmf { p } = &l else {
            panic!()
        };
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!(validate(&[1.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn gf_eval_polynomial_by_hand() {
        let l = law(&[0.5, 0.25, 0.25]);
        let e = l.gf_eval(1.0);
        assert_eq!(e.value, 1.0);
        assert_eq!(e.d1, 0.75);
        assert_eq!(e.d2, 0.5);
    }

    #[test]
    fn gf_eval_linear_fractional_by_hand() {
        // f'(1) = b/(1-c)^2 = 0.8, f''(1) = 2bc/(1-c)^3 = 1.6
        let l = linear_fractional(0.2, 0.5).unwrap();
        let e = l.gf_eval(1.0);
        assert!((e.value - 1.0).abs() < 1e-15);
        assert!((e.d1 - 0.8).abs() < 1e-15);
        assert!((e.d2 - 1.6).abs() < 1e-15);
    }

    #[test]
    fn moments_by_hand() {
        let ms = law(&[0.5, 0.25, 0.25]).moments();
        assert_eq!(ms.m, 0.75);
        assert_eq!(ms.b_one, 0.25);
        assert_eq!(law(&[0.25, 0.0, 0.75]).moments().m, 1.5);
        let lf = linear_fractional(0.2, 0.5).unwrap().moments();
        assert!((lf.m - 0.8).abs() < 1e-15);
        assert!((lf.second_factorial - 1.6).abs() < 1e-15);
    }

    #[test]
    fn dual_of_supercritical_law() {
        let l = law(&[0.25, 0.0, 0.75]);
        let dual = l.harris_sevastyanov_dual(1.0 / 3.0).unwrap();
        let OffspringLaw::Pmf { p } = &dual else {
            panic!()
        };
        assert!((p[0] - 0.75).abs() < 1e-14);
        assert!(p[1].abs() < 1e-14);
        assert!((p[2] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn dual_at_q_one_is_identity() {
        let l = law(&[0.5, 0.25, 0.25]);
        assert_eq!(l.harris_sevastyanov_dual(1.0).unwrap(), l);
    }

    #[test]
    fn dual_rejects_non_fixed_point() {
        let l = law(&[0.25, 0.0, 0.75]);
        assert!(matches!(
            l.harris_sevastyanov_dual(0.5),
            Err(LawError::NotFixedPoint { .. })
        ));
    }

    #[test]
    fn dual_mean_is_beta_of_original() {
        // Dual mean f_q'(1) must equal f'(q) of the original.
        let l = law(&[0.25, 0.0, 0.75]);
        let q = 1.0 / 3.0;
        let dual = l.harris_sevastyanov_dual(q).unwrap();
        assert!((dual.gf_eval(1.0).d1 - l.gf_eval(q).d1).abs() < 1e-12);
    }

    #[test]
    fn lf_truncation_matches_rational_evaluation() {
        let l = linear_fractional(0.2, 0.5).unwrap();
        let t = l.to_finite_pmf();
        assert!(t.tail_mass <= LF_TRUNCATION_TAIL);
        for i in 0..=20 {
            let s = i as f64 / 20.0;
            let exact = l.gf_eval(s).value;
            let trunc = t.law.gf_eval(s).value;
            assert!(
                (exact - trunc).abs() < 1e-12,
                "mismatch at s={s}: {exact} vs {trunc}"
            );
        }
    }

    proptest! {
        // f(1) = 1 for every valid law.
        #[test]
        fn gf_at_one_is_total_mass(raw in proptest::collection::vec(0.0f64..1.0, 2..8)) {
            if let Ok(l) = validate_renormalizing(&raw) {
                prop_assert!((l.gf_eval(1.0).value - 1.0).abs() < 1e-12);
            }
        }

        // The dual transform preserves validity and maps the mean to f'(q) <= 1.
        #[test]
        fn lf_dual_is_valid_and_subcritical(b in 0.05f64..0.9, c in 0.05f64..0.9) {
            prop_assume!(b / (1.0 - c) < 1.0);
            let l = linear_fractional(b, c).unwrap();
            let m = l.moments().m;
            prop_assume!((m - 1.0).abs() > 1e-3);
            let q = if m < 1.0 { 1.0 } else { l.p0() / c };
            let dual = l.harris_sevastyanov_dual(q).unwrap();
            prop_assert!(dual.revalidate().is_ok());
            prop_assert!(dual.moments().m <= 1.0 + 1e-9);
        }
    }
}
