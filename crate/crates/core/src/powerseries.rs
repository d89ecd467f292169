//! Truncated power-series arithmetic.
//!
//! This is the coefficient engine behind n-step transition rows: the row
//! `P_i·(n)` is the coefficient sequence of `[f_n(s)]^i`, built by composing
//! the offspring generating function with itself and raising the result to
//! integer powers. All series are dense `f64` coefficient vectors truncated
//! at a fixed order; binary operations truncate to the shorter order and
//! record the tail mass they drop. Convolution sums use compensated (Kahan)
//! accumulation since they are the dominant rounding source at order ~500.

use thiserror::Error;

use crate::offspring::{kahan_sum, OffspringLaw};

/// Default truncation order (highest retained exponent).
pub const DEFAULT_ORDER: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeriesError {
    #[error("inner series constant term {0} outside [0,1)")]
    InnerConstantOutOfRange(f64),
    #[error("cannot differentiate a series of order zero")]
    ZeroOrderSeries,
}

/// A power series truncated at order J: coefficients `c_0..c_J`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSeries {
    coeffs: Vec<f64>,
    lost_mass: f64,
}

impl TruncatedSeries {
    /// Build from explicit coefficients; the order is `coeffs.len() - 1`.
    pub fn new(coeffs: Vec<f64>) -> Self {
        assert!(!coeffs.is_empty(), "a series needs at least a constant term");
        TruncatedSeries {
            coeffs,
            lost_mass: 0.0,
        }
    }

    pub fn zero(order: usize) -> Self {
        TruncatedSeries::new(vec![0.0; order + 1])
    }

    pub fn constant(value: f64, order: usize) -> Self {
        let mut s = TruncatedSeries::zero(order);
        s.coeffs[0] = value;
        s
    }

    /// The identity series `s`.
    pub fn identity(order: usize) -> Self {
        assert!(order >= 1);
        let mut s = TruncatedSeries::zero(order);
        s.coeffs[1] = 1.0;
        s
    }

    /// The generating function of a law as a series. Linear-fractional laws
    /// are cut at their standard tail (`offspring::LF_TRUNCATION_TAIL`).
    pub fn from_law(law: &OffspringLaw, order: usize) -> Self {
        let truncated = law.to_finite_pmf();
        let OffspringLaw::Pmf { p } = &truncated.law else {
            unreachable!("to_finite_pmf always yields a pmf")
        };
        let mut coeffs = vec![0.0; order + 1];
        let keep = p.len().min(order + 1);
        coeffs[..keep].copy_from_slice(&p[..keep]);
        let lost_mass = truncated.tail_mass + kahan_sum(p[keep..].iter().copied());
        TruncatedSeries { coeffs, lost_mass }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, j: usize) -> f64 {
        self.coeffs.get(j).copied().unwrap_or(0.0)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Tail mass dropped by truncating operations that produced this series.
    pub fn lost_mass(&self) -> f64 {
        self.lost_mass
    }

    /// Copy truncated to a (usually lower) order, recording dropped mass.
    pub fn truncated_to(&self, order: usize) -> TruncatedSeries {
        if order >= self.order() {
            let mut out = self.clone();
            out.coeffs.resize(order + 1, 0.0);
            return out;
        }
        let coeffs = self.coeffs[..=order].to_vec();
        let dropped = kahan_sum(self.coeffs[order + 1..].iter().copied());
        TruncatedSeries {
            coeffs,
            lost_mass: self.lost_mass + dropped.max(0.0),
        }
    }

    /// Horner evaluation at a point.
    pub fn evaluate(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * s + c;
        }
        acc
    }

    pub fn sum(&self) -> f64 {
        kahan_sum(self.coeffs.iter().copied())
    }

    /// Whether the coefficients look like a (possibly sub-)probability mass
    /// sequence: entries in `[-1e-12, 1+1e-12]` with partial sums `≤ 1+1e-9`.
    pub fn is_probability_series(&self) -> bool {
        let mut partial = 0.0;
        for &c in &self.coeffs {
            if !(-1e-12..=1.0 + 1e-12).contains(&c) {
                return false;
            }
            partial += c;
            if partial > 1.0 + 1e-9 {
                return false;
            }
        }
        true
    }
}

/// Truncated product. The result order is the shorter of the two inputs;
/// the dropped cross terms are estimated as `Σa·Σb - Σ(a·b)` and added to
/// the result's lost-mass account.
pub fn mul(a: &TruncatedSeries, b: &TruncatedSeries) -> TruncatedSeries {
    let order = a.order().min(b.order());
    let mut coeffs = vec![0.0; order + 1];
    for (j, out) in coeffs.iter_mut().enumerate() {
        // Kahan-compensated convolution sum.
        let mut sum = 0.0;
        let mut comp = 0.0;
        let lo = j.saturating_sub(b.coeffs.len() - 1);
        for i in lo..=j.min(a.coeffs.len() - 1) {
            let term = a.coeffs[i] * b.coeffs[j - i];
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        *out = sum;
    }
    let mut result = TruncatedSeries::new(coeffs);
    let dropped = a.sum() * b.sum() - result.sum();
    result.lost_mass = a.lost_mass + b.lost_mass + dropped.max(0.0);
    result
}

/// Coefficients of `outer(inner(s))`, truncated to the shorter order.
///
/// Horner over the series ring; requires the inner constant term in `[0,1)`
/// (composition of probability generating functions below the fixed point).
pub fn compose(
    outer: &TruncatedSeries,
    inner: &TruncatedSeries,
) -> Result<TruncatedSeries, SeriesError> {
    let c0 = inner.coeff(0);
    if !(0.0..1.0).contains(&c0) {
        return Err(SeriesError::InnerConstantOutOfRange(c0));
    }
    let order = outer.order().min(inner.order());
    let mut acc = TruncatedSeries::constant(*outer.coeffs.last().unwrap(), order);
    for &c in outer.coeffs.iter().rev().skip(1) {
        acc = mul(&acc, inner);
        acc.coeffs[0] += c;
    }
    acc.lost_mass += outer.lost_mass;
    Ok(acc)
}

/// `a(s)^i` for `i ≥ 1`, by repeated squaring over truncated convolution.
pub fn power(a: &TruncatedSeries, i: u64) -> TruncatedSeries {
    assert!(i >= 1, "power requires a positive exponent");
    if i == 1 {
        return a.clone();
    }
    let mut base = a.clone();
    let mut acc: Option<TruncatedSeries> = None;
    let mut exp = i;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(prev) => mul(&prev, &base),
            });
        }
        exp >>= 1;
        if exp > 0 {
            base = mul(&base, &base);
        }
    }
    acc.unwrap()
}

/// Term-wise derivative; the order drops by one.
pub fn differentiate(a: &TruncatedSeries) -> Result<TruncatedSeries, SeriesError> {
    if a.order() == 0 {
        return Err(SeriesError::ZeroOrderSeries);
    }
    let coeffs = a
        .coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(j, &c)| j as f64 * c)
        .collect();
    Ok(TruncatedSeries {
        coeffs,
        lost_mass: a.lost_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::validate;
    use proptest::prelude::*;

    fn law_series(p: &[f64], order: usize) -> TruncatedSeries {
        TruncatedSeries::from_law(&validate(p).unwrap(), order)
    }

    #[test]
    fn compose_with_identity_is_bitwise_identity() {
        let f = law_series(&[0.5, 0.25, 0.25], 16);
        let id = TruncatedSeries::identity(16);
        assert_eq!(compose(&f, &id).unwrap().coeffs(), f.coeffs());
    }

    #[test]
    fn compose_binomial_square() {
        // s^2 composed with 0.5 + 0.5 s.
        let outer = TruncatedSeries::new(vec![0.0, 0.0, 1.0]);
        let inner = TruncatedSeries::new(vec![0.5, 0.5]);
        let got = compose(&outer, &inner).unwrap();
        assert_eq!(got.coeffs(), &[0.25, 0.5]);
    }

    #[test]
    fn self_composition_constant_term() {
        // f(f(0)) = f(0.5) = 0.6875 for f = 0.5 + 0.25 s + 0.25 s^2.
        let f = law_series(&[0.5, 0.25, 0.25], 8);
        let got = compose(&f, &f).unwrap();
        assert!((got.coeff(0) - 0.6875).abs() < 1e-15);
    }

    #[test]
    fn compose_rejects_inner_constant_at_one() {
        let f = law_series(&[0.5, 0.25, 0.25], 4);
        let inner = TruncatedSeries::constant(1.0, 4);
        assert!(matches!(
            compose(&f, &inner),
            Err(SeriesError::InnerConstantOutOfRange(_))
        ));
    }

    #[test]
    fn power_one_is_bitwise_identity() {
        let f = law_series(&[0.5, 0.25, 0.25], 8);
        assert_eq!(power(&f, 1).coeffs(), f.coeffs());
    }

    #[test]
    fn power_of_binomial() {
        let a = TruncatedSeries::new(vec![0.5, 0.5, 0.0]);
        let sq = power(&a, 2);
        assert_eq!(sq.coeffs(), &[0.25, 0.5, 0.25]);
    }

    #[test]
    fn power_constant_term_is_p0_squared() {
        // P_20(1) = p_0^2: coefficient of s^0 in f^2.
        let f = law_series(&[0.5, 0.25, 0.25], 8);
        assert!((power(&f, 2).coeff(0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn differentiate_constant_and_identity() {
        let c = TruncatedSeries::constant(3.0, 3);
        assert_eq!(differentiate(&c).unwrap().coeffs(), &[0.0, 0.0, 0.0]);
        let id = TruncatedSeries::identity(3);
        assert_eq!(differentiate(&id).unwrap().coeffs(), &[1.0, 0.0, 0.0]);
        assert!(matches!(
            differentiate(&TruncatedSeries::constant(1.0, 0)),
            Err(SeriesError::ZeroOrderSeries)
        ));
    }

    #[test]
    fn differentiate_law_by_hand() {
        let f = law_series(&[0.5, 0.25, 0.25], 2);
        assert_eq!(differentiate(&f).unwrap().coeffs(), &[0.25, 0.5]);
    }

    // Brute-force convolution of the one-step row: P_ij(1) as an i-fold
    // convolution of the pmf, independent of the series code path.
    fn brute_force_row(p: &[f64], i: usize) -> Vec<f64> {
        let mut row = vec![1.0];
        for _ in 0..i {
            let mut next = vec![0.0; row.len() + p.len() - 1];
            for (a, &ra) in row.iter().enumerate() {
                for (b, &pb) in p.iter().enumerate() {
                    next[a + b] += ra * pb;
                }
            }
            row = next;
        }
        row
    }

    #[test]
    fn power_matches_brute_force_convolution() {
        let p = [0.5, 0.25, 0.25];
        let f = law_series(&p, 16);
        for i in 1..=3u64 {
            let brute = brute_force_row(&p, i as usize);
            let series = power(&f, i);
            for j in 0..=4 {
                let want = brute.get(j).copied().unwrap_or(0.0);
                assert!(
                    (series.coeff(j) - want).abs() < 1e-13,
                    "i={i} j={j}: {} vs {want}",
                    series.coeff(j)
                );
            }
        }
    }

    proptest! {
        // Powers of a probability GF only lose mass to truncation; while
        // the full support fits the order (3i <= 64) nothing but roundoff
        // is lost.
        #[test]
        fn power_preserves_probability_mass(i in 1u64..=21) {
            let f = law_series(&[0.4, 0.3, 0.2, 0.1], 64);
            let p = power(&f, i);
            let total = p.evaluate(1.0);
            prop_assert!(total <= 1.0 + 1e-12);
            prop_assert!(total >= 1.0 - 1e-9 * 64.0);
            prop_assert!(p.is_probability_series());
        }

        // Past that, the dropped tail shows up in the lost-mass account.
        #[test]
        fn power_truncation_is_accounted(i in 22u64..60) {
            let f = law_series(&[0.4, 0.3, 0.2, 0.1], 64);
            let p = power(&f, i);
            let dropped = 1.0 - p.evaluate(1.0);
            prop_assert!(p.lost_mass() >= dropped - 1e-12);
        }

        // mul truncates to the shorter order and never fabricates mass.
        #[test]
        fn mul_orders_and_mass(na in 1usize..20, nb in 1usize..20) {
            let a = TruncatedSeries::constant(0.5, na);
            let b = TruncatedSeries::identity(nb.max(1));
            let prod = mul(&a, &b);
            prop_assert_eq!(prod.order(), na.min(nb.max(1)));
            prop_assert!(prod.sum() <= a.sum() * b.sum() + 1e-12);
        }
    }
}
