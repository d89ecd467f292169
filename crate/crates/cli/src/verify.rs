//! One-shot verification suite: every cross-module identity the toolkit
//! guarantees, run against a single law and reported as a machine-readable
//! ledger.
//!
//! Identities exact only on the linear-fractional family are skipped (with
//! the reason recorded) elsewhere. The gap between the closed-form constant
//! and the iteration limit is a ledger row too, but an informational one:
//! measuring that gap is part of the toolkit's job, so it never fails the
//! suite.

use serde::Serialize;

use gwk_core::asymptotics::{
    self, closed_form_gap_limit, closed_form_schroder_residual, default_probe_points,
    delta_bounds, limit_estimate, sandwich_rows, yaglom_conditional, MeasureMode, ProcessParams,
};
use gwk_core::iterate::{gf_orbit, lf_exact};
use gwk_core::offspring::kahan_sum;
use gwk_core::qprocess::{
    self, dual_gf, invariant_measure, moments, q_row, schroder_residual, tail_resolved_length,
    transition_gf,
};
use gwk_core::OffspringLaw;

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    /// Measured residual (0 means exact).
    pub residual: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Present when the check did not apply to this law.
    pub skipped: Option<String>,
    /// Informational rows report data and never fail the suite.
    pub informational: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyLedger {
    pub law: OffspringLaw,
    pub params: ProcessParams,
    pub checks: Vec<IdentityCheck>,
    pub all_passed: bool,
}

struct Ledger(Vec<IdentityCheck>);

impl Ledger {
    fn check(&mut self, name: &str, residual: f64, threshold: f64) {
        self.0.push(IdentityCheck {
            name: name.into(),
            residual,
            threshold,
            passed: residual <= threshold,
            skipped: None,
            informational: false,
        });
    }

    fn info(&mut self, name: &str, residual: f64) {
        self.0.push(IdentityCheck {
            name: name.into(),
            residual,
            threshold: f64::INFINITY,
            passed: true,
            skipped: None,
            informational: true,
        });
    }

    fn skip(&mut self, name: &str, reason: &str) {
        self.0.push(IdentityCheck {
            name: name.into(),
            residual: 0.0,
            threshold: 0.0,
            passed: true,
            skipped: Some(reason.into()),
            informational: false,
        });
    }
}

pub fn verify_suite(
    law: &OffspringLaw,
    n_max: usize,
    tol: f64,
    j_max: usize,
    seed: u64,
) -> Result<VerifyLedger, gwk_core::qprocess::QProcessError> {
    let params = asymptotics::derive_params(law)?;
    let mut led = Ledger(Vec::new());
    let probes = default_probe_points(&params);
    let est = limit_estimate(law, &params, &probes, n_max, tol);
    let bounds = delta_bounds(law, &params, 1e-12);
    let is_lf = law.is_linear_fractional();
    let lf_skip = "exact only on the linear-fractional family";

    // Generating function and fixed-point structure.
    led.check(
        "gf_total_mass",
        (law.gf_eval(1.0).value - 1.0).abs(),
        1e-12,
    );
    led.check(
        "extinction_fixed_point",
        (law.gf_eval(params.q).value - params.q).abs(),
        1e-12,
    );
    let dual = law
        .harris_sevastyanov_dual(params.q)
        .expect("q is a fixed point");
    led.check(
        "dual_mean_is_beta",
        (dual.gf_eval(1.0).d1 - params.beta).abs(),
        1e-12,
    );
    led.check(
        "delta_theory_is_two_gamma",
        (params.delta_theory - 2.0 * params.gamma).abs(),
        1e-14,
    );
    led.check(
        "k_theory_is_profile_at_zero",
        if params.k_theory.to_bits() == closed_form_gap_limit(&params, 0.0).to_bits() {
            0.0
        } else {
            1.0
        },
        0.0,
    );
    if params.q == 1.0 {
        let ms = law.moments();
        let gamma_sub = ms.b_one / (ms.m - ms.m * ms.m);
        let k_sub = 1.0 / (1.0 + gamma_sub);
        led.check(
            "subcritical_form_matches_general",
            if k_sub.to_bits() == params.k_theory.to_bits() {
                0.0
            } else {
                1.0
            },
            0.0,
        );
    } else {
        led.skip("subcritical_form_matches_general", "law is supercritical");
    }

    // Per-step sandwich and the limit bounds.
    let mut sandwich_violation: f64 = 0.0;
    for &s in &probes {
        for row in sandwich_rows(law, &params, s, 40) {
            sandwich_violation = sandwich_violation
                .max(row.lower - row.mid - row.noise)
                .max(row.mid - row.upper - row.noise);
        }
    }
    led.check("stepwise_sandwich", sandwich_violation.max(0.0), 0.0);

    let mut bound_violation: f64 = 0.0;
    for probe in &est.probes {
        bound_violation = bound_violation
            .max(bounds.delta1 - probe.delta_hat)
            .max(probe.delta_hat - (bounds.delta2 + bounds.tail_bound));
    }
    led.check("delta_hat_within_bounds", bound_violation.max(0.0), 1e-9);

    let mut monotone_violation: f64 = 0.0;
    for &s in &probes {
        let trace = gf_orbit(law, s, 60.min(n_max), Some(&params));
        let mut prev: Option<f64> = None;
        let mut pw = 1.0;
        for row in &trace.rows {
            let gap = row.gap.unwrap();
            let ratio = pw / gap.abs();
            if let Some(p) = prev {
                let delta = if s < params.q { p - ratio } else { ratio - p };
                monotone_violation = monotone_violation.max(delta / p.abs());
            }
            prev = Some(ratio);
            pw *= params.beta;
        }
    }
    led.check("scaled_gap_monotone", monotone_violation.max(0.0), 1e-9);

    // Q-process identities.
    let row_len = tail_resolved_length(&params, j_max);
    let mut row_defect: f64 = 0.0;
    for i in [1u64, 2, 3] {
        for n in [1usize, 2, 5] {
            let row = q_row(law, &params, i, n, row_len)?;
            row_defect = row_defect.max((kahan_sum(row.probs.iter().copied()) - 1.0).abs());
        }
    }
    led.check("q_row_normalization", row_defect, 1e-9);

    let mut w_defect: f64 = 0.0;
    let mut mean_defect: f64 = 0.0;
    for i in [1u64, 2, 5] {
        for n in [1usize, 3, 10] {
            w_defect = w_defect.max((transition_gf(law, &params, 1.0, n, i) - 1.0).abs());
        }
        for n in [0usize, 1, 5, 20] {
            let formula = moments(&params, n, i).mean;
            let direct = qprocess::mean_w_from_gf(law, &params, n, i);
            mean_defect = mean_defect.max((formula - direct).abs());
        }
    }
    led.check("q_gf_normalization", w_defect, 1e-11);
    led.check("mean_w_identity", mean_defect, 1e-11);

    let mut feq_defect: f64 = 0.0;
    for i in [1u64, 3] {
        for n in [1usize, 5] {
            for k in 1..=9 {
                let s = k as f64 / 10.0;
                let lhs = transition_gf(law, &params, s, n + 1, i);
                let w1 = transition_gf(law, &params, s, 1, 1);
                let fq = dual_gf(law, &params, s);
                let rhs = w1 / fq * transition_gf(law, &params, fq, n, i);
                feq_defect = feq_defect.max((lhs - rhs).abs());
            }
        }
    }
    led.check("q_gf_functional_equation", feq_defect, 1e-10);

    let empirical = invariant_measure(law, &params, j_max, MeasureMode::Empirical)?;
    led.check("empirical_pi_invariance", empirical.residual_l1, 1e-6);

    let closed = invariant_measure(law, &params, j_max, MeasureMode::ClosedForm)?;
    let mut rel_defect: f64 = 0.0;
    for m in [&closed, &empirical] {
        for j in 1..=j_max {
            let want = j as f64 * params.q.powi(j as i32 - 1) * m.nu[j - 1];
            rel_defect = rel_defect.max((m.pi[j - 1] - want).abs());
        }
    }
    led.check("pi_is_size_biased_nu", rel_defect, 1e-12);

    let mut schroder_defect: f64 = 0.0;
    for (_, r) in schroder_residual(law, &params, &[0.0, 0.25, 0.5, 0.75, 1.0], MeasureMode::Empirical)? {
        schroder_defect = schroder_defect.max(r);
    }
    led.check("empirical_pi_schroder_equation", schroder_defect, 1e-6);

    // Ratio convergence of rows in the source state.
    let probe_js: Vec<usize> = if law.p1() == 0.0 {
        vec![2, 4, 6]
    } else {
        vec![1, 2, 3]
    };
    // Depth where the iterate is still resolvable in f64 (gap above ~1e-12).
    let n_far = (((-12.0 * std::f64::consts::LN_10) / params.beta.ln()).floor() as usize)
        .clamp(6, 40);
    let mut ratio_defect: f64 = 0.0;
    for i in [2u64, 3] {
        let near = q_row(law, &params, i, 5, row_len)?;
        let one_near = q_row(law, &params, 1, 5, row_len)?;
        let far = q_row(law, &params, i, n_far, row_len)?;
        let one_far = q_row(law, &params, 1, n_far, row_len)?;
        for &j in &probe_js {
            let r5 = (near.probs[j - 1] / one_near.probs[j - 1] - 1.0).abs();
            let r40 = (far.probs[j - 1] / one_far.probs[j - 1] - 1.0).abs();
            ratio_defect = ratio_defect.max(r40 - r5);
        }
    }
    led.check("row_ratio_convergence", ratio_defect.max(0.0), 0.0);

    // Conditional limit law and duality.
    let yaglom = yaglom_conditional(law, &params, row_len)?;
    led.check(
        "yaglom_normalization",
        (kahan_sum(yaglom.probs.iter().copied()) - 1.0).abs(),
        1e-9,
    );
    let dual_params = asymptotics::derive_params(&dual)?;
    let dual_est = limit_estimate(&dual, &dual_params, &[0.0], n_max, tol);
    led.check(
        "hs_conjugacy_of_k",
        ((est.k_hat - params.q * dual_est.k_hat) / est.k_hat).abs(),
        2e-3,
    );
    led.info(
        "yaglom_implied_k_vs_k_hat",
        ((yaglom.implied_k - est.k_hat) / est.k_hat).abs(),
    );

    // Sampling determinism.
    let path_a = qprocess::sample_path(law, &params, 1, 64, seed, qprocess::DEFAULT_STATE_CAP)?;
    let path_b = qprocess::sample_path(law, &params, 1, 64, seed, qprocess::DEFAULT_STATE_CAP)?;
    led.check(
        "sample_path_determinism",
        if path_a == path_b { 0.0 } else { 1.0 },
        0.0,
    );

    // The headline numbers: ground truth vs closed form. Data, not a gate.
    led.info("k_hat", est.k_hat);
    led.info("k_theory", params.k_theory);
    led.info(
        "k_gap_relative",
        ((est.k_hat - params.k_theory) / params.k_theory).abs(),
    );
    let p11 = asymptotics::p11_check(law, &params, n_max);
    led.info("p11_scaled_limit", p11.empirical_limit);
    led.info("p11_closed_form", p11.theory);

    // Linear-fractional exactness block.
    if is_lf {
        let mut trace_defect: f64 = 0.0;
        let trace = gf_orbit(law, 0.0, 40, Some(&params));
        let mut pw = 1.0;
        for row in &trace.rows {
            if row.n > 0 {
                let lhs = pw / row.gap.unwrap();
                let rhs = 1.0 + params.gamma * (1.0 - pw);
                trace_defect = trace_defect.max((lhs - rhs).abs());
            }
            pw *= params.beta;
        }
        led.check("lf_scaled_gap_identity", trace_defect, 1e-10);

        let mut vs_closed: f64 = 0.0;
        for &s in &[0.0, 0.3, 0.7] {
            let orbit = gf_orbit(law, s, 60, Some(&params));
            for row in &orbit.rows {
                let exact = lf_exact(law, s, row.n).unwrap();
                vs_closed = vs_closed.max((row.gap.unwrap() - exact.gap).abs());
            }
        }
        led.check("lf_iteration_vs_closed_form", vs_closed, 1e-10);

        led.check(
            "lf_k_exactness",
            (est.k_hat - params.k_theory).abs(),
            1e-8,
        );
        let mut delta_defect: f64 = 0.0;
        for probe in &est.probes {
            delta_defect = delta_defect.max((probe.delta_hat - 2.0 * params.gamma).abs());
        }
        led.check("lf_delta_is_two_gamma", delta_defect, 1e-7);

        let mut pi_defect: f64 = 0.0;
        for j in 0..j_max {
            pi_defect = pi_defect.max((closed.pi[j] - empirical.pi[j]).abs());
        }
        led.check("lf_pi_modes_agree", pi_defect, 1e-7);
        led.check("lf_closed_pi_invariance", closed.residual_l1, 1e-9);

        let mut schroder: f64 = 0.0;
        for k in 0..5 {
            let s = 0.2 * k as f64;
            schroder = schroder.max(closed_form_schroder_residual(law, &params, s, 1));
        }
        led.check("lf_profile_schroder_equation", schroder, 1e-12);
        led.check(
            "lf_p11_exactness",
            (p11.empirical_limit - p11.theory).abs(),
            1e-7,
        );
    } else {
        for name in [
            "lf_scaled_gap_identity",
            "lf_iteration_vs_closed_form",
            "lf_k_exactness",
            "lf_delta_is_two_gamma",
            "lf_pi_modes_agree",
            "lf_closed_pi_invariance",
            "lf_profile_schroder_equation",
            "lf_p11_exactness",
        ] {
            led.skip(name, lf_skip);
        }
    }

    let all_passed = led
        .0
        .iter()
        .all(|c| c.passed || c.skipped.is_some() || c.informational);
    Ok(VerifyLedger {
        law: law.clone(),
        params,
        checks: led.0,
        all_passed,
    })
}
