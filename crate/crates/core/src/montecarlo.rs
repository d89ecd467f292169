//! Direct stochastic simulation of the population chain, as an independent
//! statistical oracle for everything the iteration engine computes.
//!
//! # Reproducibility
//!
//! Replicate `r` draws from its own counter-based ChaCha substream keyed by
//! `(seed, r)`, so scheduling cannot affect which numbers a replicate sees.
//! Aggregation is all in exact integer arithmetic (counts and `u128`
//! moment sums), which is associative — estimates are bitwise identical
//! regardless of worker count or reduction order. Floating point only
//! enters when the final summary statistics are formed.
//!
//! # Conditioning
//!
//! Conditioning on eventual extinction is implemented by simulating the
//! Harris-Sevastyanov dual law, never by filtering trajectories: filtering
//! is biased at finite horizons and wasteful when `q ≪ 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::asymptotics::ProcessParams;
use crate::iterate::RecenteredMap;
use crate::offspring::OffspringLaw;

/// Default per-generation population ceiling. Supercritical laws simulated
/// without conditioning blow through this quickly and fail loudly; all
/// supercritical statistics in this crate live on the dual.
pub const DEFAULT_POPULATION_CAP: u64 = 1_000_000_000;

const REPLICATE_CHUNK: u64 = 8_192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    /// Horizon in generations.
    pub horizon: usize,
    pub replicates: u64,
    pub seed: u64,
    pub population_cap: u64,
}

impl SimConfig {
    pub fn new(horizon: usize, replicates: u64, seed: u64) -> Self {
        assert!(replicates >= 1);
        SimConfig {
            horizon,
            replicates,
            seed,
            population_cap: DEFAULT_POPULATION_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("population cap exceeded in {flagged} of {replicates} replicates (more than 0.1%)")]
    PopulationCapExceeded { flagged: u64, replicates: u64 },
    #[error("expected surviving replicates {expected:.1} at horizon {horizon} is below 200")]
    InsufficientSurvivors { horizon: usize, expected: f64 },
}

/// Point estimates from one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEstimate {
    /// `Q̂(n) = P{Z(n) > 0}`.
    pub survival_hat: f64,
    pub survival_stderr: f64,
    /// `Ê[Z(n) | Z(n) > 0]`; `None` when nothing survived.
    pub conditional_mean_hat: Option<f64>,
    pub conditional_mean_stderr: Option<f64>,
    pub survivors: u64,
    /// Replicates entering the estimates (total minus capped).
    pub replicates_used: u64,
    /// Replicates flagged for exceeding the population cap (excluded).
    pub capped: u64,
    /// `histogram[g]` counts replicates that died exactly at generation
    /// `g`; survivors past the horizon are censored (not in the histogram).
    pub extinction_time_histogram: Vec<u64>,
}

/// Exact integer tallies; merging is associative so any reduction order
/// yields the same result.
#[derive(Debug, Clone)]
struct Tally {
    checkpoints: Vec<CheckpointTally>,
    capped: u64,
    hist: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct CheckpointTally {
    survivors: u64,
    sum_z: u128,
    sum_z_sq: u128,
}

impl Tally {
    fn zero(n_checkpoints: usize, horizon: usize) -> Self {
        Tally {
            checkpoints: vec![CheckpointTally::default(); n_checkpoints],
            capped: 0,
            hist: vec![0; horizon + 1],
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for (a, b) in self.checkpoints.iter_mut().zip(&other.checkpoints) {
            a.survivors += b.survivors;
            a.sum_z += b.sum_z;
            a.sum_z_sq += b.sum_z_sq;
        }
        self.capped += other.capped;
        for (a, b) in self.hist.iter_mut().zip(&other.hist) {
            *a += b;
        }
        self
    }
}

fn offspring_cdf(law: &OffspringLaw) -> Vec<f64> {
    let truncated = law.to_finite_pmf();
    let OffspringLaw::Pmf { p } = &truncated.law else {
        unreachable!()
    };
    let mut cdf = Vec::with_capacity(p.len());
    let mut cum = 0.0;
    for &mass in p {
        cum += mass;
        cdf.push(cum);
    }
    *cdf.last_mut().unwrap() = 1.0;
    cdf
}

fn run_tallies(law: &OffspringLaw, cfg: &SimConfig, checkpoints: &[usize]) -> Tally {
    let cdf = offspring_cdf(law);
    let horizon = *checkpoints.last().unwrap_or(&0);
    let n_chunks = cfg.replicates.div_ceil(REPLICATE_CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut local = Tally::zero(checkpoints.len(), horizon);
            let lo = chunk * REPLICATE_CHUNK;
            let hi = (lo + REPLICATE_CHUNK).min(cfg.replicates);
            for r in lo..hi {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(r);
                run_replicate(&cdf, checkpoints, cfg.population_cap, &mut rng, &mut local);
            }
            local
        })
        .reduce(
            || Tally::zero(checkpoints.len(), horizon),
            Tally::merge,
        )
}

/// Evolve one replicate to the horizon. The trajectory is evaluated first
/// and tallied only afterwards, so capped replicates never contaminate the
/// counts. `checkpoints` must be sorted ascending and end at the horizon.
fn run_replicate(
    cdf: &[f64],
    checkpoints: &[usize],
    cap: u64,
    rng: &mut ChaCha8Rng,
    out: &mut Tally,
) {
    let horizon = *checkpoints.last().unwrap_or(&0);
    let mut z: u64 = 1;
    let mut died_at: Option<usize> = None;
    let mut sizes: Vec<u64> = Vec::with_capacity(checkpoints.len());
    let mut next_cp = 0usize;
    while next_cp < checkpoints.len() && checkpoints[next_cp] == 0 {
        sizes.push(1);
        next_cp += 1;
    }
    for generation in 1..=horizon {
        let mut next: u64 = 0;
        for _ in 0..z {
            let u: f64 = rng.gen();
            next += cdf.partition_point(|&c| c <= u) as u64;
        }
        z = next;
        if z > cap {
            out.capped += 1;
            return;
        }
        if z == 0 {
            died_at = Some(generation);
            break;
        }
        while next_cp < checkpoints.len() && checkpoints[next_cp] == generation {
            sizes.push(z);
            next_cp += 1;
        }
    }
    if let Some(g) = died_at {
        out.hist[g] += 1;
    }
    for (cp, &size) in sizes.iter().enumerate() {
        out.checkpoints[cp].survivors += 1;
        out.checkpoints[cp].sum_z += size as u128;
        out.checkpoints[cp].sum_z_sq += (size as u128) * (size as u128);
    }
}

fn estimate_from(tally: &CheckpointTally, used: u64) -> SimEstimate {
    let n = used as f64;
    let p_hat = tally.survivors as f64 / n;
    let survival_stderr = (p_hat * (1.0 - p_hat) / n).sqrt();
    let (mean, mean_stderr) = if tally.survivors > 0 {
        let s = tally.survivors as f64;
        let mean = tally.sum_z as f64 / s;
        let stderr = if tally.survivors > 1 {
            let var = (tally.sum_z_sq as f64 - s * mean * mean) / (s - 1.0);
            Some((var.max(0.0) / s).sqrt())
        } else {
            None
        };
        (Some(mean), stderr)
    } else {
        (None, None)
    };
    SimEstimate {
        survival_hat: p_hat,
        survival_stderr,
        conditional_mean_hat: mean,
        conditional_mean_stderr: mean_stderr,
        survivors: tally.survivors,
        replicates_used: used,
        capped: 0,
        extinction_time_histogram: Vec::new(),
    }
}

/// Simulate `Z(0..=horizon)` from `Z(0) = 1` across replicates and
/// estimate survival and the conditional mean at the horizon.
pub fn simulate(law: &OffspringLaw, cfg: &SimConfig) -> Result<SimEstimate, SimError> {
    let tally = run_tallies(law, cfg, &[cfg.horizon]);
    if tally.capped * 1000 > cfg.replicates {
        return Err(SimError::PopulationCapExceeded {
            flagged: tally.capped,
            replicates: cfg.replicates,
        });
    }
    let used = cfg.replicates - tally.capped;
    let mut est = estimate_from(&tally.checkpoints[0], used);
    est.capped = tally.capped;
    est.extinction_time_histogram = tally.hist;
    Ok(est)
}

/// The process conditioned on eventual extinction: exactly the simulation
/// of the Harris-Sevastyanov dual law.
pub fn conditional_on_extinction(
    law: &OffspringLaw,
    params: &ProcessParams,
    cfg: &SimConfig,
) -> Result<SimEstimate, SimError> {
    let dual = law
        .harris_sevastyanov_dual(params.q)
        .expect("derived q is a fixed point");
    simulate(&dual, cfg)
}

/// One horizon of the decay-constant trace from simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KTraceRow {
    pub n: usize,
    /// `β^n / Q̂_dual(n)`, which should stabilize near `1/K̂_dual`.
    pub ratio: f64,
    pub ratio_stderr: f64,
    pub conditional_mean: Option<f64>,
    pub conditional_mean_stderr: Option<f64>,
    pub survivors: u64,
}

/// Monte Carlo route to the decay constant: simulate the dual (subcritical)
/// process and trace `β^n/Q̂(n)` over the requested horizons. Horizons must
/// be small enough that at least 200 survivors are expected, judged against
/// the exact survival probability from iteration.
pub fn k_trace(
    law: &OffspringLaw,
    params: &ProcessParams,
    cfg: &SimConfig,
    horizons: &[usize],
) -> Result<Vec<KTraceRow>, SimError> {
    assert!(!horizons.is_empty());
    let dual = law
        .harris_sevastyanov_dual(params.q)
        .expect("derived q is a fixed point");
    let mut checkpoints: Vec<usize> = horizons.to_vec();
    checkpoints.sort_unstable();
    checkpoints.dedup();

    // Exact dual survival 1 - f_n(0) via the recentered iteration.
    let map = RecenteredMap::new(&dual, 1.0);
    let mut gap = 1.0;
    let mut exact = vec![1.0];
    for _ in 1..=*checkpoints.last().unwrap() {
        gap = map.step(gap);
        exact.push(gap);
    }
    for &n in &checkpoints {
        let expected = cfg.replicates as f64 * exact[n];
        if expected < 200.0 {
            return Err(SimError::InsufficientSurvivors {
                horizon: n,
                expected,
            });
        }
    }

    let run_cfg = SimConfig {
        horizon: *checkpoints.last().unwrap(),
        ..*cfg
    };
    let tally = run_tallies(&dual, &run_cfg, &checkpoints);
    if tally.capped * 1000 > cfg.replicates {
        return Err(SimError::PopulationCapExceeded {
            flagged: tally.capped,
            replicates: cfg.replicates,
        });
    }
    let used = cfg.replicates - tally.capped;
    let rows = checkpoints
        .iter()
        .zip(&tally.checkpoints)
        .map(|(&n, cp)| {
            let est = estimate_from(cp, used);
            let bn = params.beta.powi(n as i32);
            let q_hat = est.survival_hat;
            KTraceRow {
                n,
                ratio: bn / q_hat,
                // Delta method: d(βⁿ/Q)/dQ = -βⁿ/Q².
                ratio_stderr: bn * est.survival_stderr / (q_hat * q_hat),
                conditional_mean: est.conditional_mean_hat,
                conditional_mean_stderr: est.conditional_mean_stderr,
                survivors: est.survivors,
            }
        })
        .collect();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics::derive_params;
    use crate::iterate::gf_orbit;
    use crate::offspring::validate;

    fn law(p: &[f64]) -> OffspringLaw {
        validate(p).unwrap()
    }

    #[test]
    fn zero_horizon_is_certain_survival() {
        let est = simulate(&law(&[0.5, 0.25, 0.25]), &SimConfig::new(0, 1000, 7)).unwrap();
        assert_eq!(est.survival_hat, 1.0);
        assert_eq!(est.conditional_mean_hat, Some(1.0));
    }

    #[test]
    fn one_step_survival_is_one_minus_p0() {
        let est = simulate(&law(&[0.5, 0.25, 0.25]), &SimConfig::new(1, 200_000, 11)).unwrap();
        assert!(
            (est.survival_hat - 0.5).abs() < 4.0 * est.survival_stderr,
            "{} vs 0.5 (stderr {})",
            est.survival_hat,
            est.survival_stderr
        );
    }

    #[test]
    fn survival_matches_iteration_oracle() {
        let l = law(&[0.5, 0.25, 0.25]);
        let n = 8;
        let exact = 1.0 - gf_orbit(&l, 0.0, n, None).rows[n].f_n;
        let est = simulate(&l, &SimConfig::new(n, 200_000, 3)).unwrap();
        assert!(
            (est.survival_hat - exact).abs() < 4.0 * est.survival_stderr,
            "{} vs exact {exact}",
            est.survival_hat
        );
    }

    #[test]
    fn extinction_histogram_matches_iteration() {
        // P{H = n} = f_n(0) - f_{n-1}(0).
        let l = law(&[0.75, 0.0, 0.25]);
        let reps = 200_000u64;
        let est = simulate(&l, &SimConfig::new(6, reps, 19)).unwrap();
        let orbit = gf_orbit(&l, 0.0, 6, None);
        for n in 1..=6usize {
            let exact = orbit.rows[n].f_n - orbit.rows[n - 1].f_n;
            let p_hat = est.extinction_time_histogram[n] as f64 / reps as f64;
            let stderr = (exact * (1.0 - exact) / reps as f64).sqrt();
            assert!(
                (p_hat - exact).abs() < 4.0 * stderr,
                "H={n}: {p_hat} vs {exact}"
            );
        }
    }

    #[test]
    fn bitwise_identical_across_worker_counts() {
        let l = law(&[0.25, 0.0, 0.75]);
        let cfg = SimConfig::new(6, 20_000, 99);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate(&l, &cfg).unwrap());
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| simulate(&l, &cfg).unwrap());
        assert_eq!(single, multi);
    }

    #[test]
    fn conditioning_uses_the_dual() {
        // Conditioned supercritical law ≡ dual subcritical law.
        let b = law(&[0.25, 0.0, 0.75]);
        let c = law(&[0.75, 0.0, 0.25]);
        let params = derive_params(&b).unwrap();
        let cfg = SimConfig::new(8, 100_000, 5);
        let conditioned = conditional_on_extinction(&b, &params, &cfg).unwrap();
        let direct = simulate(&c, &cfg).unwrap();
        let combined = (conditioned.survival_stderr.powi(2) + direct.survival_stderr.powi(2))
            .sqrt();
        assert!(
            (conditioned.survival_hat - direct.survival_hat).abs() < 4.0 * combined,
            "{} vs {}",
            conditioned.survival_hat,
            direct.survival_hat
        );
    }

    #[test]
    fn supercritical_unconditioned_fails_fast_on_cap() {
        let l = law(&[0.25, 0.0, 0.75]);
        let cfg = SimConfig {
            horizon: 30,
            replicates: 2_000,
            seed: 1,
            population_cap: 50,
        };
        assert!(matches!(
            simulate(&l, &cfg),
            Err(SimError::PopulationCapExceeded { .. })
        ));
    }

    #[test]
    fn k_trace_requires_enough_survivors() {
        let l = law(&[0.75, 0.0, 0.25]);
        let p = derive_params(&l).unwrap();
        let cfg = SimConfig::new(0, 1_000, 2);
        assert!(matches!(
            k_trace(&l, &p, &cfg, &[40]),
            Err(SimError::InsufficientSurvivors { .. })
        ));
    }

    #[test]
    fn k_trace_tracks_exact_conditional_mean() {
        let l = law(&[0.5, 0.25, 0.25]);
        let p = derive_params(&l).unwrap();
        let cfg = SimConfig::new(0, 400_000, 21);
        let rows = k_trace(&l, &p, &cfg, &[1, 6]).unwrap();
        // At n = 1: β/Q(1) = 0.75/0.5 = 1.5 exactly.
        assert!((rows[0].ratio - 1.5).abs() < 4.0 * rows[0].ratio_stderr);
        // Exact conditional mean β^n/(1 - f_n(0)) from iteration.
        let orbit = gf_orbit(&l, 0.0, 6, None);
        let exact = p.beta.powi(6) / (1.0 - orbit.rows[6].f_n);
        let got = rows[1].conditional_mean.unwrap();
        assert!(
            (got - exact).abs() < 4.0 * rows[1].conditional_mean_stderr.unwrap(),
            "{got} vs {exact}"
        );
    }
}
