//! Numerical toolkit for non-critical Galton-Watson branching processes.
//!
//! Given an offspring law `{p_k}` with generating function `f(s) = Σ p_k s^k`
//! and mean `m = f'(1-) ≠ 1`, this crate computes
//!
//! * the extinction probability `q` (smallest fixed point of `f` on `(0,1]`),
//! * the structural parameters `β = f'(q)`, `b_q = f''(q)/2`,
//!   `γ = b_q/(β-β²)` and the closed-form Kolmogorov constant
//!   `K = q/(1+qγ)`,
//! * the empirical decay constant `K̂ = lim (q-f_n(0))/β^n` by generating-
//!   function iteration with Aitken acceleration, together with the
//!   pointwise profile `δ̂(s)` and the series bounds `Δ₁ ≤ δ̂ ≤ Δ₂`,
//! * the Q-process (the chain conditioned on dying out eventually but not
//!   yet): transition rows, generating functions, exact moment identities
//!   and its invariant measure `π`, both closed-form and empirical,
//! * direct Monte Carlo simulation of the population chain as an
//!   independent statistical oracle.
//!
//! The closed forms are exact on the linear-fractional family and are
//! treated as *predictions* elsewhere; the iteration limits are the ground
//! truth, and reports carry both values plus their gap.
//!
//! Modules mirror that pipeline: [`offspring`] (laws and their generating
//! functions), [`powerseries`] (truncated coefficient arithmetic),
//! [`iterate`] (iteration engine and the exact linear-fractional oracle),
//! [`asymptotics`] (fixed points, limits, bounds), [`qprocess`] and
//! [`montecarlo`].

pub mod accel;
pub mod asymptotics;
pub mod iterate;
pub mod montecarlo;
pub mod offspring;
pub mod powerseries;
pub mod qprocess;

pub use asymptotics::{derive_params, CriticalityClass, ProcessParams};
pub use offspring::OffspringLaw;
