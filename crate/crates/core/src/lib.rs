//! Monte Carlo engine for mean-field (McKean–Vlasov) SDEs with additive noise,
//!
//! ```text
//! dX_t = b(t, X_t, law(X_t)) dt + dB_t,   X_0 = x,
//! ```
//!
//! and for the gradient `∇ₓ E[Φ(X_T^x)]` through a Bismut–Elworthy–Li
//! weight that never differentiates `Φ` and tolerates discontinuous drifts.
//!
//! Module map:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`measure_flow`] | empirical measures, measure flows, Wasserstein-1 |
//! | [`drift`] | drift trait, regularity metadata, built-in library, mollification |
//! | [`sde_solver`] | Euler–Maruyama particle and frozen-law solvers, Picard iteration on the law |
//! | [`sensitivity`] | Malliavin derivative, first variation, `∇ₓb` along the law |
//! | [`bel`] | gradient weights, estimators, Girsanov reweighting, `Φ` integrability |
//! | [`oracle`] | finite differences with common random numbers, closed-form OU, matrix exponential |
//!
//! All randomness flows from a [`noise::NoiseBuffer`] generated once per
//! experiment; every solver consumes stored increments, so results do not
//! depend on the number of worker threads.

pub mod bel;
pub mod drift;
mod error;
pub mod linalg;
pub mod measure_flow;
pub mod noise;
pub mod oracle;
pub mod sde_solver;
pub mod sensitivity;
pub mod stats;

pub use error::{Error, Result};
