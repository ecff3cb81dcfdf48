//! Monte Carlo laboratory for mean-field (McKean–Vlasov) stochastic control
//! with common noise.
//!
//! The controlled state follows
//!
//! ```text
//! dX_t = b(t, X, μ̄_t, u_t) dt + σ(t, X, μ̄_t, u_t) dW_t + σ₀(t, X, μ̄_t, u_t) dB_t,
//! ```
//!
//! where `W` is idiosyncratic noise, `B` is a Brownian motion shared by the
//! whole population (the common noise), and `μ̄_t` is the conditional joint
//! law of state and control given the common-noise information. The library
//! discretizes this system with an outer×inner particle scheme (outer =
//! common-noise scenarios, inner = particles sharing one scenario), estimates
//! reward functionals over parametric policy classes ordered by information
//! (common-noise-adapted ⊂ strong ⊂ randomized), and numerically verifies
//! dynamic programming equalities against closed-form linear-quadratic
//! Riccati oracles and an exact finite-state enumeration engine.
//!
//! Modules:
//! - [`measures`]: empirical measures, exact Wasserstein-2 transport, moments.
//! - [`problems`]: problem specifications, sample-based assumption validators,
//!   path-summary (updating) functions.
//! - [`simulator`]: Euler–Maruyama particle scheme and Picard fixed-point solver.
//! - [`policies`]: control rules by information class, parameter grids.
//! - [`value`]: reward estimation and derivative-free policy search.
//! - [`dpp`]: dynamic-programming, ordering, reduction, and restart checks.
//! - [`lq`]: scalar linear-quadratic Riccati oracle and HJB residuals.
//! - [`discrete`]: exact finite-state mean-field control enumeration.
//! - [`rng`]: counter-based splittable random streams.

pub mod discrete;
pub mod dpp;
pub mod error;
pub mod lq;
pub mod measures;
pub mod policies;
pub mod problems;
pub mod rng;
pub mod simulator;
pub mod value;

pub use error::{Error, Result};
