//! Numerical laboratory for cooperative stochastic control with many agents.
//!
//! The crate solves the same control problem two ways — with full-information
//! feedback controls (each agent sees every state) and with distributed
//! controls (each agent sees only its own state) — and measures the value and
//! control gaps between them against explicit bounds computed from the
//! problem data.
//!
//! Module map:
//!
//! * [`model`] — problem definitions: Lagrangians, Hamiltonians, cost
//!   structures, interaction matrices, initial laws.
//! * [`hjb`] — tensor-grid finite-difference solver for the full-information
//!   HJB equation, value lifting, and convexity diagnostics.
//! * [`distributed`] — the coupled-marginal fixed point for the distributed
//!   problem, the intermediate conditional-drift process, the McKean-Vlasov
//!   FBSDE cross-solver, and Monte Carlo cost evaluation.
//! * [`sde`] — Euler-Maruyama particle backbone with counter-based RNG
//!   streams and common-random-number paired runs.
//! * [`metrics`] — empirical gap quantities: conditional-variance error
//!   terms, Wasserstein distances, chaos metrics, Poincaré ratios.
//! * [`bounds`] — every explicit constant and theorem right-hand side.
//! * [`oracles`] — closed-form and semi-exact reference values (Gibbs
//!   log-integral, Riccati LQ, mean-field LQ).
//! * [`meanfield`] — symmetric value ladders, rate fitting, and chaos
//!   comparisons against independent mean-field copies.

pub mod bounds;
pub mod distributed;
pub mod hjb;
pub mod meanfield;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod sde;
