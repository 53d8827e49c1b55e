//! Finite-dimensional laboratory for two-scale jump-diffusion forward-backward
//! systems.
//!
//! The state is a slow variable `X` driven by a Wiener process and a compound
//! Poisson measure, coupled to a fast variable `Q` running on the clock `t/ε`.
//! The crate simulates both, solves the associated backward equations by
//! regression Monte Carlo, computes the averaged driver `λ(x, z, u)` of the
//! limit equation by vanishing discount, and verifies the reduction
//! `Y^ε₀ → Ȳ₀` together with its control-theoretic dual by measure change.
//!
//! Modules mirror the pipeline:
//! - [`model`]: problem description, coefficient library, assumption checkers;
//! - [`forward`]: noise sampling and trajectory simulation;
//! - [`hamiltonian`]: drivers (control Hamiltonian and affine test family);
//! - [`bsde`]: regression-based backward solvers;
//! - [`ergodic`]: the averaged driver `λ` and its certificates;
//! - [`girsanov`]: Doléans-Dade weights and reweighted expectations;
//! - [`reduction`]: the convergence, value, and duality experiments.

pub mod bsde;
pub mod ergodic;
pub mod error;
pub mod forward;
pub mod girsanov;
pub mod hamiltonian;
pub mod labconfig;
pub mod model;
pub mod reduction;
pub mod rng;
pub mod util;

pub use error::CoreError;
