//! Monte Carlo machinery for mean field games with absorption and common noise.
//!
//! The crate computes approximate mean-field equilibria for games in which
//! weakly interacting agents are permanently absorbed when their state leaves
//! an open domain, and all agents share a common Brownian noise besides their
//! idiosyncratic one. The population is therefore described by a *random flow
//! of sub-probabilities*: conditional laws of the surviving states, with total
//! mass equal to the surviving fraction.
//!
//! Pipeline, bottom to top:
//!
//! 1. [`kernel`] — compactly supported smoothing kernels and the smoothed
//!    absorption-loss functional that feeds every drift evaluation.
//! 2. [`noise_grid`] — quantization of the common noise into a finite family
//!    of atoms (cells of a finite sigma-algebra) with conditional resampling.
//! 3. [`measure_flow`] — per-atom weighted particle clouds, pairings against a
//!    test-function battery, and distances between flows.
//! 4. [`dynamics`] — scenario coefficients (including the bank-run model) and
//!    Euler–Maruyama simulation of absorbed controlled paths.
//! 5. [`hamiltonian`] / [`bsde`] — the control Hamiltonian, its maximizer over
//!    a compact control box, and a least-squares Monte Carlo solver for the
//!    backward equation with bounded random horizon; its output is the optimal
//!    feedback policy for a frozen flow.
//! 6. [`fixed_point`] — the flow-to-flow map (respond optimally, then push the
//!    controlled law forward) iterated with damping to an equilibrium.
//! 7. [`nplayer`] — finite-N games and epsilon-Nash gap estimation for the
//!    mean-field policy.
//! 8. [`experiment`] — config, pipeline stages and file exports used by the
//!    command line runner.
//!
//! All randomness flows through seeded, index-addressed substreams
//! ([`rng`]), and parallel sections only map over pre-indexed slots
//! ([`parallel`]), so results are bit-identical across thread counts and
//! across the sequential fallback.

pub mod bsde;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod fixed_point;
pub mod grid;
pub mod hamiltonian;
pub mod kernel;
pub mod measure_flow;
pub mod noise_grid;
pub mod nplayer;
pub mod parallel;
pub mod quadrature;
pub mod rng;
pub mod stats;

pub use error::{MfgError, Result};
pub use grid::TimeGrid;
