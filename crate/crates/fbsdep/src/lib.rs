//! Monte-Carlo solver for fully coupled forward-backward stochastic
//! differential equations driven by a Brownian motion and a compensated
//! Poisson random measure on a finite mark space, together with the adjoint
//! machinery needed to check a global stochastic maximum principle.
//!
//! The crate is organized around a pipeline:
//!
//! * [`markspace`] — finite mark space carrying the jump intensity measure.
//! * [`noise`] — deterministic, counter-based noise generation (Brownian
//!   increments, exact jump times and marks, per-step jump tallies).
//! * [`model`] — problem definitions: coefficient functions with their
//!   partial derivatives, control sets, terminal cost, and a registry of
//!   built-in benchmark problems.
//! * [`fbsolve`] — forward Euler simulation, least-squares backward
//!   regression solve, and the Picard iteration that couples them.
//! * [`adjoint`] — first- and second-order adjoint backward equations and
//!   the algebra recovering the jump-resolved gain processes.
//! * [`maxprinciple`] — spike (needle) control perturbations, variational
//!   processes, the shifted Hamiltonian, and the experiment drivers that
//!   verify the maximum principle and the expansion orders numerically.
//! * [`cli`] — configuration files, report serialization, and the command
//!   entry points used by the `fbsdep` binary.
//!
//! Every runnable capability has a corresponding example under `examples/`;
//! run them with `cargo run --release --example <name>`.

pub mod adjoint;
pub mod cli;
pub mod error;
pub mod fbsolve;
pub mod grid;
pub mod markspace;
pub mod maxprinciple;
pub mod model;
pub mod noise;
pub mod numeric;

pub use error::{Error, Result};
pub use fbsolve::{FbsdepSolution, PicardReport, RegressionConfig};
pub use grid::{MarkGrid, ScalarGrid};
pub use markspace::{MarkSpace, MarkVector};
pub use noise::{NoiseBundle, TimeGrid};
