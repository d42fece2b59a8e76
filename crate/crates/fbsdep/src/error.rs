//! Crate-wide error type.
//!
//! All fallible operations return [`Result`]. Variants distinguish the
//! failure classes that callers dispatch on: configuration problems,
//! numerical divergence, regression breakdown, and the denominator guards
//! of the adjoint algebra (which map to their own process exit code).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two containers that must agree on path/step/mark dimensions do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A bundle or grid was requested with zero paths or zero steps.
    #[error("empty ensemble: {0}")]
    EmptyEnsemble(String),

    /// Invalid constructor input (non-finite value, non-positive weight, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A problem definition failed its consistency audit.
    #[error("problem validation failed: {0}")]
    Validation(String),

    /// Unknown built-in problem name.
    #[error("unknown problem '{name}'; available: {available}")]
    UnknownProblem { name: String, available: String },

    /// The forward simulation produced a non-finite state.
    #[error("forward state diverged (non-finite) at path {path}, step {step}")]
    ForwardDiverged { path: usize, step: usize },

    /// The regression normal matrix was singular beyond ridge rescue.
    #[error("singular regression system at step {step}: {detail}")]
    SingularRegression { step: usize, detail: String },

    /// The implicit generator step did not converge.
    #[error(
        "implicit backward step failed to converge at step {step} \
         (residual {residual:.3e} after {iters} iterations); reduce the step size"
    )]
    ImplicitStep {
        step: usize,
        iters: usize,
        residual: f64,
    },

    /// The Picard iteration stopped contracting.
    #[error(
        "fixed-point iteration diverged after {iters} iterations \
         (last distances {d0:.3e} -> {d1:.3e} -> {d2:.3e}); \
         the coupling is too strong for this horizon"
    )]
    ContractionFailure {
        iters: usize,
        d0: f64,
        d1: f64,
        d2: f64,
    },

    /// The Picard iteration hit its iteration cap above tolerance.
    #[error("fixed-point iteration did not reach tolerance {tol:.3e} in {iters} iterations (last distance {last:.3e})")]
    NotConverged { iters: usize, tol: f64, last: f64 },

    /// A quantity was requested from a solution that never converged.
    #[error("solution did not converge; pass the explicit override to evaluate it anyway")]
    UnconvergedSolution,

    /// A denominator guard of the adjoint algebra fired.
    #[error("singular adjoint algebra: |{guard}| = {value:.3e} <= {threshold:.3e} at t = {t}, path {path}, mark {mark}")]
    AdjointSingularity {
        guard: &'static str,
        value: f64,
        threshold: f64,
        t: f64,
        path: usize,
        mark: usize,
    },

    /// The diffusion-shift fixed point did not converge.
    #[error(
        "jump-shift fixed point did not converge (residual {residual:.3e} after {iters} iterations, \
         contraction estimate {contraction:.3e})"
    )]
    DeltaFixedPoint {
        iters: usize,
        residual: f64,
        contraction: f64,
    },

    /// Configuration file problems (unknown keys, bad values, missing sections).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code class for the command-line frontend: `2` for
    /// acceptance violations / non-convergence, `3` for singular algebra,
    /// `1` for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AdjointSingularity { .. } | Error::SingularRegression { .. } => 3,
            Error::NotConverged { .. }
            | Error::ContractionFailure { .. }
            | Error::UnconvergedSolution
            | Error::ForwardDiverged { .. }
            | Error::ImplicitStep { .. }
            | Error::DeltaFixedPoint { .. } => 2,
            _ => 1,
        }
    }
}
