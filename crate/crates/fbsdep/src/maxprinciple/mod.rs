//! Spike perturbations and the pointwise maximum-principle machinery.
//!
//! A spike replaces the reference control on a short time window `(t̄, t̄+ε]`
//! while keeping it untouched on steps that carry a jump, so the perturbed
//! control never disagrees with the reference at a jump time.  Around one
//! spike this module provides
//!
//! * the perturbed control itself ([`build_spike_control`]),
//! * the diffusion-shift fixed point `Δ = p·(σ(z+Δ, u) − σ(z, ū))` solved by
//!   damped iteration ([`delta_fixed_point`]),
//! * the Hamiltonian `H = g + p·b + q·σ` and its shifted form
//!   `𝓗(u) = p·b + q·σ + g + ½P·(σ − σ̄)²` with every coefficient evaluated at
//!   `z + Δ(u)` ([`hamiltonian`], [`shifted_hamiltonian`]), and
//! * the paired cost difference of the spiked and reference solves on common
//!   noise ([`spike_cost_gap`]).
//!
//! The first/second variational systems and the `Y*`/`γ` representation live
//! in [`variation`]; lattice verification of the Hamiltonian inequality,
//! ε-order fits and the first-order expansion check live in [`experiment`].
//!
//! Conventions shared with the adjoint module: the scalar Brownian loading of
//! the first-order adjoint is the intensity integral of its stored per-mark
//! profile, jump loadings stay per mark, and near-singular gain denominators
//! are floored at the configured epsilon (the adjoint solve has already
//! audited every such point along the trajectory).  Window sources evaluate
//! knot-valued adjoints at the right knot of each step — the discrete
//! summation-by-parts convention that keeps the second-order cost identity
//! exact on linear problems.

pub mod experiment;
pub mod variation;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fbsolve::{evaluate_cost, picard_solve, CostEstimate, FbsdepSolution, RegressionConfig};
use crate::grid::ScalarGrid;
use crate::model::{CoeffPoint, Coefficients, CoeffFn, Problem};
use crate::noise::NoiseBundle;
use crate::numeric::mean_se;

pub use experiment::{
    expansion_check, order_experiment, verify_mp, ExpansionReport, MpConfig, MpReport, OrderFit,
    OrderStatistic,
};
pub use variation::{
    first_variation_backward, first_variation_simulate, gamma_simulate, second_variation_simulate,
    variation_identity_gaps, y_star_solve, FirstVariation, GammaProcess, IdentityGaps,
    SecondVariation, YStar,
};

/// Default tolerance of the diffusion-shift fixed point.
pub const DELTA_TOL: f64 = 1e-12;

/// Default iteration cap of the diffusion-shift fixed point.
pub const DELTA_MAX_ITERS: usize = 50;

// ---------------------------------------------------------------------------
// Spike construction
// ---------------------------------------------------------------------------

/// Rule producing the replacement control value of a spike.
#[derive(Clone)]
pub enum Replacement {
    /// A fixed control value.
    Value(f64),
    /// A rule applied to the reference state at the window's left edge, so the
    /// replacement is known at spike time (one value per path).
    OfState(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Replacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Replacement::Value(v) => write!(f, "Value({v})"),
            Replacement::OfState(_) => write!(f, "OfState(..)"),
        }
    }
}

/// Description of one spike perturbation.
#[derive(Debug, Clone)]
pub struct SpikeConfig {
    /// Left edge of the perturbation window, in `[0, horizon)`.
    pub t_bar: f64,
    /// Window width `ε ≥ 0` with `t_bar + width ≤ horizon`.
    pub width: f64,
    /// Replacement control applied on the window.
    pub replacement: Replacement,
}

impl SpikeConfig {
    /// Spike with a fixed replacement value.
    pub fn at(t_bar: f64, width: f64, value: f64) -> Self {
        Self {
            t_bar,
            width,
            replacement: Replacement::Value(value),
        }
    }
}

/// A spiked control together with the realized perturbation geometry.
#[derive(Debug, Clone)]
pub struct SpikeControl {
    /// The perturbed control on steps.
    pub control: ScalarGrid,
    /// Per-(path, step) indicator of where the replacement was applied.
    active: Vec<bool>,
    n_steps: usize,
    /// First and one-past-last step whose interval lies inside the window.
    pub window: (usize, usize),
    /// Replacement value per path (all equal under a fixed-value rule).
    pub replacement: Vec<f64>,
    /// Window measure `dt · (window step count)`, the per-path upper bound of
    /// the perturbed measure.
    pub nominal_measure: f64,
    /// Mean over paths of the realized perturbed measure.
    pub mean_active_measure: f64,
    /// Number of (path, step) cells inside the window left untouched because
    /// the step carries a jump.
    pub excluded_cells: usize,
}

impl SpikeControl {
    /// Whether the replacement is in force at `(path, step)`.
    #[inline]
    pub fn is_active(&self, path: usize, step: usize) -> bool {
        self.active[path * self.n_steps + step]
    }

    /// Number of perturbed steps of one path.
    pub fn active_steps(&self, path: usize) -> usize {
        let row = &self.active[path * self.n_steps..(path + 1) * self.n_steps];
        row.iter().filter(|&&a| a).count()
    }
}

/// Step range `[k_lo, k_hi)` of the steps whose interval `[t_k, t_{k+1}]` is
/// contained in the window `(t_bar, t_bar + width]`, with a small relative
/// slack so grid-aligned edges land on the intended knots.
pub(crate) fn window_steps(
    horizon: f64,
    n_steps: usize,
    t_bar: f64,
    width: f64,
) -> Result<(usize, usize)> {
    if !(0.0..horizon).contains(&t_bar) {
        return Err(Error::InvalidInput(format!(
            "spike time {t_bar} must lie in [0, {horizon})"
        )));
    }
    let slack = 1e-9 * horizon.max(1.0);
    if width < 0.0 || t_bar + width > horizon + slack {
        return Err(Error::InvalidInput(format!(
            "spike window [{t_bar}, {}] must fit inside [0, {horizon}]",
            t_bar + width
        )));
    }
    let dt = horizon / n_steps as f64;
    let k_lo = ((t_bar / dt) - 1e-9).ceil().max(0.0) as usize;
    let k_hi = (((t_bar + width) / dt) + 1e-9).floor() as usize;
    let k_hi = k_hi.min(n_steps);
    Ok((k_lo, k_hi.max(k_lo)))
}

/// Build the spiked control `u^ε`: the replacement value on every window step
/// without a jump, the reference control everywhere else.
///
/// `x_bar` supplies the reference state trajectory and is required only by
/// state-dependent replacement rules, which read the state at the window's
/// left-edge knot.
pub fn build_spike_control(
    u_bar: &ScalarGrid,
    cfg: &SpikeConfig,
    x_bar: Option<&ScalarGrid>,
    noise: &NoiseBundle,
) -> Result<SpikeControl> {
    let grid = noise.grid();
    let n_paths = noise.n_paths();
    let n_steps = grid.n_steps();
    if u_bar.n_paths() != n_paths || u_bar.per_path() != n_steps {
        return Err(Error::DimensionMismatch(format!(
            "control grid is {} paths x {} steps but the noise bundle needs {n_paths} x {n_steps}",
            u_bar.n_paths(),
            u_bar.per_path()
        )));
    }
    let (k_lo, k_hi) = window_steps(grid.horizon(), n_steps, cfg.t_bar, cfg.width)?;

    let replacement: Vec<f64> = match &cfg.replacement {
        Replacement::Value(v) => vec![*v; n_paths],
        Replacement::OfState(rule) => {
            let x = x_bar.ok_or_else(|| {
                Error::InvalidInput(
                    "a state-dependent replacement rule needs the reference state trajectory"
                        .to_string(),
                )
            })?;
            if x.n_paths() != n_paths || x.per_path() != n_steps + 1 {
                return Err(Error::DimensionMismatch(format!(
                    "reference state is {} paths x {} knots but the noise bundle needs {n_paths} x {}",
                    x.n_paths(),
                    x.per_path(),
                    n_steps + 1
                )));
            }
            (0..n_paths).map(|path| rule(x.get(path, k_lo))).collect()
        }
    };

    let mut control = u_bar.clone();
    let mut active = vec![false; n_paths * n_steps];
    let mut excluded_cells = 0usize;
    let mut active_cells = 0usize;
    for path in 0..n_paths {
        for step in k_lo..k_hi {
            if noise.step_has_jump(path, step) {
                excluded_cells += 1;
            } else {
                control.set(path, step, replacement[path]);
                active[path * n_steps + step] = true;
                active_cells += 1;
            }
        }
    }

    let dt = grid.dt();
    Ok(SpikeControl {
        control,
        active,
        n_steps,
        window: (k_lo, k_hi),
        replacement,
        nominal_measure: (k_hi - k_lo) as f64 * dt,
        mean_active_measure: active_cells as f64 * dt / n_paths as f64,
        excluded_cells,
    })
}

// ---------------------------------------------------------------------------
// Diffusion-shift fixed point and Hamiltonians
// ---------------------------------------------------------------------------

/// Copy of a coefficient point with the diffusion argument shifted and the
/// control replaced.
#[inline]
pub(crate) fn shifted_point(base: &CoeffPoint, delta: f64, u: f64) -> CoeffPoint {
    let mut pt = *base;
    pt.z += delta;
    pt.u = u;
    pt
}

/// Solve `Δ = p·(σ(z+Δ, u) − σ(z, ū))` at one trajectory point by damped
/// fixed-point iteration.
///
/// The iteration starts from the z-frozen increment `Δ₀ = p·δσ⁰` and averages
/// each iterate with its image, converging whenever `|p·σ_z|` keeps the map a
/// contraction.  Convergence is declared at `|map(Δ) − Δ| ≤ tol·(1 + |Δ|)`;
/// exhausting `max_iters` reports the last residual together with an empirical
/// contraction estimate.
pub fn delta_fixed_point(
    sigma: &dyn CoeffFn,
    base: &CoeffPoint,
    u: f64,
    p: f64,
    tol: f64,
    max_iters: usize,
) -> Result<f64> {
    let sigma_bar = sigma.value(base);
    let map = |delta: f64| p * (sigma.value(&shifted_point(base, delta, u)) - sigma_bar);

    let mut delta = map(0.0);
    let mut prev = (0.0, delta);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters.max(1) {
        let mapped = map(delta);
        residual = (mapped - delta).abs();
        if residual <= tol * (1.0 + delta.abs()) {
            return Ok(delta);
        }
        prev = (delta, mapped);
        delta = 0.5 * delta + 0.5 * mapped;
    }
    let (last, last_mapped) = prev;
    let denom = (delta - last).abs();
    let contraction = if denom > 0.0 {
        (map(delta) - last_mapped).abs() / denom
    } else {
        f64::NAN
    };
    Err(Error::DeltaFixedPoint {
        iters: max_iters,
        residual,
        contraction,
    })
}

/// Hamiltonian `H = g + p·b + q·σ` at one coefficient point.
pub fn hamiltonian(coeffs: &Coefficients, point: &CoeffPoint, p: f64, q: f64) -> f64 {
    coeffs.g.value(point) + p * coeffs.b.value(point) + q * coeffs.sigma.value(point)
}

/// Shifted Hamiltonian
/// `𝓗(u) = p·b + q·σ + g + ½P·(σ − σ̄)²` with `b`, `σ`, `g` evaluated at the
/// control `u` and the diffusion argument `z + Δ(u)`, where `Δ(u)` solves the
/// shift fixed point at this point.
///
/// At `u = ū` the shift vanishes and the value reduces to `H` at the base
/// point, so Hamiltonian gaps computed from two calls cancel exactly there.
#[allow(clippy::too_many_arguments)]
pub fn shifted_hamiltonian(
    coeffs: &Coefficients,
    base: &CoeffPoint,
    u: f64,
    p: f64,
    q: f64,
    big_p: f64,
    tol: f64,
    max_iters: usize,
) -> Result<f64> {
    let delta = delta_fixed_point(&*coeffs.sigma, base, u, p, tol, max_iters)?;
    let pt = shifted_point(base, delta, u);
    let sigma_bar = coeffs.sigma.value(base);
    let sigma = coeffs.sigma.value(&pt);
    let dsig = sigma - sigma_bar;
    Ok(p * coeffs.b.value(&pt) + q * sigma + coeffs.g.value(&pt) + 0.5 * big_p * dsig * dsig)
}

// ---------------------------------------------------------------------------
// Paired cost difference
// ---------------------------------------------------------------------------

/// Cost difference of a spiked and a reference solve on common noise.
#[derive(Debug, Clone)]
pub struct CostGap {
    /// `J(u^ε) − J(ū)` from the regression values at time zero.
    pub gap: f64,
    /// Standard error of the paired per-path cost-functional differences.
    pub standard_error: f64,
    /// Mean of the paired per-path cost-functional differences, as a
    /// cross-check on the regression-based gap.
    pub functional_gap: f64,
    pub base: CostEstimate,
    pub spiked: CostEstimate,
}

/// Solve the problem under a spiked control and return the cost difference
/// against an already-solved reference on the same noise bundle.
///
/// Both solves share every random increment, so the difference carries the
/// paired (common-random-numbers) standard error of the per-path cost
/// functionals.  A zero-width spike reproduces the reference control verbatim
/// and yields an exactly zero gap.
pub fn spike_cost_gap(
    problem: &Problem,
    base: &FbsdepSolution,
    spike: &SpikeControl,
    noise: &NoiseBundle,
    cfg: &RegressionConfig,
    tol: f64,
    max_iterations: usize,
) -> Result<CostGap> {
    let spiked = picard_solve(problem, &spike.control, noise, cfg, tol, max_iterations)?;
    let base_cost = evaluate_cost(base, false)?;
    let spiked_cost = evaluate_cost(&spiked, false)?;
    if base.cost_samples.len() != spiked.cost_samples.len() {
        return Err(Error::DimensionMismatch(format!(
            "paired costs need equal path counts, got {} and {}",
            base.cost_samples.len(),
            spiked.cost_samples.len()
        )));
    }
    let diffs: Vec<f64> = spiked
        .cost_samples
        .iter()
        .zip(&base.cost_samples)
        .map(|(s, b)| s - b)
        .collect();
    let (functional_gap, standard_error) = mean_se(&diffs);
    Ok(CostGap {
        gap: spiked_cost.value - base_cost.value,
        standard_error,
        functional_gap,
        base: base_cost,
        spiked: spiked_cost,
    })
}

#[cfg(test)]
pub(crate) mod testkit {
    use super::*;
    use crate::fbsolve::picard_solve;
    use crate::noise::{generate_noise, TimeGrid};

    pub(crate) fn noise_for(
        problem: &Problem,
        n_paths: usize,
        n_steps: usize,
        seed: u64,
    ) -> NoiseBundle {
        let grid = TimeGrid::new(problem.horizon, n_steps).expect("grid must build");
        generate_noise(&grid, &problem.markspace, n_paths, seed).expect("noise must generate")
    }

    pub(crate) fn solved(
        problem: &Problem,
        noise: &NoiseBundle,
        control: &ScalarGrid,
    ) -> FbsdepSolution {
        picard_solve(
            problem,
            control,
            noise,
            &RegressionConfig::default(),
            1e-9,
            25,
        )
        .expect("solve must run")
    }

    /// Oracle adjoint line of the linear-quadratic family.
    pub(crate) fn lq_p(t: f64) -> f64 {
        0.5 + 0.5 * (1.0 - t)
    }
}
