//! Numerical experiments around one solved problem: lattice verification of
//! the pointwise Hamiltonian inequality, ε-order fits of the spike expansion,
//! and the first-order cost-gap check against its closed-form coefficient.
//!
//! Each driver consumes an already-solved reference trajectory together with
//! its adjoints, so repeated experiments share the expensive solves.  All
//! estimators are deterministic for a fixed noise bundle: lattices are
//! strided index sets, per-path statistics are accumulated in path order, and
//! every Monte Carlo mean carries its standard error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{require_converged, trajectory_point, FirstOrderAdjoint, SecondOrderAdjoint};
use crate::error::{Error, Result};
use crate::fbsolve::{picard_solve, FbsdepSolution, RegressionConfig};
use crate::model::Problem;
use crate::noise::NoiseBundle;
use crate::numeric::{line_fit, mean_se};

use super::variation::first_variation_simulate;
use super::{
    build_spike_control, delta_fixed_point, shifted_hamiltonian, shifted_point, spike_cost_gap,
    window_steps, Replacement, SpikeConfig, DELTA_MAX_ITERS, DELTA_TOL,
};

// ---------------------------------------------------------------------------
// Pointwise Hamiltonian verification
// ---------------------------------------------------------------------------

/// Lattice layout and tolerance of a Hamiltonian-minimality scan.
#[derive(Debug, Clone)]
pub struct MpConfig {
    /// Number of evenly strided time steps to visit.
    pub n_times: usize,
    /// Number of evenly strided paths to visit.
    pub n_paths: usize,
    /// Control offsets added to the reference control before clamping to the
    /// admissible set; include `0.0` to pin the exact-zero diagonal.
    pub offsets: Vec<f64>,
    /// Relative violation tolerance: a gap below `−tol·(1 + |𝓗(ū)|)` counts
    /// as a violation.
    pub tol: f64,
}

impl MpConfig {
    /// Offsets spanning `[−span, span]` evenly; an odd count contains `0.0`
    /// exactly.
    pub fn spanning(span: f64, n_controls: usize) -> Vec<f64> {
        if n_controls <= 1 {
            return vec![0.0];
        }
        let h = 2.0 * span / (n_controls - 1) as f64;
        (0..n_controls).map(|i| -span + h * i as f64).collect()
    }
}

impl Default for MpConfig {
    fn default() -> Self {
        Self {
            n_times: 20,
            n_paths: 200,
            offsets: Self::spanning(2.0, 41),
            tol: 1e-2,
        }
    }
}

/// Result of a Hamiltonian-minimality scan over a `(time, path, offset)`
/// lattice.
#[derive(Debug, Clone, Serialize)]
pub struct MpReport {
    /// Offsets as configured.
    pub offsets: Vec<f64>,
    /// Visited step indices.
    pub step_indices: Vec<usize>,
    /// Visited path indices.
    pub path_indices: Vec<usize>,
    /// Evaluated controls, indexed `[(time·paths + path)·offsets + offset]`.
    pub controls: Vec<f64>,
    /// Hamiltonian gaps `𝓗(u) − 𝓗(ū)`, same indexing as `controls`.
    pub gaps: Vec<f64>,
    /// Reference values `𝓗(ū)` per lattice point, indexed
    /// `[time·paths + path]`.
    pub base_values: Vec<f64>,
    /// Smallest gap seen.
    pub min_gap: f64,
    /// Smallest gap relative to `1 + |𝓗(ū)|`.
    pub min_scaled_gap: f64,
    /// Fraction of evaluations violating the tolerance.
    pub violation_fraction: f64,
    /// Total number of `(time, path, offset)` evaluations.
    pub n_evaluations: usize,
    /// Tolerance used for violation counting.
    pub tol: f64,
}

impl MpReport {
    /// Gap at lattice indices `(time, path, offset)`.
    #[inline]
    pub fn gap(&self, time: usize, path: usize, offset: usize) -> f64 {
        self.gaps[(time * self.path_indices.len() + path) * self.offsets.len() + offset]
    }
}

fn strided_indices(count: usize, upper: usize) -> Vec<usize> {
    let count = count.max(1);
    let mut out: Vec<usize> = (0..count.min(upper))
        .map(|i| i * upper / count.min(upper).max(1))
        .collect();
    out.dedup();
    out
}

/// Scan the shifted Hamiltonian `𝓗` over a lattice of trajectory points and
/// control offsets, verifying that the reference control minimizes it.
///
/// Both sides of each gap go through the same shifted evaluation (the
/// reference side solves the same — immediately converged — shift fixed
/// point), so the gap at offset zero is exactly `0.0`.
pub fn verify_mp(
    problem: &Problem,
    base: &FbsdepSolution,
    fo: &FirstOrderAdjoint,
    so: &SecondOrderAdjoint,
    cfg: &MpConfig,
    noise: &NoiseBundle,
) -> Result<MpReport> {
    require_converged(base)?;
    if cfg.offsets.is_empty() {
        return Err(Error::InvalidInput(
            "a Hamiltonian scan needs at least one control offset".to_string(),
        ));
    }
    let ms = noise.markspace();
    let weights = ms.weights();
    let coeffs = &problem.coefficients;
    let step_indices = strided_indices(cfg.n_times, noise.grid().n_steps());
    let path_indices = strided_indices(cfg.n_paths, noise.n_paths());
    let n_offsets = cfg.offsets.len();

    struct PointScan {
        base_value: f64,
        controls: Vec<f64>,
        gaps: Vec<f64>,
    }

    let lattice: Vec<(usize, usize)> = step_indices
        .iter()
        .flat_map(|&step| path_indices.iter().map(move |&path| (step, path)))
        .collect();
    let scans: Vec<Result<PointScan>> = lattice
        .par_iter()
        .map(|&(step, path)| {
            let u_bar = base.control.get(path, step);
            let p = fo.p.get(path, step);
            let big_p = so.p.get(path, step);
            let mut controls = Vec::with_capacity(n_offsets);
            let mut gaps = Vec::with_capacity(n_offsets);
            // Per-mark reference values, reused across offsets.
            let mut base_marks = Vec::with_capacity(weights.len());
            let mut base_value = 0.0;
            for (mark, &weight) in weights.iter().enumerate() {
                let pt = trajectory_point(base, noise, path, step, mark);
                let q = fo.q.get(path, step, mark);
                let h_bar = shifted_hamiltonian(
                    coeffs,
                    &pt,
                    u_bar,
                    p,
                    q,
                    big_p,
                    DELTA_TOL,
                    DELTA_MAX_ITERS,
                )?;
                base_marks.push((pt, q, h_bar));
                base_value += weight * h_bar;
            }
            for &offset in &cfg.offsets {
                let u = problem.controls.clamp(u_bar + offset);
                let mut gap = 0.0;
                for (mark, &weight) in weights.iter().enumerate() {
                    let (pt, q, h_bar) = &base_marks[mark];
                    let h = shifted_hamiltonian(
                        coeffs,
                        pt,
                        u,
                        p,
                        *q,
                        big_p,
                        DELTA_TOL,
                        DELTA_MAX_ITERS,
                    )?;
                    gap += weight * (h - h_bar);
                }
                controls.push(u);
                gaps.push(gap);
            }
            Ok(PointScan {
                base_value,
                controls,
                gaps,
            })
        })
        .collect();

    let mut controls = Vec::with_capacity(lattice.len() * n_offsets);
    let mut gaps = Vec::with_capacity(lattice.len() * n_offsets);
    let mut base_values = Vec::with_capacity(lattice.len());
    let mut min_gap = f64::INFINITY;
    let mut min_scaled_gap = f64::INFINITY;
    let mut violations = 0usize;
    for scan in scans {
        let scan = scan?;
        let scale = 1.0 + scan.base_value.abs();
        for &gap in &scan.gaps {
            min_gap = min_gap.min(gap);
            min_scaled_gap = min_scaled_gap.min(gap / scale);
            if gap < -cfg.tol * scale {
                violations += 1;
            }
        }
        controls.extend_from_slice(&scan.controls);
        gaps.extend_from_slice(&scan.gaps);
        base_values.push(scan.base_value);
    }
    let n_evaluations = gaps.len();

    Ok(MpReport {
        offsets: cfg.offsets.clone(),
        step_indices,
        path_indices,
        controls,
        gaps,
        base_values,
        min_gap,
        min_scaled_gap,
        violation_fraction: violations as f64 / n_evaluations as f64,
        n_evaluations,
        tol: cfg.tol,
    })
}

// ---------------------------------------------------------------------------
// Spike-order experiment
// ---------------------------------------------------------------------------

/// Path statistic whose ε-scaling the order experiment measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderStatistic {
    /// `E[sup_k |X^ε − X̄|²]`, expected slope 1 in `ln ε`.
    ForwardGap,
    /// `E[sup_k |Y^ε − Ȳ|²]`, expected slope 1.
    BackwardGap,
    /// `E[sup_k |X¹|²]`, expected slope 1.
    FirstVariation,
    /// `E[sup_k |X^ε − X̄ − X¹|²]`, expected slope 2.
    Remainder,
}

impl OrderStatistic {
    /// All statistics, in presentation order.
    pub const ALL: [OrderStatistic; 4] = [
        OrderStatistic::ForwardGap,
        OrderStatistic::BackwardGap,
        OrderStatistic::FirstVariation,
        OrderStatistic::Remainder,
    ];

    /// Stable machine-readable name.
    pub fn label(&self) -> &'static str {
        match self {
            OrderStatistic::ForwardGap => "forward_gap",
            OrderStatistic::BackwardGap => "backward_gap",
            OrderStatistic::FirstVariation => "first_variation",
            OrderStatistic::Remainder => "remainder",
        }
    }

    /// Slope of the statistic's expected power law in `ε`.
    pub fn expected_slope(&self) -> f64 {
        match self {
            OrderStatistic::Remainder => 2.0,
            _ => 1.0,
        }
    }
}

impl std::str::FromStr for OrderStatistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OrderStatistic::ALL
            .iter()
            .copied()
            .find(|stat| stat.label() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown order statistic '{s}'; expected one of {}",
                    OrderStatistic::ALL.map(|st| st.label()).join(", ")
                ))
            })
    }
}

/// Log-log power fit of one statistic across a ladder of spike widths.
#[derive(Debug, Clone, Serialize)]
pub struct OrderFit {
    /// Statistic that was measured.
    pub statistic: OrderStatistic,
    /// Spike widths, strictly decreasing.
    pub epsilons: Vec<f64>,
    /// Statistic values per width.
    pub values: Vec<f64>,
    /// Standard errors of the values.
    pub standard_errors: Vec<f64>,
    /// Fitted slope of `ln value` against `ln ε` (zero when inconclusive).
    pub slope: f64,
    /// Fitted intercept.
    pub intercept: f64,
    /// Coefficient of determination of the fit.
    pub r_squared: f64,
    /// Largest relative noise `3·se/value` across the ladder.
    pub noise_floor: f64,
    /// Set when some value is statistically indistinguishable from zero, in
    /// which case no slope is claimed.
    pub inconclusive: bool,
}

/// Per-path supremum-squared statistic between two knot grids.
fn sup_sq_samples(
    a: &crate::grid::ScalarGrid,
    b: Option<&crate::grid::ScalarGrid>,
    c: Option<&crate::grid::ScalarGrid>,
    n_paths: usize,
    n_knots: usize,
) -> Vec<f64> {
    (0..n_paths)
        .map(|path| {
            let mut sup = 0.0f64;
            for knot in 0..n_knots {
                let mut v = a.get(path, knot);
                if let Some(b) = b {
                    v -= b.get(path, knot);
                }
                if let Some(c) = c {
                    v -= c.get(path, knot);
                }
                sup = sup.max(v.abs());
            }
            sup * sup
        })
        .collect()
}

/// Measure one spike statistic across a decreasing ladder of widths and fit
/// its ε-power law.
///
/// Every width reuses the same noise bundle and reference solve, so the
/// statistics are paired across the ladder.  When a statistic is
/// indistinguishable from zero at some width (a control-insensitive problem),
/// the fit is marked inconclusive instead of reporting a meaningless slope.
#[allow(clippy::too_many_arguments)]
pub fn order_experiment(
    problem: &Problem,
    base: &FbsdepSolution,
    fo: &FirstOrderAdjoint,
    t_bar: f64,
    replacement: &Replacement,
    epsilons: &[f64],
    statistic: OrderStatistic,
    noise: &NoiseBundle,
    cfg: &RegressionConfig,
    tol: f64,
    max_iterations: usize,
) -> Result<OrderFit> {
    require_converged(base)?;
    if epsilons.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "an order fit needs at least 4 spike widths, got {}",
            epsilons.len()
        )));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) || epsilons.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidInput(
            "spike widths must be positive and strictly decreasing".to_string(),
        ));
    }

    let n_paths = noise.n_paths();
    let n_knots = noise.grid().n_steps() + 1;
    let mut values = Vec::with_capacity(epsilons.len());
    let mut standard_errors = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let spike_cfg = SpikeConfig {
            t_bar,
            width: eps,
            replacement: replacement.clone(),
        };
        let spike = build_spike_control(&base.control, &spike_cfg, Some(&base.x), noise)?;
        let samples = match statistic {
            OrderStatistic::ForwardGap => {
                let spiked = picard_solve(problem, &spike.control, noise, cfg, tol, max_iterations)?;
                sup_sq_samples(&spiked.x, Some(&base.x), None, n_paths, n_knots)
            }
            OrderStatistic::BackwardGap => {
                let spiked = picard_solve(problem, &spike.control, noise, cfg, tol, max_iterations)?;
                sup_sq_samples(&spiked.y, Some(&base.y), None, n_paths, n_knots)
            }
            OrderStatistic::FirstVariation => {
                let first = first_variation_simulate(problem, base, fo, &spike, noise)?;
                sup_sq_samples(&first.x1, None, None, n_paths, n_knots)
            }
            OrderStatistic::Remainder => {
                let spiked = picard_solve(problem, &spike.control, noise, cfg, tol, max_iterations)?;
                let first = first_variation_simulate(problem, base, fo, &spike, noise)?;
                sup_sq_samples(&spiked.x, Some(&base.x), Some(&first.x1), n_paths, n_knots)
            }
        };
        let (mean, se) = mean_se(&samples);
        values.push(mean);
        standard_errors.push(se);
    }

    let mut noise_floor = 0.0f64;
    let mut inconclusive = false;
    for (&v, &se) in values.iter().zip(&standard_errors) {
        if v <= (3.0 * se).max(1e-300) {
            inconclusive = true;
        } else {
            noise_floor = noise_floor.max(3.0 * se / v);
        }
    }
    if inconclusive {
        return Ok(OrderFit {
            statistic,
            epsilons: epsilons.to_vec(),
            values,
            standard_errors,
            slope: 0.0,
            intercept: 0.0,
            r_squared: 0.0,
            noise_floor: f64::INFINITY,
            inconclusive,
        });
    }

    let ln_eps: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
    let ln_val: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let (intercept, slope, r_squared) = line_fit(&ln_eps, &ln_val);
    Ok(OrderFit {
        statistic,
        epsilons: epsilons.to_vec(),
        values,
        standard_errors,
        slope,
        intercept,
        r_squared,
        noise_floor,
        inconclusive,
    })
}

// ---------------------------------------------------------------------------
// First-order expansion check
// ---------------------------------------------------------------------------

/// Comparison of measured spike cost gaps against the first-order expansion
/// `J(u^ε) − J(ū) = ε·G + o(ε)`.
#[derive(Debug, Clone, Serialize)]
pub struct ExpansionReport {
    /// Left edge of the spike windows.
    pub t_bar: f64,
    /// Expansion coefficient estimate
    /// `G = E[γ(t̄)·∫(δH + ½P·(δσ)²) ν]` on jump-free paths.
    pub g_value: f64,
    /// Standard error of the coefficient estimate.
    pub g_standard_error: f64,
    /// Spike widths, strictly decreasing.
    pub epsilons: Vec<f64>,
    /// Measured cost gaps per width.
    pub gaps: Vec<f64>,
    /// Paired standard errors of the gaps.
    pub gap_standard_errors: Vec<f64>,
    /// First-order errors `|gap − ε·G| / ε` per width.
    pub errors: Vec<f64>,
    /// Acceptance band for the final error:
    /// `0.1·(|G| + 3·se(gap_min)/ε_min)`.
    pub band: f64,
    /// Whether the error ladder is non-increasing.
    pub errors_decreasing: bool,
    /// Whether the final error sits inside the band.
    pub final_within_band: bool,
    /// Whether the measured gaps at the two smallest widths share the sign of
    /// `ε·G` (exact zeros match exact zeros).
    pub signs_match: bool,
}

fn same_sign(a: f64, b: f64) -> bool {
    if a == 0.0 && b == 0.0 {
        return true;
    }
    a.signum() == b.signum()
}

/// Estimate the expansion coefficient `G` at `t_bar` and compare it against
/// measured cost gaps across a decreasing ladder of spike widths.
///
/// The coefficient is sampled per path as `γ(t̄)·∫(δH + ½P·(δσ)²) ν` on the
/// step containing `t̄`, with zero contribution from paths that jump there
/// (mirroring the jump-free spike construction); `δH = δg + p·δb + q̂·δσ` uses
/// the right-knot adjoint values, matching the discrete summation-by-parts
/// convention of the window sources.
#[allow(clippy::too_many_arguments)]
pub fn expansion_check(
    problem: &Problem,
    base: &FbsdepSolution,
    fo: &FirstOrderAdjoint,
    so: &SecondOrderAdjoint,
    t_bar: f64,
    replacement: &Replacement,
    epsilons: &[f64],
    noise: &NoiseBundle,
    cfg: &RegressionConfig,
    tol: f64,
    max_iterations: usize,
    eps_denominator: f64,
) -> Result<ExpansionReport> {
    require_converged(base)?;
    if epsilons.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "an expansion check needs at least 2 spike widths, got {}",
            epsilons.len()
        )));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) || epsilons.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidInput(
            "spike widths must be positive and strictly decreasing".to_string(),
        ));
    }

    let grid = noise.grid();
    let n_steps = grid.n_steps();
    let n_paths = noise.n_paths();
    let ms = noise.markspace();
    let weights = ms.weights();
    let coeffs = &problem.coefficients;
    let k_bar = window_steps(grid.horizon(), n_steps, t_bar, 0.0)?
        .0
        .min(n_steps - 1);

    let gamma = super::gamma_simulate(problem, base, fo, noise, eps_denominator)?;

    // Per-path samples of the expansion coefficient at the spike step.
    let mut samples = vec![0.0f64; n_paths];
    for (path, sample) in samples.iter_mut().enumerate() {
        if noise.step_has_jump(path, k_bar) {
            continue;
        }
        let u = match replacement {
            Replacement::Value(v) => *v,
            Replacement::OfState(rule) => rule(base.x.get(path, k_bar)),
        };
        let p = fo.p.get(path, k_bar);
        let p_right = fo.p.get(path, k_bar + 1);
        let big_p_right = so.p.get(path, k_bar + 1);
        let q_hat = ms.integrate(fo.q.at(path, k_bar));
        let mut source = 0.0;
        for (mark, &weight) in weights.iter().enumerate() {
            let pt = trajectory_point(base, noise, path, k_bar, mark);
            let delta =
                delta_fixed_point(&*coeffs.sigma, &pt, u, p, DELTA_TOL, DELTA_MAX_ITERS)?;
            let moved = shifted_point(&pt, delta, u);
            let db = coeffs.b.value(&moved) - coeffs.b.value(&pt);
            let dg = coeffs.g.value(&moved) - coeffs.g.value(&pt);
            let dsig = coeffs.sigma.value(&moved) - coeffs.sigma.value(&pt);
            source +=
                weight * (dg + p_right * db + q_hat * dsig + 0.5 * big_p_right * dsig * dsig);
        }
        *sample = gamma.gamma.get(path, k_bar) * source;
    }
    let (g_value, g_standard_error) = mean_se(&samples);

    let mut gaps = Vec::with_capacity(epsilons.len());
    let mut gap_standard_errors = Vec::with_capacity(epsilons.len());
    let mut errors = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let spike_cfg = SpikeConfig {
            t_bar,
            width: eps,
            replacement: replacement.clone(),
        };
        let spike = build_spike_control(&base.control, &spike_cfg, Some(&base.x), noise)?;
        let cost = spike_cost_gap(problem, base, &spike, noise, cfg, tol, max_iterations)?;
        errors.push((cost.gap - eps * g_value).abs() / eps);
        gaps.push(cost.gap);
        gap_standard_errors.push(cost.standard_error);
    }

    let errors_decreasing = errors.windows(2).all(|w| w[1] <= w[0]);
    let eps_min = *epsilons.last().expect("validated non-empty");
    let se_min = *gap_standard_errors.last().expect("same length as widths");
    let band = 0.1 * (g_value.abs() + 3.0 * se_min / eps_min);
    let final_within_band = *errors.last().expect("same length as widths") <= band;
    let n = epsilons.len();
    let signs_match = (n - 2..n).all(|i| same_sign(gaps[i], epsilons[i] * g_value));

    Ok(ExpansionReport {
        t_bar,
        g_value,
        g_standard_error,
        epsilons: epsilons.to_vec(),
        gaps,
        gap_standard_errors,
        errors,
        band,
        errors_decreasing,
        final_within_band,
        signs_match,
    })
}
