//! Coupled forward-backward solver.
//!
//! The forward state follows an Euler scheme on the shared noise bundle, the
//! backward triple `(Y, Z, Z~)` is estimated by least-squares regression on a
//! polynomial basis of the state with an implicit value update, and the two
//! passes are alternated in a Picard loop started from the zero backward
//! triple.  The loop tracks the distance between successive backward iterates
//! and stops when it falls below tolerance, failing loudly when it grows
//! instead.
//!
//! Conventions: the state and the value live on the `n_steps + 1` knots of the
//! time grid, while controls and both loadings live on the `n_steps` left
//! endpoints.  Loadings are stored per mark; the Brownian loading is recovered
//! from a centred `dW` regression and distributed uniformly over marks so that
//! its intensity integral matches the fitted value, and the jump loading is
//! recovered per mark from centred compensated-increment regressions.

mod regression;
pub(crate) mod sweeps;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MarkGrid, ScalarGrid};
use crate::model::{CoeffPoint, Problem};
use crate::noise::NoiseBundle;
use crate::numeric::{mean_se, KahanSum};

pub(crate) use regression::{clip_bounds, StateBasis};
use sweeps::{BackwardSystem, ForwardSystem, InitialState};

/// Backward solution triple: value on knots, Brownian loading per mark on
/// steps, jump loading per mark on steps.
pub type BackwardTriple = (ScalarGrid, MarkGrid, MarkGrid);

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How the per-mark profile of the Brownian loading is chosen.  The `dW`
/// regression identifies only the intensity integral of the loading, not its
/// mark dependence, so a closure rule is needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZMarkMode {
    /// Store the same value at every mark, scaled so that the intensity
    /// integral of the stored profile equals the fitted loading.
    #[default]
    Constant,
}

/// Tuning of the backward regression sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    /// Degree of the monomial basis in the conditioning state.
    pub degree: usize,
    /// Relative ridge penalty on the standardised non-intercept columns.
    pub ridge: f64,
    /// Mark-profile closure rule for the Brownian loading.
    pub z_mark_mode: ZMarkMode,
    /// Relative tolerance of the implicit value update.
    pub implicit_tol: f64,
    /// Iteration cap of the implicit value update.
    pub implicit_max_iters: usize,
    /// Tail fraction clipped off the conditioning state before basis rows are
    /// built (per side).  Bounds the polynomial extrapolation that otherwise
    /// destabilises coupled iterations; zero disables clipping.
    pub clip_tail: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            ridge: 1e-8,
            z_mark_mode: ZMarkMode::Constant,
            implicit_tol: 1e-10,
            implicit_max_iters: 10,
            clip_tail: 1e-3,
        }
    }
}

// ---------------------------------------------------------------------------
// Reports and solution containers
// ---------------------------------------------------------------------------

/// Convergence record of a Picard loop.
#[derive(Debug, Clone, Serialize)]
pub struct PicardReport {
    /// Iterations actually performed (one iteration = one forward pass plus
    /// one backward pass).
    pub iterations: usize,
    pub converged: bool,
    pub tol: f64,
    /// Distance between consecutive backward iterates, one entry per
    /// iteration; the first entry compares against the zero triple.
    pub distances: Vec<f64>,
    /// Successive distance ratios `distances[i+1] / distances[i]`.
    pub ratios: Vec<f64>,
}

impl PicardReport {
    pub(crate) fn from_distances(
        iterations: usize,
        converged: bool,
        tol: f64,
        distances: Vec<f64>,
    ) -> Self {
        let ratios = distances
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
            .collect();
        Self {
            iterations,
            converged,
            tol,
            distances,
            ratios,
        }
    }
}

/// Solution of one coupled solve under a fixed control.
pub struct FbsdepSolution {
    /// Forward state on knots.
    pub x: ScalarGrid,
    /// Backward value on knots.
    pub y: ScalarGrid,
    /// Brownian loading per mark on steps.
    pub z: MarkGrid,
    /// Jump loading per mark on steps.
    pub zt: MarkGrid,
    /// The control the solve was run under, on steps.
    pub control: ScalarGrid,
    /// Pathwise realisations of the cost functional (terminal cost plus the
    /// intensity-integrated running cost along the solved trajectory).
    pub cost_samples: Vec<f64>,
    pub report: PicardReport,
}

/// Point estimate of the control objective.
#[derive(Debug, Clone, Serialize)]
pub struct CostEstimate {
    /// Sample mean of the backward value at time zero.
    pub value: f64,
    /// Monte Carlo standard error, estimated from the pathwise cost samples
    /// (the time-zero value itself is almost constant across paths by
    /// construction, so its spread would understate the error).
    pub standard_error: f64,
    /// Sample mean of the pathwise cost functional, as a cross-check on the
    /// regression-based value.
    pub functional_mean: f64,
    pub n_paths: usize,
}

/// Solution- and data-side norms used by the a-priori estimate audits.
#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    /// Moment order `p`.
    pub p: f64,
    /// `E[sup_k |X_k|^p]^(1/p)`.
    pub x_sup: f64,
    /// `E[sup_k |Y_k|^p]^(1/p)`.
    pub y_sup: f64,
    /// `E[(Σ_k dt |Z_k|_ν²)^(p/2)]^(1/p)`.
    pub z_l2: f64,
    /// `E[(Σ_k Σ_j dN_kj Z~_kj²)^(p/2)]^(1/p)`.
    pub zt_jump: f64,
    /// `(x_sup^p + y_sup^p + z_l2^p + zt_jump^p)^(1/p)`.
    pub solution: f64,
    /// `|x0|`.
    pub x0: f64,
    /// `|phi(0)|`.
    pub phi0: f64,
    /// Drift at the origin: `E[(Σ_k dt Σ_j ν_j |b_j(0)|)^p]^(1/p)`.
    pub b0: f64,
    /// Diffusion at the origin: `E[(Σ_k dt (Σ_j ν_j σ_j(0))²)^(p/2)]^(1/p)`.
    pub sigma0: f64,
    /// Jump amplitude at the origin: `E[(Σ_k dt Σ_j ν_j f_j(0)²)^(p/2)]^(1/p)`.
    pub f0: f64,
    /// Generator at the origin: `E[(Σ_k dt Σ_j ν_j |g_j(0)|)^p]^(1/p)`.
    pub g0: f64,
    /// Combined data norm `(x0^p + phi0^p + b0^p + sigma0^p + f0^p + g0^p)^(1/p)`.
    pub data: f64,
    /// `solution / data`; the a-priori estimate asserts this stays bounded.
    pub ratio: f64,
}

// ---------------------------------------------------------------------------
// Control helpers
// ---------------------------------------------------------------------------

/// Control grid holding one constant value on every step of every path.
pub fn constant_control(noise: &NoiseBundle, value: f64) -> ScalarGrid {
    ScalarGrid::constant(noise.n_paths(), noise.grid().n_steps(), value)
}

/// Control grid sampling a deterministic policy `t -> u` at the left
/// endpoints.
pub fn time_control(noise: &NoiseBundle, policy: impl Fn(f64) -> f64) -> ScalarGrid {
    let n_steps = noise.grid().n_steps();
    let mut control = ScalarGrid::zeros(noise.n_paths(), n_steps);
    for step in 0..n_steps {
        let value = policy(noise.grid().knot(step));
        for path in 0..noise.n_paths() {
            control.set(path, step, value);
        }
    }
    control
}

/// The zero backward triple on the shape of a noise bundle; the canonical
/// Picard starting point, also useful for simulating decoupled states.
pub fn zero_triple(noise: &NoiseBundle) -> BackwardTriple {
    let n_paths = noise.n_paths();
    let n_steps = noise.grid().n_steps();
    let n_marks = noise.markspace().len();
    (
        ScalarGrid::zeros(n_paths, n_steps + 1),
        MarkGrid::zeros(n_paths, n_steps, n_marks),
        MarkGrid::zeros(n_paths, n_steps, n_marks),
    )
}

fn check_control(noise: &NoiseBundle, control: &ScalarGrid) -> Result<()> {
    if control.n_paths() != noise.n_paths() || control.per_path() != noise.grid().n_steps() {
        return Err(Error::DimensionMismatch(format!(
            "control grid is {} paths x {} steps but the noise bundle needs {} x {}",
            control.n_paths(),
            control.per_path(),
            noise.n_paths(),
            noise.grid().n_steps()
        )));
    }
    Ok(())
}

fn check_backward_shape(noise: &NoiseBundle, y: &ScalarGrid, z: &MarkGrid, zt: &MarkGrid) -> Result<()> {
    let n_paths = noise.n_paths();
    let n_steps = noise.grid().n_steps();
    let n_marks = noise.markspace().len();
    let ok = y.n_paths() == n_paths
        && y.per_path() == n_steps + 1
        && z.n_paths() == n_paths
        && z.n_steps() == n_steps
        && z.n_marks() == n_marks
        && zt.n_paths() == n_paths
        && zt.n_steps() == n_steps
        && zt.n_marks() == n_marks;
    if !ok {
        return Err(Error::DimensionMismatch(format!(
            "backward triple does not match the noise bundle ({n_paths} paths, {n_steps} steps, {n_marks} marks)"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

/// Simulate the forward state under a fixed control and a frozen backward
/// triple (the coupling inputs of one Picard iterate).
pub fn simulate_forward(
    problem: &Problem,
    control: &ScalarGrid,
    y: &ScalarGrid,
    z: &MarkGrid,
    zt: &MarkGrid,
    noise: &NoiseBundle,
) -> Result<ScalarGrid> {
    check_control(noise, control)?;
    check_backward_shape(noise, y, z, zt)?;
    let grid = noise.grid();
    let ms = noise.markspace();
    let coeffs = &problem.coefficients;

    let point = |path: usize, step: usize, x: f64, mark: usize, e: f64| CoeffPoint {
        t: grid.knot(step),
        x,
        y: y.get(path, step),
        z: z.get(path, step, mark),
        zt: zt.get(path, step, mark),
        u: control.get(path, step),
        e,
    };
    let drift = |path: usize, step: usize, x: f64| {
        ms.integrate_fn(|mark, e| coeffs.b.value(&point(path, step, x, mark, e)))
    };
    let diffusion = |path: usize, step: usize, x: f64| {
        ms.integrate_fn(|mark, e| coeffs.sigma.value(&point(path, step, x, mark, e)))
    };
    let jump = |path: usize, step: usize, x: f64, mark: usize| {
        coeffs.f.value(&point(path, step, x, mark, ms.mark(mark)))
    };

    let system = ForwardSystem {
        initial: InitialState::Constant(problem.x0),
        drift: &drift,
        diffusion: &diffusion,
        jump: &jump,
    };
    sweeps::forward_sweep(noise, &system)
}

/// Solve the backward equation along a frozen forward state under a fixed
/// control (the regression half of one Picard iterate).
pub fn solve_backward(
    problem: &Problem,
    x: &ScalarGrid,
    control: &ScalarGrid,
    noise: &NoiseBundle,
    cfg: &RegressionConfig,
) -> Result<BackwardTriple> {
    check_control(noise, control)?;
    let grid = noise.grid();
    let ms = noise.markspace();
    let n_steps = grid.n_steps();
    if x.n_paths() != noise.n_paths() || x.per_path() != n_steps + 1 {
        return Err(Error::DimensionMismatch(format!(
            "state grid is {} paths x {} knots but the noise bundle needs {} x {}",
            x.n_paths(),
            x.per_path(),
            noise.n_paths(),
            n_steps + 1
        )));
    }
    let coeffs = &problem.coefficients;

    let terminal: Vec<f64> = (0..noise.n_paths())
        .map(|path| coeffs.phi.value(x.get(path, n_steps)))
        .collect();
    let state_basis = StateBasis::new(x, n_steps, cfg.degree, cfg.clip_tail);
    let basis =
        |path: usize, step: usize, row: &mut [f64]| state_basis.fill(path, step, row);
    let driver = |path: usize, step: usize, y_val: f64, z_row: &[f64], zt_row: &[f64]| {
        let t = grid.knot(step);
        let state = x.get(path, step);
        let u = control.get(path, step);
        ms.integrate_fn(|mark, e| {
            coeffs.g.value(&CoeffPoint {
                t,
                x: state,
                y: y_val,
                z: z_row[mark],
                zt: zt_row[mark],
                u,
                e,
            })
        })
    };

    let system = BackwardSystem {
        n_basis: cfg.degree + 1,
        basis: &basis,
        driver: &driver,
        terminal: &terminal,
    };
    sweeps::backward_sweep(noise, &system, cfg)
}

/// Solve the coupled system under a fixed control by Picard iteration from
/// the zero backward triple.
///
/// Runs until the distance between successive backward iterates drops below
/// `tol` or `max_iterations` is exhausted; the latter returns the last iterate
/// with `converged = false` in the report rather than an error, so callers can
/// inspect the distance history.  Hard divergence (three consecutive distance
/// increases, or a non-finite distance) is an error.
pub fn picard_solve(
    problem: &Problem,
    control: &ScalarGrid,
    noise: &NoiseBundle,
    cfg: &RegressionConfig,
    tol: f64,
    max_iterations: usize,
) -> Result<FbsdepSolution> {
    check_control(noise, control)?;
    let forward = |triple: &BackwardTriple| {
        simulate_forward(problem, control, &triple.0, &triple.1, &triple.2, noise)
    };
    let backward = |x: &ScalarGrid| solve_backward(problem, x, control, noise, cfg);
    let (x, (y, z, zt), report) =
        sweeps::picard_loop(noise, &forward, &backward, tol, max_iterations)?;

    let cost_samples = pathwise_costs(problem, &x, &y, &z, &zt, control, noise);
    Ok(FbsdepSolution {
        x,
        y,
        z,
        zt,
        control: control.clone(),
        cost_samples,
        report,
    })
}

/// Pathwise cost functional realisations along a solved trajectory.
fn pathwise_costs(
    problem: &Problem,
    x: &ScalarGrid,
    y: &ScalarGrid,
    z: &MarkGrid,
    zt: &MarkGrid,
    control: &ScalarGrid,
    noise: &NoiseBundle,
) -> Vec<f64> {
    let grid = noise.grid();
    let ms = noise.markspace();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let coeffs = &problem.coefficients;
    (0..noise.n_paths())
        .map(|path| {
            let mut acc = KahanSum::new();
            for step in 0..n_steps {
                let t = grid.knot(step);
                let state = x.get(path, step);
                let u = control.get(path, step);
                let running = ms.integrate_fn(|mark, e| {
                    coeffs.g.value(&CoeffPoint {
                        t,
                        x: state,
                        y: y.get(path, step),
                        z: z.get(path, step, mark),
                        zt: zt.get(path, step, mark),
                        u,
                        e,
                    })
                });
                acc.add(dt * running);
            }
            acc.add(coeffs.phi.value(x.get(path, n_steps)));
            acc.value()
        })
        .collect()
}

/// Objective estimate of a solved problem.
///
/// Refuses solutions whose Picard loop did not converge unless
/// `allow_unconverged` is set.
pub fn evaluate_cost(solution: &FbsdepSolution, allow_unconverged: bool) -> Result<CostEstimate> {
    if !solution.report.converged && !allow_unconverged {
        return Err(Error::UnconvergedSolution);
    }
    let y0 = solution.y.column(0);
    let (value, _) = mean_se(&y0);
    let (functional_mean, standard_error) = mean_se(&solution.cost_samples);
    Ok(CostEstimate {
        value,
        standard_error,
        functional_mean,
        n_paths: y0.len(),
    })
}

/// Solution- and data-side `L^p` norms of a solved system.
pub fn lp_norm_report(
    problem: &Problem,
    solution: &FbsdepSolution,
    noise: &NoiseBundle,
    p: f64,
) -> NormReport {
    assert!(p >= 1.0, "the norm order must be at least 1, got {p}");
    let grid = noise.grid();
    let ms = noise.markspace();
    let n_paths = noise.n_paths();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let half_p = 0.5 * p;

    let mut x_sup = KahanSum::new();
    let mut y_sup = KahanSum::new();
    let mut z_l2 = KahanSum::new();
    let mut zt_jump = KahanSum::new();
    let mut b0 = KahanSum::new();
    let mut sigma0 = KahanSum::new();
    let mut f0 = KahanSum::new();
    let mut g0 = KahanSum::new();
    let coeffs = &problem.coefficients;
    for path in 0..n_paths {
        let mut xs = 0.0f64;
        let mut ys = 0.0f64;
        for knot in 0..=n_steps {
            xs = xs.max(solution.x.get(path, knot).abs());
            ys = ys.max(solution.y.get(path, knot).abs());
        }
        x_sup.add(xs.powf(p));
        y_sup.add(ys.powf(p));

        let mut z_acc = 0.0f64;
        let mut zt_acc = 0.0f64;
        let mut b_acc = 0.0f64;
        let mut s_acc = 0.0f64;
        let mut f_acc = 0.0f64;
        let mut g_acc = 0.0f64;
        for step in 0..n_steps {
            z_acc += dt * ms.l2_norm_sq(solution.z.at(path, step));
            for mark in 0..ms.len() {
                let tally = noise.dn(path, step, mark);
                if tally > 0.0 {
                    let v = solution.zt.get(path, step, mark);
                    zt_acc += tally * v * v;
                }
            }
            let at_origin = |coeff: &dyn Fn(&CoeffPoint) -> f64, weight_fn: &dyn Fn(f64) -> f64| {
                ms.integrate_fn(|_, e| {
                    weight_fn(coeff(&CoeffPoint {
                        t: grid.knot(step),
                        u: solution.control.get(path, step),
                        e,
                        ..CoeffPoint::default()
                    }))
                })
            };
            b_acc += dt * at_origin(&|pt| coeffs.b.value(pt), &|v| v.abs());
            let sigma_bar = at_origin(&|pt| coeffs.sigma.value(pt), &|v| v);
            s_acc += dt * sigma_bar * sigma_bar;
            f_acc += dt * at_origin(&|pt| coeffs.f.value(pt), &|v| v * v);
            g_acc += dt * at_origin(&|pt| coeffs.g.value(pt), &|v| v.abs());
        }
        z_l2.add(z_acc.powf(half_p));
        zt_jump.add(zt_acc.powf(half_p));
        b0.add(b_acc.powf(p));
        sigma0.add(s_acc.powf(half_p));
        f0.add(f_acc.powf(half_p));
        g0.add(g_acc.powf(p));
    }

    let inv_n = 1.0 / n_paths as f64;
    let root = |acc: KahanSum| (acc.value() * inv_n).powf(1.0 / p);
    let x_sup = root(x_sup);
    let y_sup = root(y_sup);
    let z_l2 = root(z_l2);
    let zt_jump = root(zt_jump);
    let solution_norm =
        (x_sup.powf(p) + y_sup.powf(p) + z_l2.powf(p) + zt_jump.powf(p)).powf(1.0 / p);
    let x0 = problem.x0.abs();
    let phi0 = coeffs.phi.value(0.0).abs();
    let b0 = root(b0);
    let sigma0 = root(sigma0);
    let f0 = root(f0);
    let g0 = root(g0);
    let data = (x0.powf(p)
        + phi0.powf(p)
        + b0.powf(p)
        + sigma0.powf(p)
        + f0.powf(p)
        + g0.powf(p))
    .powf(1.0 / p);
    let ratio = if data > 0.0 {
        solution_norm / data
    } else if solution_norm > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };

    NormReport {
        p,
        x_sup,
        y_sup,
        z_l2,
        zt_jump,
        solution: solution_norm,
        x0,
        phi0,
        b0,
        sigma0,
        f0,
        g0,
        data,
        ratio,
    }
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Write a solution as CSV with columns
/// `path,step,t,X,Y,Zbar,Ztilde_0,...,Ztilde_{m-1}`.
///
/// One row per knot; `Zbar` is the intensity integral of the stored Brownian
/// profile.  The loadings are undefined on the terminal knot and left empty
/// there.  Values use the shortest round-trip decimal formatting, so repeated
/// exports of the same solution are byte-identical.
pub fn write_solution_csv<W: Write>(
    solution: &FbsdepSolution,
    noise: &NoiseBundle,
    mut out: W,
    max_paths: Option<usize>,
) -> Result<()> {
    let grid = noise.grid();
    let ms = noise.markspace();
    let n_steps = grid.n_steps();
    let n_paths = max_paths
        .unwrap_or(usize::MAX)
        .min(solution.x.n_paths());

    write!(out, "path,step,t,X,Y,Zbar")?;
    for mark in 0..ms.len() {
        write!(out, ",Ztilde_{mark}")?;
    }
    writeln!(out)?;
    for path in 0..n_paths {
        for knot in 0..=n_steps {
            write!(
                out,
                "{path},{knot},{},{},{}",
                grid.knot(knot),
                solution.x.get(path, knot),
                solution.y.get(path, knot)
            )?;
            if knot < n_steps {
                write!(out, ",{}", ms.integrate(solution.z.at(path, knot)))?;
                for mark in 0..ms.len() {
                    write!(out, ",{}", solution.zt.get(path, knot, mark))?;
                }
            } else {
                for _ in 0..=ms.len() {
                    write!(out, ",")?;
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
