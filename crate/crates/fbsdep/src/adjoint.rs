//! First- and second-order adjoint processes along a solved trajectory.
//!
//! The first-order adjoint `p` prices marginal state perturbations: it solves
//! a linear backward equation whose driver contracts the Hamiltonian
//! gradients against the sensitivity vector `(1, p, K1, K2)`, where the gain
//! processes `K1` (diffusion channel) and `K2` (jump channel) resolve the
//! algebraic feedback created by coefficients that read the backward solution.
//! The second-order adjoint `P` prices squared perturbations; its driver
//! contracts coefficient Hessians against the same sensitivity vector and
//! carries its own gain pair.
//!
//! Both gain algebras divide by `1 - σ_z·p` (diffusion channel) and
//! `1 - f_z~·(p + q~)` (jump channel).  Near-zero denominators are floored at
//! a configurable threshold so the sweep can finish, and every floored
//! evaluation is recorded as a guard event; callers decide whether to treat a
//! non-empty guard log as fatal.  A separate audit compares the largest gain
//! magnitude against a boundedness threshold.
//!
//! Estimation reuses the regression backward sweep: `q`/`Q` are recovered
//! from centred Brownian-increment regressions, `q~`/`Q~` from centred
//! compensated jump regressions, and the value updates are implicit with the
//! gains recomputed inside each inner iteration.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbsolve::sweeps::{backward_sweep, BackwardSystem};
use crate::fbsolve::{FbsdepSolution, RegressionConfig, StateBasis};
use crate::grid::{MarkGrid, ScalarGrid};
use crate::model::{CoeffPoint, Grad4, Hess4, Problem};
use crate::noise::NoiseBundle;

/// Guard name of the diffusion-channel denominator `1 - σ_z·p`.
pub const DIFFUSION_GAIN_GUARD: &str = "diffusion_gain_denominator";
/// Guard name of the jump-channel denominator `1 - f_z~·(p + q~)`.
pub const JUMP_GAIN_GUARD: &str = "jump_gain_denominator";

/// Cap on the number of guard events retained in memory (the total count is
/// tracked separately).
const GUARD_EVENT_CAP: usize = 10_000;

/// Tuning of the adjoint solves.
#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjointConfig {
    /// Floor applied to the gain denominators; smaller magnitudes are
    /// recorded as guard events.
    pub eps_denominator: f64,
    /// Boundedness threshold of the gain audit.
    pub gain_bound: f64,
    /// Regression settings of the backward sweeps.
    pub regression: RegressionConfig,
}

impl Default for AdjointConfig {
    fn default() -> Self {
        Self {
            eps_denominator: 1e-8,
            gain_bound: 1e6,
            regression: RegressionConfig::default(),
        }
    }
}

/// One floored denominator evaluation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GuardEvent {
    pub t: f64,
    pub path: usize,
    pub step: usize,
    pub mark: usize,
    pub guard: &'static str,
    /// The denominator value that fell under the floor.
    pub value: f64,
}

/// Summary of the denominator guards and the gain-boundedness audit of one
/// adjoint solve.
#[derive(Debug, Clone, Serialize)]
pub struct GainAudit {
    /// Recorded guard events (capped; see `event_count` for the total),
    /// sorted by `(path, step, mark, guard)`.
    pub events: Vec<GuardEvent>,
    /// Total number of guard breaches, including unrecorded ones.
    pub event_count: usize,
    /// The denominator floor in force during the solve.
    pub eps_denominator: f64,
    /// Largest gain magnitude encountered.
    pub max_gain: f64,
    /// The boundedness threshold the gains were audited against.
    pub gain_bound: f64,
    /// Whether `max_gain <= gain_bound`.
    pub within_bound: bool,
}

impl GainAudit {
    /// Error out on the first recorded guard breach, if any.
    pub fn ensure_regular(&self) -> Result<()> {
        match self.events.first() {
            None => Ok(()),
            Some(event) => Err(Error::AdjointSingularity {
                guard: event.guard,
                value: event.value,
                threshold: self.eps_denominator,
                t: event.t,
                path: event.path,
                mark: event.mark,
            }),
        }
    }
}

/// First-order adjoint solution.  `p` lives on knots; the loadings and gains
/// live on steps, one value per mark.
pub struct FirstOrderAdjoint {
    pub p: ScalarGrid,
    /// Brownian loading of `p` (constant-in-mark profile; its intensity
    /// integral is the scalar loading).
    pub q: MarkGrid,
    /// Jump loading of `p`, mark-resolved.
    pub qt: MarkGrid,
    /// Diffusion-channel gain `K1`.
    pub k1: MarkGrid,
    /// Jump-channel gain `K2`.
    pub k2: MarkGrid,
    pub audit: GainAudit,
}

/// Second-order adjoint solution, same layout as the first order.
pub struct SecondOrderAdjoint {
    pub p: ScalarGrid,
    pub q: MarkGrid,
    pub qt: MarkGrid,
    /// Diffusion-channel gain of the second order.
    pub k1t: MarkGrid,
    /// Jump-channel gain of the second order.
    pub k2t: MarkGrid,
    pub audit: GainAudit,
}

// ---------------------------------------------------------------------------
// Gain algebra
// ---------------------------------------------------------------------------

/// Gain pair of one adjoint order at one `(state, mark)` point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gains {
    /// Diffusion-channel gain (`K1` for the first order, its second-order
    /// analogue otherwise).
    pub k1: f64,
    /// Jump-channel gain (`K2` respectively).
    pub k2: f64,
}

#[inline]
pub(crate) fn dot4(a: &Grad4, b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

#[inline]
pub(crate) fn quad4(h: &Hess4, v: &[f64; 4]) -> f64 {
    let mut acc = 0.0;
    for (row, &vi) in h.iter().zip(v) {
        acc += vi * dot4(row, v);
    }
    acc
}

#[inline]
pub(crate) fn guarded(den: f64, eps: f64, guard: &'static str, on_guard: &mut impl FnMut(&'static str, f64)) -> f64 {
    if den.abs() >= eps {
        den
    } else {
        on_guard(guard, den);
        if den < 0.0 {
            -eps
        } else {
            eps
        }
    }
}

/// First-order gain algebra at one point.
///
/// Solves the jump channel first (it has no diffusion feedback), then the
/// diffusion channel:
///
/// ```text
/// K2·(1 - f_z~·m) = f_x·m + f_y·p·m + q~            with m = p + q~
/// K1·(1 - σ_z·p)  = σ_x·p + σ_y·p² + σ_z~·p·K2 + q
/// ```
///
/// `q` is the scalar Brownian loading of `p`; `q~` is the jump loading at the
/// mark under consideration.  Near-singular denominators are floored at `eps`
/// and reported through `on_guard`.
pub fn first_order_gains(
    p: f64,
    q: f64,
    qt: f64,
    dsigma: &Grad4,
    df: &Grad4,
    eps: f64,
    mut on_guard: impl FnMut(&'static str, f64),
) -> Gains {
    let m = p + qt;
    let den_jump = guarded(1.0 - df[3] * m, eps, JUMP_GAIN_GUARD, &mut on_guard);
    let k2 = (df[0] * m + df[1] * p * m + qt) / den_jump;
    let den_diff = guarded(1.0 - dsigma[2] * p, eps, DIFFUSION_GAIN_GUARD, &mut on_guard);
    let k1 = (dsigma[0] * p + dsigma[1] * p * p + dsigma[3] * p * k2 + q) / den_diff;
    Gains { k1, k2 }
}

/// Second-order gain algebra at one point.
///
/// With the sensitivity vectors `Ξ1 = (1, p, K1, K2)` and `Ξ2 = (1, p, 0, K2)`
/// (the jump integrand cannot read `z`), the jump-channel amplitude
/// `c = Df·Ξ2`, `m = p + q~`, and `n = P + Q~`:
///
/// ```text
/// K2'·(1 - f_z~·m) = f_y·m·P + m·Ξ2 D²f Ξ2ᵀ + n·(2c + c²) + Q~
/// K1'·(1 - σ_z·p)  = σ_y·p·P + 2·(Dσ·Ξ1)·P + Q + p·Ξ1 D²σ Ξ1ᵀ + σ_z~·p·K2'
/// ```
#[allow(clippy::too_many_arguments)]
pub fn second_order_gains(
    p: f64,
    qt: f64,
    k1: f64,
    k2: f64,
    big_p: f64,
    big_q: f64,
    big_qt: f64,
    dsigma: &Grad4,
    d2sigma: &Hess4,
    df: &Grad4,
    d2f: &Hess4,
    eps: f64,
    mut on_guard: impl FnMut(&'static str, f64),
) -> Gains {
    let xi1 = [1.0, p, k1, k2];
    let xi2 = [1.0, p, 0.0, k2];
    let m = p + qt;
    let n = big_p + big_qt;
    let c = dot4(df, &xi2);
    let den_jump = guarded(1.0 - df[3] * m, eps, JUMP_GAIN_GUARD, &mut on_guard);
    let k2t = (df[1] * m * big_p + m * quad4(d2f, &xi2) + n * (2.0 * c + c * c) + big_qt)
        / den_jump;
    let den_diff = guarded(1.0 - dsigma[2] * p, eps, DIFFUSION_GAIN_GUARD, &mut on_guard);
    let a = dot4(dsigma, &xi1);
    let k1t = (dsigma[1] * p * big_p
        + 2.0 * a * big_p
        + big_q
        + p * quad4(d2sigma, &xi1)
        + dsigma[3] * p * k2t)
        / den_diff;
    Gains { k1: k1t, k2: k2t }
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

/// Assemble the per-mark coefficient evaluation point of a solved trajectory.
#[inline]
pub(crate) fn trajectory_point(
    solution: &FbsdepSolution,
    noise: &NoiseBundle,
    path: usize,
    step: usize,
    mark: usize,
) -> CoeffPoint {
    CoeffPoint {
        t: noise.grid().knot(step),
        x: solution.x.get(path, step),
        y: solution.y.get(path, step),
        z: solution.z.get(path, step, mark),
        zt: solution.zt.get(path, step, mark),
        u: solution.control.get(path, step),
        e: noise.markspace().mark(mark),
    }
}

pub(crate) fn require_converged(solution: &FbsdepSolution) -> Result<()> {
    if solution.report.converged {
        Ok(())
    } else {
        Err(Error::UnconvergedSolution)
    }
}

/// Solve the first-order adjoint equation along a converged solution.
///
/// The terminal condition is the pathwise terminal-cost slope at the solved
/// state.  Guard breaches do not abort the sweep; they are collected in the
/// returned audit (call [`GainAudit::ensure_regular`] to escalate them).
pub fn solve_first_order(
    problem: &Problem,
    solution: &FbsdepSolution,
    noise: &NoiseBundle,
    cfg: &AdjointConfig,
) -> Result<FirstOrderAdjoint> {
    require_converged(solution)?;
    let grid = noise.grid();
    let ms = noise.markspace();
    let n_paths = noise.n_paths();
    let n_steps = grid.n_steps();
    let n_marks = ms.len();
    let coeffs = &problem.coefficients;
    let eps = cfg.eps_denominator;

    let terminal: Vec<f64> = (0..n_paths)
        .map(|path| coeffs.phi.dx(solution.x.get(path, n_steps)))
        .collect();
    let state_basis = StateBasis::new(
        &solution.x,
        n_steps,
        cfg.regression.degree,
        cfg.regression.clip_tail,
    );
    let basis = |path: usize, step: usize, row: &mut [f64]| state_basis.fill(path, step, row);

    // Driver: intensity integral of
    //   H_x + H_y·p + H_z·K1 + H_z~·K2
    // with H = g + p·b + q·σ + q~·f and the gains recomputed from the
    // current implicit iterate of p.
    let driver = |path: usize, step: usize, p_val: f64, q_row: &[f64], qt_row: &[f64]| {
        let q_total = ms.integrate(q_row);
        ms.integrate_fn(|mark, _e| {
            let pt = trajectory_point(solution, noise, path, step, mark);
            let db = coeffs.b.gradient(&pt);
            let ds = coeffs.sigma.gradient(&pt);
            let dfj = coeffs.f.gradient(&pt);
            let dg = coeffs.g.gradient(&pt);
            let qt_j = qt_row[mark];
            let gains = first_order_gains(p_val, q_total, qt_j, &ds, &dfj, eps, |_, _| {});
            let h_x = dg[0] + p_val * db[0] + q_total * ds[0] + qt_j * dfj[0];
            let h_y = dg[1] + p_val * db[1] + q_total * ds[1] + qt_j * dfj[1];
            // The jump integrand cannot read z, so its z-slot is absent here.
            let h_z = dg[2] + p_val * db[2] + q_total * ds[2];
            let h_zt = dg[3] + p_val * db[3] + q_total * ds[3] + qt_j * dfj[3];
            h_x + h_y * p_val + h_z * gains.k1 + h_zt * gains.k2
        })
    };

    let system = BackwardSystem {
        n_basis: state_basis.n_cols(),
        basis: &basis,
        driver: &driver,
        terminal: &terminal,
    };
    let (p, q, qt) = backward_sweep(noise, &system, &cfg.regression)?;

    // Deterministic post-pass: materialise the gain grids from the solved
    // triple and record guard events per path, then merge in path order.
    let mut k1 = MarkGrid::zeros(n_paths, n_steps, n_marks);
    let mut k2 = MarkGrid::zeros(n_paths, n_steps, n_marks);
    let path_len = n_steps * n_marks;
    let events_per_path: Vec<Vec<GuardEvent>> = k1
        .as_mut_slice()
        .par_chunks_mut(path_len)
        .zip(k2.as_mut_slice().par_chunks_mut(path_len))
        .enumerate()
        .map(|(path, (k1_row, k2_row))| {
            let mut events = Vec::new();
            for step in 0..n_steps {
                let p_val = p.get(path, step);
                let q_total = ms.integrate(q.at(path, step));
                for mark in 0..n_marks {
                    let pt = trajectory_point(solution, noise, path, step, mark);
                    let ds = coeffs.sigma.gradient(&pt);
                    let dfj = coeffs.f.gradient(&pt);
                    let gains = first_order_gains(
                        p_val,
                        q_total,
                        qt.get(path, step, mark),
                        &ds,
                        &dfj,
                        eps,
                        |guard, value| {
                            events.push(GuardEvent {
                                t: grid.knot(step),
                                path,
                                step,
                                mark,
                                guard,
                                value,
                            });
                        },
                    );
                    k1_row[step * n_marks + mark] = gains.k1;
                    k2_row[step * n_marks + mark] = gains.k2;
                }
            }
            events
        })
        .collect();

    let audit = build_audit(events_per_path, &[&k1, &k2], cfg);
    Ok(FirstOrderAdjoint {
        p,
        q,
        qt,
        k1,
        k2,
        audit,
    })
}

/// Solve the second-order adjoint equation along a converged solution, given
/// its first-order adjoint.
pub fn solve_second_order(
    problem: &Problem,
    solution: &FbsdepSolution,
    first: &FirstOrderAdjoint,
    noise: &NoiseBundle,
    cfg: &AdjointConfig,
) -> Result<SecondOrderAdjoint> {
    require_converged(solution)?;
    let grid = noise.grid();
    let ms = noise.markspace();
    let n_paths = noise.n_paths();
    let n_steps = grid.n_steps();
    let n_marks = ms.len();
    let coeffs = &problem.coefficients;
    let eps = cfg.eps_denominator;

    let terminal: Vec<f64> = (0..n_paths)
        .map(|path| coeffs.phi.dxx(solution.x.get(path, n_steps)))
        .collect();
    let state_basis = StateBasis::new(
        &solution.x,
        n_steps,
        cfg.regression.degree,
        cfg.regression.clip_tail,
    );
    let basis = |path: usize, step: usize, row: &mut [f64]| state_basis.fill(path, step, row);

    // Driver of the curvature process P.  Writing a(e) = Dσ·Ξ1 and
    // c(e) = Df·Ξ2 per mark, ā = ∫a dν, μ = ∫Db·Ξ1 dν, and Q = ∫Q(e) dν:
    //
    //   P·(2μ + ā² + ∫(2c + c²)dν) + 2·Q·ā + ∫Q~·(2c + c²)dν
    //   + ∫[ Ξ1 D²g Ξ1ᵀ + p·Ξ1 D²b Ξ1ᵀ + q~·Ξ2 D²f Ξ2ᵀ
    //        + (g_y + p·b_y + q~·f_y)·P
    //        + (g_z + p·b_z)·K1' + (g_z~ + p·b_z~ + q~·f_z~)·K2' ]dν
    //   + q·∫[ σ_y·P + σ_z·K1' + σ_z~·K2' + Ξ1 D²σ Ξ1ᵀ ]dν
    //
    // where (K1', K2') are the second-order gains at the current implicit
    // iterate of P.
    let driver = |path: usize, step: usize, p2_val: f64, q2_row: &[f64], qt2_row: &[f64]| {
        let p1 = first.p.get(path, step);
        let q_total = ms.integrate(first.q.at(path, step));
        let q2_total = ms.integrate(q2_row);

        let mut mu = 0.0f64;
        let mut a_bar = 0.0f64;
        let mut jump_quad = 0.0f64;
        let mut qt_jump = 0.0f64;
        let mut rest = 0.0f64;
        let mut sigma_rest = 0.0f64;
        for (mark, &qt2_j) in qt2_row.iter().enumerate() {
            let w = ms.weight(mark);
            let pt = trajectory_point(solution, noise, path, step, mark);
            let db = coeffs.b.gradient(&pt);
            let ds = coeffs.sigma.gradient(&pt);
            let dfj = coeffs.f.gradient(&pt);
            let dg = coeffs.g.gradient(&pt);
            let d2b = coeffs.b.hessian(&pt);
            let d2s = coeffs.sigma.hessian(&pt);
            let d2f = coeffs.f.hessian(&pt);
            let d2g = coeffs.g.hessian(&pt);
            let k1_j = first.k1.get(path, step, mark);
            let k2_j = first.k2.get(path, step, mark);
            let qt_j = first.qt.get(path, step, mark);
            let xi1 = [1.0, p1, k1_j, k2_j];
            let xi2 = [1.0, p1, 0.0, k2_j];
            let c = dot4(&dfj, &xi2);
            let gains = second_order_gains(
                p1,
                qt_j,
                k1_j,
                k2_j,
                p2_val,
                q2_total,
                qt2_j,
                &ds,
                &d2s,
                &dfj,
                &d2f,
                eps,
                |_, _| {},
            );
            mu += w * dot4(&db, &xi1);
            a_bar += w * dot4(&ds, &xi1);
            let jump_factor = 2.0 * c + c * c;
            jump_quad += w * jump_factor;
            qt_jump += w * qt2_j * jump_factor;
            rest += w
                * (quad4(&d2g, &xi1)
                    + p1 * quad4(&d2b, &xi1)
                    + qt_j * quad4(&d2f, &xi2)
                    + (dg[1] + p1 * db[1] + qt_j * dfj[1]) * p2_val
                    + (dg[2] + p1 * db[2]) * gains.k1
                    + (dg[3] + p1 * db[3] + qt_j * dfj[3]) * gains.k2);
            sigma_rest +=
                w * (ds[1] * p2_val + ds[2] * gains.k1 + ds[3] * gains.k2 + quad4(&d2s, &xi1));
        }
        p2_val * (2.0 * mu + a_bar * a_bar + jump_quad)
            + 2.0 * q2_total * a_bar
            + qt_jump
            + rest
            + q_total * sigma_rest
    };

    let system = BackwardSystem {
        n_basis: state_basis.n_cols(),
        basis: &basis,
        driver: &driver,
        terminal: &terminal,
    };
    let (p2, q2, qt2) = backward_sweep(noise, &system, &cfg.regression)?;

    let mut k1t = MarkGrid::zeros(n_paths, n_steps, n_marks);
    let mut k2t = MarkGrid::zeros(n_paths, n_steps, n_marks);
    let path_len = n_steps * n_marks;
    let events_per_path: Vec<Vec<GuardEvent>> = k1t
        .as_mut_slice()
        .par_chunks_mut(path_len)
        .zip(k2t.as_mut_slice().par_chunks_mut(path_len))
        .enumerate()
        .map(|(path, (k1_row, k2_row))| {
            let mut events = Vec::new();
            for step in 0..n_steps {
                let p1 = first.p.get(path, step);
                let p2_val = p2.get(path, step);
                let q2_total = ms.integrate(q2.at(path, step));
                for mark in 0..n_marks {
                    let pt = trajectory_point(solution, noise, path, step, mark);
                    let ds = coeffs.sigma.gradient(&pt);
                    let dfj = coeffs.f.gradient(&pt);
                    let d2s = coeffs.sigma.hessian(&pt);
                    let d2f = coeffs.f.hessian(&pt);
                    let gains = second_order_gains(
                        p1,
                        first.qt.get(path, step, mark),
                        first.k1.get(path, step, mark),
                        first.k2.get(path, step, mark),
                        p2_val,
                        q2_total,
                        qt2.get(path, step, mark),
                        &ds,
                        &d2s,
                        &dfj,
                        &d2f,
                        eps,
                        |guard, value| {
                            events.push(GuardEvent {
                                t: grid.knot(step),
                                path,
                                step,
                                mark,
                                guard,
                                value,
                            });
                        },
                    );
                    k1_row[step * n_marks + mark] = gains.k1;
                    k2_row[step * n_marks + mark] = gains.k2;
                }
            }
            events
        })
        .collect();

    let audit = build_audit(events_per_path, &[&k1t, &k2t], cfg);
    Ok(SecondOrderAdjoint {
        p: p2,
        q: q2,
        qt: qt2,
        k1t,
        k2t,
        audit,
    })
}

fn build_audit(
    events_per_path: Vec<Vec<GuardEvent>>,
    gain_grids: &[&MarkGrid],
    cfg: &AdjointConfig,
) -> GainAudit {
    let event_count = events_per_path.iter().map(Vec::len).sum();
    let events: Vec<GuardEvent> = events_per_path
        .into_iter()
        .flatten()
        .take(GUARD_EVENT_CAP)
        .collect();
    let max_gain = gain_grids
        .iter()
        .map(|g| g.max_abs())
        .fold(0.0f64, f64::max);
    GainAudit {
        events,
        event_count,
        eps_denominator: cfg.eps_denominator,
        max_gain,
        gain_bound: cfg.gain_bound,
        within_bound: max_gain <= cfg.gain_bound,
    }
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Write both adjoint orders as CSV with columns
/// `path,step,t,p,P,q_0,..,qt_0,..,K1_0,..,K2_0,..`.
///
/// One row per knot; the loadings and gains are undefined on the terminal
/// knot and left empty there.
pub fn write_adjoint_csv<W: Write>(
    first: &FirstOrderAdjoint,
    second: &SecondOrderAdjoint,
    noise: &NoiseBundle,
    mut out: W,
    max_paths: Option<usize>,
) -> Result<()> {
    let grid = noise.grid();
    let n_marks = noise.markspace().len();
    let n_steps = grid.n_steps();
    let n_paths = max_paths.unwrap_or(usize::MAX).min(first.p.n_paths());

    write!(out, "path,step,t,p,P")?;
    for label in ["q", "qt", "K1", "K2"] {
        for mark in 0..n_marks {
            write!(out, ",{label}_{mark}")?;
        }
    }
    writeln!(out)?;
    for path in 0..n_paths {
        for knot in 0..=n_steps {
            write!(
                out,
                "{path},{knot},{},{},{}",
                grid.knot(knot),
                first.p.get(path, knot),
                second.p.get(path, knot)
            )?;
            if knot < n_steps {
                for grid_ref in [&first.q, &first.qt, &first.k1, &first.k2] {
                    for mark in 0..n_marks {
                        write!(out, ",{}", grid_ref.get(path, knot, mark))?;
                    }
                }
            } else {
                for _ in 0..4 * n_marks {
                    write!(out, ",")?;
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Write a guard-event log as CSV with columns `t,path,mark,guard_name,value`.
pub fn write_guard_log<W: Write>(events: &[GuardEvent], mut out: W) -> Result<()> {
    writeln!(out, "t,path,mark,guard_name,value")?;
    for event in events {
        writeln!(
            out,
            "{},{},{},{},{}",
            event.t, event.path, event.mark, event.guard, event.value
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::fbsolve::{constant_control, picard_solve, time_control};
    use crate::markspace::MarkSpace;
    use crate::model::builtin_problem;
    use crate::model::{
        AffineCoeff, Coefficients, ControlSet, LinearTerminal, LipschitzBudget,
        QuadraticTerminal,
    };
    use crate::noise::{aux_uniform, generate_noise, TimeGrid};

    fn noise_for(problem: &Problem, n_paths: usize, n_steps: usize, seed: u64) -> NoiseBundle {
        let grid = TimeGrid::new(problem.horizon, n_steps).expect("grid must build");
        generate_noise(&grid, &problem.markspace, n_paths, seed).expect("noise must generate")
    }

    fn solved(problem: &Problem, noise: &NoiseBundle, control: &ScalarGrid) -> FbsdepSolution {
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

    #[test]
    fn gains_satisfy_their_implicit_relations() {
        let eps = 1e-8;
        let mut worst = 0.0f64;
        for i in 0..10_000u64 {
            let draw = |k: u64| 2.0 * aux_uniform(7, i, k) - 1.0;
            let p = 2.0 * draw(0);
            let q = draw(1);
            let qt = draw(2);
            let dsigma = [draw(3), draw(4), 0.4 * draw(5), draw(6)];
            let df = [draw(7), draw(8), 0.0, 0.4 * draw(9)];
            let gains = first_order_gains(p, q, qt, &dsigma, &df, eps, |guard, value| {
                panic!("benign draws must not breach guards: {guard} at {value}")
            });
            let m = p + qt;
            let jump_residual =
                gains.k2 - (df[0] * m + df[1] * p * m + df[3] * m * gains.k2 + qt);
            let diff_residual = gains.k1
                - (dsigma[0] * p
                    + dsigma[1] * p * p
                    + dsigma[2] * p * gains.k1
                    + dsigma[3] * p * gains.k2
                    + q);
            worst = worst
                .max(jump_residual.abs() / (1.0 + gains.k2.abs()))
                .max(diff_residual.abs() / (1.0 + gains.k1.abs()));
        }
        assert!(
            worst < 1e-12,
            "gain pairs must satisfy their defining fixed-point relations, worst residual {worst:.3e}"
        );
    }

    #[test]
    fn second_order_gains_satisfy_their_implicit_relations() {
        let eps = 1e-8;
        let mut worst = 0.0f64;
        for i in 0..10_000u64 {
            let draw = |k: u64| 2.0 * aux_uniform(11, i, k) - 1.0;
            let p = draw(0);
            let qt = draw(1);
            let k1 = draw(2);
            let k2 = draw(3);
            let big_p = draw(4);
            let big_q = draw(5);
            let big_qt = draw(6);
            let dsigma = [draw(7), draw(8), 0.4 * draw(9), draw(10)];
            let df = [draw(11), draw(12), 0.0, 0.4 * draw(13)];
            let sym = |a: f64, b: f64, c: f64, d: f64| {
                [
                    [a, b, 0.0, c],
                    [b, d, 0.0, a],
                    [0.0, 0.0, 0.0, 0.0],
                    [c, a, 0.0, b],
                ]
            };
            let d2sigma = sym(draw(14), draw(15), draw(16), draw(17));
            let d2f = sym(draw(18), draw(19), draw(20), draw(21));
            let gains = second_order_gains(
                p, qt, k1, k2, big_p, big_q, big_qt, &dsigma, &d2sigma, &df, &d2f, eps,
                |guard, value| panic!("benign draws must not breach guards: {guard} at {value}"),
            );
            let xi1 = [1.0, p, k1, k2];
            let xi2 = [1.0, p, 0.0, k2];
            let m = p + qt;
            let n = big_p + big_qt;
            let c = dot4(&df, &xi2);
            let jump_residual = gains.k2
                - (df[1] * m * big_p
                    + m * quad4(&d2f, &xi2)
                    + n * (2.0 * c + c * c)
                    + big_qt
                    + df[3] * m * gains.k2);
            let a = dot4(&dsigma, &xi1);
            let diff_residual = gains.k1
                - (dsigma[1] * p * big_p
                    + 2.0 * a * big_p
                    + big_q
                    + p * quad4(&d2sigma, &xi1)
                    + dsigma[3] * p * gains.k2
                    + dsigma[2] * p * gains.k1);
            worst = worst
                .max(jump_residual.abs() / (1.0 + gains.k2.abs()))
                .max(diff_residual.abs() / (1.0 + gains.k1.abs()));
        }
        assert!(
            worst < 1e-12,
            "second-order gains must satisfy their defining relations, worst residual {worst:.3e}"
        );
    }

    #[test]
    fn guard_fires_exactly_at_the_threshold() {
        let eps = 1e-8;
        // sigma_z·p = 1 exactly: the diffusion denominator vanishes.
        let mut fired = Vec::new();
        let gains = first_order_gains(
            0.5,
            0.0,
            0.0,
            &[0.0, 0.0, 2.0, 0.0],
            &[0.0; 4],
            eps,
            |guard, value| fired.push((guard, value)),
        );
        assert_eq!(
            fired,
            vec![(DIFFUSION_GAIN_GUARD, 0.0)],
            "a vanishing diffusion denominator must fire its guard"
        );
        assert!(
            gains.k1.is_finite() && gains.k2.is_finite(),
            "floored denominators must keep the gains finite"
        );
        // Just above the floor: no event.
        let mut fired = Vec::new();
        first_order_gains(
            0.5,
            0.0,
            0.0,
            &[0.0, 0.0, 2.0 * (1.0 - 1e-7), 0.0],
            &[0.0; 4],
            eps,
            |guard, value| fired.push((guard, value)),
        );
        assert!(
            fired.is_empty(),
            "denominators above the floor must not fire guards, got {fired:?}"
        );
    }

    #[test]
    fn linear_quadratic_adjoint_matches_the_closed_form() {
        for name in ["lq_jump", "lq_spike"] {
            let problem = builtin_problem(name).expect("builtin must exist");
            let oracle_u = problem.oracle_control().expect("oracle control");
            let noise = noise_for(&problem, 2000, 80, 101);
            let control = time_control(&noise, |t| oracle_u(t, 0.0));
            let solution = solved(&problem, &noise, &control);
            let adjoint = solve_first_order(&problem, &solution, &noise, &AdjointConfig::default())
                .expect("adjoint must solve");
            adjoint
                .audit
                .ensure_regular()
                .expect("the benchmark must not breach guards");

            let p_oracle = problem
                .oracle
                .as_ref()
                .and_then(|o| o.adjoint_p.clone())
                .expect("benchmark must carry the adjoint oracle");
            let mut worst = 0.0f64;
            for path in [0usize, 700, 1999] {
                for knot in 0..=80 {
                    let t = noise.grid().knot(knot);
                    worst = worst.max((adjoint.p.get(path, knot) - p_oracle(t)).abs());
                }
            }
            assert!(
                worst < 1e-9,
                "{name}: the adjoint must match the deterministic closed form, worst error {worst:.3e}"
            );
            assert!(
                adjoint.q.max_abs() < 1e-10 && adjoint.qt.max_abs() < 1e-10,
                "{name}: a deterministic adjoint has vanishing loadings, got |q| = {:.3e}, |q~| = {:.3e}",
                adjoint.q.max_abs(),
                adjoint.qt.max_abs()
            );
            assert!(
                adjoint.k1.max_abs() < 1e-10,
                "{name}: a state-free diffusion gives a vanishing diffusion gain, got {:.3e}",
                adjoint.k1.max_abs()
            );
            // The jump gain solves K2 = f_x·(p + q~) here; with q~ = 0 it is
            // f_x·p, which is zero only when the jump coefficient is zero.
            let fx = {
                let pt = trajectory_point(&solution, &noise, 0, 0, 0);
                problem.coefficients.f.gradient(&pt)[0]
            };
            let mut worst_k2 = 0.0f64;
            for path in [0usize, 700, 1999] {
                for step in 0..80 {
                    let expected = fx * adjoint.p.get(path, step);
                    for mark in 0..noise.markspace().len() {
                        worst_k2 =
                            worst_k2.max((adjoint.k2.get(path, step, mark) - expected).abs());
                    }
                }
            }
            assert!(
                worst_k2 < 1e-9,
                "{name}: the jump gain must equal the jump slope times the adjoint, worst error {worst_k2:.3e}"
            );
        }
    }

    #[test]
    fn second_order_adjoint_vanishes_on_the_linear_quadratic_family() {
        for name in ["lq_jump", "lq_spike"] {
            let problem = builtin_problem(name).expect("builtin must exist");
            let oracle_u = problem.oracle_control().expect("oracle control");
            let noise = noise_for(&problem, 1500, 60, 103);
            let control = time_control(&noise, |t| oracle_u(t, 0.0));
            let solution = solved(&problem, &noise, &control);
            let cfg = AdjointConfig::default();
            let first = solve_first_order(&problem, &solution, &noise, &cfg)
                .expect("first order must solve");
            let second = solve_second_order(&problem, &solution, &first, &noise, &cfg)
                .expect("second order must solve");
            assert!(
                second.p.max_abs() < 1e-10,
                "{name}: an affine terminal slope leaves no curvature, got {:.3e}",
                second.p.max_abs()
            );
            assert!(
                second.q.max_abs() < 1e-10
                    && second.qt.max_abs() < 1e-10
                    && second.k1t.max_abs() < 1e-10
                    && second.k2t.max_abs() < 1e-10,
                "{name}: the zero curvature process has vanishing loadings and gains"
            );
        }
    }

    #[test]
    fn pure_terminal_curvature_propagates_unchanged() {
        let zero = Arc::new(AffineCoeff::default());
        let problem = Problem {
            name: "curvature_only".to_string(),
            x0: 1.0,
            horizon: 1.0,
            markspace: MarkSpace::new(vec![1.0], vec![1.0]).expect("marks must build"),
            coefficients: Coefficients {
                b: zero.clone(),
                sigma: zero.clone(),
                f: zero.clone(),
                g: zero,
                phi: Arc::new(QuadraticTerminal {
                    quad: 1.0,
                    slope: 0.0,
                    offset: 0.0,
                }),
            },
            controls: ControlSet::Interval { min: 0.0, max: 0.0 },
            budget: LipschitzBudget::default(),
            oracle: None,
        };
        let noise = noise_for(&problem, 400, 40, 107);
        let control = constant_control(&noise, 0.0);
        let solution = solved(&problem, &noise, &control);
        let cfg = AdjointConfig::default();
        let first = solve_first_order(&problem, &solution, &noise, &cfg).expect("first order");
        let second =
            solve_second_order(&problem, &solution, &first, &noise, &cfg).expect("second order");
        for knot in 0..=40 {
            let value = second.p.get(0, knot);
            assert!(
                (value - 1.0).abs() < 1e-12,
                "with frozen dynamics the curvature must equal the terminal curvature at every knot, got {value} at knot {knot}"
            );
        }
        // The state is frozen at x0 = 1, so p = phi_x(1) = 1 as well.
        assert!(
            (first.p.get(0, 0) - 1.0).abs() < 1e-12,
            "the slope process must equal the terminal slope, got {}",
            first.p.get(0, 0)
        );
    }

    #[test]
    fn gain_audit_flags_bound_excess_without_failing() {
        let problem = builtin_problem("linear_forward").expect("builtin must exist");
        let noise = noise_for(&problem, 1200, 40, 109);
        let control = constant_control(&noise, 0.0);
        let solution = solved(&problem, &noise, &control);
        let tight = AdjointConfig {
            gain_bound: 1e-12,
            ..AdjointConfig::default()
        };
        let adjoint =
            solve_first_order(&problem, &solution, &noise, &tight).expect("adjoint must solve");
        assert!(
            adjoint.audit.max_gain > 1e-12,
            "a state-dependent diffusion must produce nonzero gains"
        );
        assert!(
            !adjoint.audit.within_bound,
            "an unreachable bound must flag the audit"
        );
        assert!(
            adjoint.audit.events.is_empty(),
            "a bound excess is not a denominator breach"
        );
        adjoint
            .audit
            .ensure_regular()
            .expect("a bound excess must not escalate to a singularity error");
    }

    #[test]
    fn singular_diffusion_feedback_is_reported_with_exit_class() {
        // sigma reads z with slope 2 and the terminal slope pins p at 0.5,
        // so the diffusion denominator 1 - sigma_z·p vanishes identically.
        let zero = Arc::new(AffineCoeff::default());
        let problem = Problem {
            name: "singular_gain".to_string(),
            x0: 1.0,
            horizon: 1.0,
            markspace: MarkSpace::new(vec![1.0], vec![1.0]).expect("marks must build"),
            coefficients: Coefficients {
                b: zero.clone(),
                sigma: Arc::new(AffineCoeff {
                    z: 2.0,
                    ..AffineCoeff::default()
                }),
                f: zero.clone(),
                g: zero,
                phi: Arc::new(LinearTerminal {
                    slope: 0.5,
                    offset: 0.0,
                }),
            },
            controls: ControlSet::Interval { min: 0.0, max: 0.0 },
            budget: LipschitzBudget {
                z: 2.0,
                ..LipschitzBudget::default()
            },
            oracle: None,
        };
        let noise = noise_for(&problem, 300, 20, 113);
        let control = constant_control(&noise, 0.0);
        let solution = solved(&problem, &noise, &control);
        let adjoint = solve_first_order(&problem, &solution, &noise, &AdjointConfig::default())
            .expect("the sweep must finish under floored denominators");
        assert!(
            adjoint.audit.event_count > 0,
            "a vanishing denominator must be recorded"
        );
        let event = adjoint.audit.events[0];
        assert_eq!(
            event.guard, DIFFUSION_GAIN_GUARD,
            "the diffusion guard must be the one firing"
        );
        let err = match adjoint.audit.ensure_regular() {
            Err(e) => e,
            Ok(()) => panic!("a recorded breach must escalate"),
        };
        assert_eq!(
            err.exit_code(),
            3,
            "singular adjoint algebra must map to the singularity exit class"
        );
    }

    #[test]
    fn adjoint_csv_has_the_documented_header() {
        let problem = builtin_problem("lq_jump").expect("builtin must exist");
        let oracle_u = problem.oracle_control().expect("oracle control");
        let noise = noise_for(&problem, 64, 10, 127);
        let control = time_control(&noise, |t| oracle_u(t, 0.0));
        let solution = solved(&problem, &noise, &control);
        let cfg = AdjointConfig::default();
        let first = solve_first_order(&problem, &solution, &noise, &cfg).expect("first order");
        let second =
            solve_second_order(&problem, &solution, &first, &noise, &cfg).expect("second order");
        let mut buffer = Vec::new();
        write_adjoint_csv(&first, &second, &noise, &mut buffer, Some(2)).expect("export");
        let text = String::from_utf8(buffer).expect("CSV must be UTF-8");
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("path,step,t,p,P,q_0,q_1,qt_0,qt_1,K1_0,K1_1,K2_0,K2_1"),
            "the adjoint CSV header must carry both orders and the per-mark gains"
        );
        assert_eq!(
            lines.count(),
            2 * 11,
            "two paths on a ten-step grid must produce 22 data rows"
        );

        let mut log = Vec::new();
        write_guard_log(&first.audit.events, &mut log).expect("log export");
        let text = String::from_utf8(log).expect("log must be UTF-8");
        assert_eq!(
            text.lines().next(),
            Some("t,path,mark,guard_name,value"),
            "the guard log header must be stable"
        );
    }
}
