//! Cross-checks the two routes to the second-order cost term of a needle
//! perturbation.
//!
//! Route one simulates the coupled pair `(X², Y²)` of second state and value
//! variations directly.  Route two solves the reduced scalar equation for
//! `Y*`, whose only source packs the Hamiltonian increment and the curvature
//! term `½P(δσ)²` onto the spike window.  At time zero both must agree:
//! `E Y²₀ = E Y*₀`.
//!
//! On this benchmark the diffusion ignores the control, so the first
//! variation `X¹` vanishes identically and the entire effect flows through
//! the window source — which makes the agreement sharp (machine precision
//! rather than regression noise).

use fbsdep::adjoint::{solve_first_order, solve_second_order, AdjointConfig};
use fbsdep::fbsolve::{picard_solve, time_control};
use fbsdep::maxprinciple::{
    build_spike_control, first_variation_simulate, second_variation_simulate, y_star_solve,
    SpikeConfig,
};
use fbsdep::model::builtin_problem;
use fbsdep::noise::generate_noise;
use fbsdep::{RegressionConfig, Result, TimeGrid};

fn main() -> Result<()> {
    let problem = builtin_problem("lq_jump")?;
    let grid = TimeGrid::new(problem.horizon, 80)?;
    let noise = generate_noise(&grid, &problem.markspace, 4_096, 61)?;

    // A deliberately suboptimal reference so the spike window carries weight.
    let feedback = problem.oracle_control()?;
    let x0 = problem.x0;
    let control = time_control(&noise, |t| feedback(t, x0) + 1.0);
    let cfg = RegressionConfig::default();
    let base = picard_solve(&problem, &control, &noise, &cfg, 1e-9, 25)?;
    let adjoint_cfg = AdjointConfig::default();
    let fo = solve_first_order(&problem, &base, &noise, &adjoint_cfg)?;
    fo.audit.ensure_regular()?;
    let so = solve_second_order(&problem, &base, &fo, &noise, &adjoint_cfg)?;
    so.audit.ensure_regular()?;

    // Spike back to the optimal feedback value on [t̄, t̄ + ε).
    let t_bar = 0.25;
    let spike = build_spike_control(
        &control,
        &SpikeConfig::at(t_bar, 0.2, feedback(t_bar, x0)),
        None,
        &noise,
    )?;

    let first = first_variation_simulate(&problem, &base, &fo, &spike, &noise)?;
    println!(
        "first variation sup |X1| = {:.1e} (control-free diffusion leaves X1 at zero)",
        first.x1.max_abs()
    );

    let second = second_variation_simulate(
        &problem, &base, &fo, &first, &spike, &noise, &cfg, 1e-10, 20,
    )?;
    let star = y_star_solve(&problem, &base, &fo, &so, &first, &spike, &noise, &cfg, 1e-8)?;

    println!(
        "coupled second variation  E Y2(0) = {:.6} +/- {:.1e}",
        second.zero, second.zero_se
    );
    println!(
        "reduced scalar equation   E Y*(0) = {:.6} +/- {:.1e}",
        star.zero, star.zero_se
    );
    let diff = (second.zero - star.zero).abs();
    let tol = (3.0 * (second.zero_se.powi(2) + star.zero_se.powi(2)).sqrt())
        .max(5e-3 * star.zero.abs());
    println!(
        "difference {:.3e} (paired tolerance {:.3e}) -> {}",
        diff,
        tol,
        if diff <= tol { "match" } else { "MISMATCH" }
    );
    Ok(())
}
