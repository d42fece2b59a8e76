//! Solves the first-order adjoint equation on the linear-quadratic benchmark
//! and compares the regression estimate of `p` with its closed form.
//!
//! On `lq_jump` the adjoint trajectory is deterministic,
//! `p(t) = 0.5 + 0.5·(T - t)`, while the solver recovers it by backward
//! regression along the simulated ensemble; the two must agree at every knot
//! up to discretization and regression error.

use fbsdep::adjoint::{solve_first_order, AdjointConfig};
use fbsdep::fbsolve::{picard_solve, time_control};
use fbsdep::model::builtin_problem;
use fbsdep::noise::generate_noise;
use fbsdep::numeric::mean_se;
use fbsdep::{RegressionConfig, Result, TimeGrid};

fn main() -> Result<()> {
    let problem = builtin_problem("lq_jump")?;
    let n_steps = 100;
    let grid = TimeGrid::new(problem.horizon, n_steps)?;
    let noise = generate_noise(&grid, &problem.markspace, 20_000, 29)?;

    let feedback = problem.oracle_control()?;
    let x0 = problem.x0;
    let control = time_control(&noise, |t| feedback(t, x0));
    let solution = picard_solve(
        &problem,
        &control,
        &noise,
        &RegressionConfig::default(),
        1e-9,
        25,
    )?;

    let adjoint = solve_first_order(&problem, &solution, &noise, &AdjointConfig::default())?;
    adjoint.audit.ensure_regular()?;

    let oracle_p = problem
        .oracle
        .as_ref()
        .and_then(|o| o.adjoint_p.clone())
        .expect("the lq benchmark carries an adjoint oracle");

    println!("first-order adjoint p along the optimal trajectory:");
    println!("  {:>5}  {:>10}  {:>10}  {:>9}", "t", "regression", "oracle", "|error|");
    let mut worst: f64 = 0.0;
    for knot in (0..=n_steps).step_by(n_steps / 10) {
        let t = noise.grid().knot(knot);
        let (mean, _) = mean_se(&adjoint.p.column(knot));
        let exact = oracle_p(t);
        worst = worst.max((mean - exact).abs());
        println!("  {t:>5.2}  {mean:>10.6}  {exact:>10.6}  {:>9.2e}", (mean - exact).abs());
    }
    println!("worst tabulated error {worst:.2e}; max gain {:.2e}", adjoint.audit.max_gain);
    Ok(())
}
