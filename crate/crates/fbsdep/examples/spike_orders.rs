//! Fits the ε-power laws of the spike-variation statistics on a benchmark
//! whose diffusion responds to the control.
//!
//! A needle (spike) perturbation of width ε moves the state by O(√ε) in the
//! supremum norm, so `E sup|X^ε − X̄|²` scales like ε (slope 1 in log-log),
//! while the first-variation remainder `E sup|X^ε − X̄ − X¹|²` scales like ε²
//! (slope 2).  The example measures both on a ladder of widths and prints
//! the fitted slopes.

use fbsdep::adjoint::{solve_first_order, AdjointConfig};
use fbsdep::fbsolve::{picard_solve, time_control};
use fbsdep::maxprinciple::{order_experiment, OrderStatistic, Replacement};
use fbsdep::model::builtin_problem;
use fbsdep::noise::generate_noise;
use fbsdep::{RegressionConfig, Result, TimeGrid};

fn main() -> Result<()> {
    let problem = builtin_problem("lq_spike")?;
    let grid = TimeGrid::new(problem.horizon, 80)?;
    let noise = generate_noise(&grid, &problem.markspace, 16_384, 37)?;

    // A non-optimal reference control leaves the spike something to improve.
    let feedback = problem.oracle_control()?;
    let x0 = problem.x0;
    let control = time_control(&noise, |t| feedback(t, x0) + 1.0);
    let base = picard_solve(
        &problem,
        &control,
        &noise,
        &RegressionConfig::default(),
        1e-9,
        25,
    )?;
    let first = solve_first_order(&problem, &base, &noise, &AdjointConfig::default())?;
    first.audit.ensure_regular()?;

    let epsilons = [0.2, 0.1, 0.05, 0.025];
    for statistic in [OrderStatistic::ForwardGap, OrderStatistic::Remainder] {
        let fit = order_experiment(
            &problem,
            &base,
            &first,
            0.25,
            &Replacement::Value(2.0),
            &epsilons,
            statistic,
            &noise,
            &RegressionConfig::default(),
            1e-9,
            25,
        )?;
        println!("{}:", statistic.label());
        for ((eps, value), se) in fit.epsilons.iter().zip(&fit.values).zip(&fit.standard_errors) {
            println!("  eps {eps:<6} value {value:.4e} +/- {se:.1e}");
        }
        println!(
            "  fitted slope {:.3} (expected {:.0}, r^2 = {:.4})",
            fit.slope,
            statistic.expected_slope(),
            fit.r_squared
        );
    }
    Ok(())
}
