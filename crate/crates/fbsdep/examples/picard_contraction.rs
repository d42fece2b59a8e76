//! Shows the geometric contraction of the coupled fixed-point iteration on a
//! weakly coupled benchmark.
//!
//! Every coefficient of `coupled_small` feeds the backward solution back
//! into the forward equation with Lipschitz weight 0.1, small enough that
//! the alternating forward/backward map is a contraction; the distance
//! between successive backward iterates must fall geometrically, with
//! roughly constant ratios after the first couple of iterations.

use fbsdep::fbsolve::{constant_control, picard_solve};
use fbsdep::model::builtin_problem;
use fbsdep::noise::generate_noise;
use fbsdep::{RegressionConfig, Result, TimeGrid};

fn main() -> Result<()> {
    let problem = builtin_problem("coupled_small")?;
    let grid = TimeGrid::new(problem.horizon, 100)?;
    let noise = generate_noise(&grid, &problem.markspace, 20_000, 23)?;
    let control = constant_control(&noise, problem.controls.clamp(0.0));

    let solution = picard_solve(
        &problem,
        &control,
        &noise,
        &RegressionConfig::default(),
        1e-6,
        15,
    )?;
    let report = &solution.report;

    println!(
        "coupling budget {:.2}; converged: {} after {} iterations",
        problem.budget.coupling(),
        report.converged,
        report.iterations
    );
    println!("iterate distances and ratios:");
    for (i, d) in report.distances.iter().enumerate() {
        match i.checked_sub(1).and_then(|j| report.ratios.get(j)) {
            Some(r) => println!("  {:>2}  {d:.3e}   ratio {r:.3}", i + 1),
            None => println!("  {:>2}  {d:.3e}", i + 1),
        }
    }
    Ok(())
}
