//! Simulates an uncontrolled linear jump diffusion and checks the terminal
//! mean against its closed form.
//!
//! The benchmark drives `dX = 0.1·X dt + 0.2·X dW + 0.2·X dÑ`; the
//! compensated jump integral is a martingale, so `E[X_T] = x0·e^{0.1·T}`
//! regardless of the jump activity along the way.

use fbsdep::fbsolve::{constant_control, picard_solve};
use fbsdep::model::builtin_problem;
use fbsdep::noise::generate_noise;
use fbsdep::numeric::mean_se;
use fbsdep::{RegressionConfig, Result, TimeGrid};

fn main() -> Result<()> {
    let problem = builtin_problem("linear_forward")?;
    let n_steps = 200;
    let grid = TimeGrid::new(problem.horizon, n_steps)?;
    let noise = generate_noise(&grid, &problem.markspace, 100_000, 11)?;
    let control = constant_control(&noise, problem.controls.clamp(0.0));

    let solution = picard_solve(
        &problem,
        &control,
        &noise,
        &RegressionConfig::default(),
        1e-9,
        25,
    )?;

    let terminal = solution.x.column(n_steps);
    let (mean, se) = mean_se(&terminal);
    let exact = problem.x0 * (0.1f64 * problem.horizon).exp();

    println!("terminal mean of the jump diffusion:");
    println!("  monte carlo  {mean:.6} +/- {:.2e}", se);
    println!("  closed form  {exact:.6}");
    println!("  |error|      {:.2e}  (3 se = {:.2e})", (mean - exact).abs(), 3.0 * se);
    println!("  jumps drawn  {}", noise.total_jumps());
    Ok(())
}
