//! Scans the shifted Hamiltonian over a trajectory lattice, once at the
//! optimal control and once at a shifted one.
//!
//! The maximum principle states that the optimal control minimizes the
//! shifted Hamiltonian `𝓗` pointwise over the admissible set.  At the
//! closed-form optimum of `lq_jump` every gap `𝓗(u) − 𝓗(ū)` must be
//! non-negative (zero exactly at `u = ū`); at a deliberately shifted control
//! the scan must flag violations.

use fbsdep::adjoint::{solve_first_order, solve_second_order, AdjointConfig};
use fbsdep::fbsolve::{picard_solve, time_control, FbsdepSolution};
use fbsdep::maxprinciple::{verify_mp, MpConfig};
use fbsdep::model::Problem;
use fbsdep::noise::NoiseBundle;
use fbsdep::{RegressionConfig, Result, ScalarGrid, TimeGrid};

fn scan(problem: &Problem, noise: &NoiseBundle, control: &ScalarGrid) -> Result<(FbsdepSolution, fbsdep::maxprinciple::MpReport)> {
    let solution = picard_solve(
        problem,
        control,
        noise,
        &RegressionConfig::default(),
        1e-9,
        25,
    )?;
    let acfg = AdjointConfig::default();
    let first = solve_first_order(problem, &solution, noise, &acfg)?;
    first.audit.ensure_regular()?;
    let second = solve_second_order(problem, &solution, &first, noise, &acfg)?;
    second.audit.ensure_regular()?;
    let cfg = MpConfig {
        n_times: 10,
        n_paths: 100,
        offsets: MpConfig::spanning(2.0, 21),
        tol: 1e-2,
    };
    let report = verify_mp(problem, &solution, &first, &second, &cfg, noise)?;
    Ok((solution, report))
}

fn main() -> Result<()> {
    let problem = fbsdep::model::builtin_problem("lq_jump")?;
    let grid = TimeGrid::new(problem.horizon, 50)?;
    let noise = fbsdep::noise::generate_noise(&grid, &problem.markspace, 4096, 31)?;
    let feedback = problem.oracle_control()?;
    let x0 = problem.x0;

    let optimal = time_control(&noise, |t| feedback(t, x0));
    let (_, at_optimum) = scan(&problem, &noise, &optimal)?;
    println!("at the closed-form optimum:");
    println!(
        "  {} evaluations, min gap {:+.3e}, violations {:.2}%",
        at_optimum.n_evaluations,
        at_optimum.min_gap,
        100.0 * at_optimum.violation_fraction
    );

    let shifted = time_control(&noise, |t| feedback(t, x0) + 1.0);
    let (_, at_shifted) = scan(&problem, &noise, &shifted)?;
    println!("at the optimum shifted by +1:");
    println!(
        "  {} evaluations, min gap {:+.3e}, violations {:.2}%",
        at_shifted.n_evaluations,
        at_shifted.min_gap,
        100.0 * at_shifted.violation_fraction
    );
    Ok(())
}
