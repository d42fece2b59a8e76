//! Scratch probe (not part of the published examples).

use std::sync::Arc;

use fbsdep::adjoint::{solve_first_order, AdjointConfig};
use fbsdep::fbsolve::{constant_control, picard_solve, time_control};
use fbsdep::maxprinciple::{
    build_spike_control, first_variation_backward, first_variation_simulate,
    variation_identity_gaps, SpikeConfig,
};
use fbsdep::model::{builtin_problem, AffineCoeff};
use fbsdep::noise::generate_noise;
use fbsdep::{RegressionConfig, Result, TimeGrid};

fn gaps_at(
    problem: &fbsdep::model::Problem,
    k: usize,
    n: usize,
    seed: u64,
    ctrl: impl Fn(f64) -> f64,
) -> Result<(f64, f64, f64, f64)> {
    let grid = TimeGrid::new(problem.horizon, k)?;
    let noise = generate_noise(&grid, &problem.markspace, n, seed)?;
    let control = time_control(&noise, ctrl);
    let cfg = RegressionConfig::default();
    let base = picard_solve(problem, &control, &noise, &cfg, 1e-9, 25)?;
    let fo = solve_first_order(problem, &base, &noise, &AdjointConfig::default())?;
    fo.audit.ensure_regular()?;
    let spike = build_spike_control(&control, &SpikeConfig::at(0.25, 0.3, -3.0), None, &noise)?;
    let first = first_variation_simulate(problem, &base, &fo, &spike, &noise)?;
    let triple = first_variation_backward(problem, &base, &fo, &first, &spike, &noise, &cfg)?;
    let g = variation_identity_gaps(&fo, &first, &triple, &noise);
    Ok((g.y_gap, g.y_scale, g.zt_gap, g.zt_scale))
}

fn main() -> Result<()> {
    let lq = builtin_problem("lq_jump")?;
    for k in [200usize, 400] {
        let (yg, ys, zg, zs) = gaps_at(&lq, k, 30_000, 71, |t| -(1.0 - 0.5 * t) + 1.0)?;
        println!("lq_jump   K={k:<4} y_gap {yg:.3e} (scale {ys:.3e})  zt_gap {zg:.3e} (scale {zs:.3e})");
    }

    let mut variant = builtin_problem("lq_spike")?;
    variant.name = "state_coupled".into();
    variant.coefficients.b = Arc::new(AffineCoeff {
        x: 1.0,
        u: 1.0,
        ..AffineCoeff::default()
    });
    variant.budget.x = 1.0;
    variant.oracle = None;
    let mut prev: Option<(f64, f64)> = None;
    for k in [200usize, 400] {
        let (yg, ys, zg, zs) = gaps_at(&variant, k, 30_000, 71, |_| 0.0)?;
        println!("variant   K={k:<4} y_gap {yg:.3e} (scale {ys:.3e})  zt_gap {zg:.3e} (scale {zs:.3e})");
        if let Some((pyg, pzg)) = prev {
            println!("          factors: y {:.3}  zt {:.3}", pyg / yg, pzg / zg);
        }
        prev = Some((yg, zg));
    }
    let _ = constant_control;
    Ok(())
}
