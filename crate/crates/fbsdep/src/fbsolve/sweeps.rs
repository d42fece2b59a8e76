//! Generic simulation sweeps shared by the coupled solver, the adjoint
//! solvers and the variational systems.
//!
//! The forward sweep is an Euler scheme driven by per-(path, step) closures
//! for the intensity-integrated drift, the Brownian loading and the jump
//! amplitude; realized jumps enter through the tallies of the noise bundle
//! and are compensated with the analytic intensity term.  The backward sweep
//! estimates conditional expectations with a caller-supplied regression basis,
//! recovers the Brownian and jump loadings from centred covariation
//! regressions, and closes each step with a damped-free fixed point for the
//! implicit Euler update.  The Picard loop alternates the two until the
//! iterate distance (sup-norm in the backward value, intensity-weighted and
//! jump-measure-weighted norms in the loadings) drops under tolerance.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{MarkGrid, ScalarGrid};
use crate::noise::NoiseBundle;
use crate::numeric::KahanSum;

use super::regression::Design;
use super::{PicardReport, RegressionConfig};

/// Number of paths per deterministic reduction chunk (see the regression
/// module for the reproducibility rationale).
const CHUNK: usize = 4096;

/// Per-path state bound beyond which the forward sweep reports divergence.
const FORWARD_BOUND: f64 = 1e12;

/// Closure bundle describing one scalar forward equation on a noise bundle.
///
/// All closures receive `(path, step, x)` with `x` the state at the left knot;
/// `jump` additionally receives the mark index.  `drift` must already be
/// integrated against the intensity measure, while `jump` is the raw amplitude
/// at one mark (the sweep applies both the realized tallies and the
/// compensator).
pub(crate) struct ForwardSystem<'a> {
    pub initial: InitialState,
    pub drift: &'a (dyn Fn(usize, usize, f64) -> f64 + Sync),
    pub diffusion: &'a (dyn Fn(usize, usize, f64) -> f64 + Sync),
    pub jump: &'a (dyn Fn(usize, usize, f64, usize) -> f64 + Sync),
}

/// Initial condition of a forward sweep.
pub(crate) enum InitialState {
    Constant(f64),
}

/// Run the forward Euler sweep and return the state on the knot grid
/// (`n_steps + 1` values per path).
pub(crate) fn forward_sweep(noise: &NoiseBundle, system: &ForwardSystem<'_>) -> Result<ScalarGrid> {
    let grid = noise.grid();
    let ms = noise.markspace();
    let n_paths = noise.n_paths();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let weights = ms.weights();

    let mut x = ScalarGrid::zeros(n_paths, n_steps + 1);
    let failures: Vec<Option<(usize, usize)>> = x
        .as_mut_slice()
        .par_chunks_mut(n_steps + 1)
        .enumerate()
        .map(|(path, row)| {
            row[0] = match system.initial {
                InitialState::Constant(value) => value,
            };
            for step in 0..n_steps {
                let state = row[step];
                if !state.is_finite() || state.abs() > FORWARD_BOUND {
                    return Some((path, step));
                }
                let mut next = state
                    + (system.drift)(path, step, state) * dt
                    + (system.diffusion)(path, step, state) * noise.dw(path, step);
                for (mark, &weight) in weights.iter().enumerate() {
                    let amplitude = (system.jump)(path, step, state, mark);
                    next += amplitude * (noise.dn(path, step, mark) - weight * dt);
                }
                row[step + 1] = next;
            }
            if row[n_steps].is_finite() && row[n_steps].abs() <= FORWARD_BOUND {
                None
            } else {
                Some((path, n_steps.saturating_sub(1)))
            }
        })
        .collect();

    if let Some(&(path, step)) = failures.iter().flatten().min() {
        return Err(Error::ForwardDiverged { path, step });
    }
    Ok(x)
}

/// Intensity-integrated generator closure of a backward equation, evaluated
/// at `(path, step, y, z_row, zt_row)` where the rows hold one value per mark.
pub(crate) type DriverFn<'a> = dyn Fn(usize, usize, f64, &[f64], &[f64]) -> f64 + Sync + 'a;

/// Closure bundle describing one scalar backward equation on a noise bundle.
pub(crate) struct BackwardSystem<'a> {
    /// Number of regression columns produced by `basis`.
    pub n_basis: usize,
    /// Fill one regression row for `(path, step)`; column 0 must be 1.
    pub basis: &'a (dyn Fn(usize, usize, &mut [f64]) + Sync),
    /// Generator of the equation.
    pub driver: &'a DriverFn<'a>,
    /// Terminal value per path.
    pub terminal: &'a [f64],
}

/// Output triple of a backward sweep: value on knots, Brownian loading per
/// mark on steps, jump loading per mark on steps.
pub(crate) type BackwardTriple = (ScalarGrid, MarkGrid, MarkGrid);

/// Run the regression backward sweep for one backward equation.
pub(crate) fn backward_sweep(
    noise: &NoiseBundle,
    system: &BackwardSystem<'_>,
    cfg: &RegressionConfig,
) -> Result<BackwardTriple> {
    let grid = noise.grid();
    let ms = noise.markspace();
    let n_paths = noise.n_paths();
    let n_steps = grid.n_steps();
    let n_marks = ms.len();
    let dt = grid.dt();
    let weights = ms.weights();
    let total_intensity = ms.total_intensity();
    let n_basis = system.n_basis;

    if system.terminal.len() != n_paths {
        return Err(Error::DimensionMismatch(format!(
            "terminal vector has {} entries but the noise bundle holds {} paths",
            system.terminal.len(),
            n_paths
        )));
    }

    let mut y = ScalarGrid::zeros(n_paths, n_steps + 1);
    let mut z = MarkGrid::zeros(n_paths, n_steps, n_marks);
    let mut zt = MarkGrid::zeros(n_paths, n_steps, n_marks);

    for (path, &terminal) in system.terminal.iter().enumerate() {
        y.set(path, n_steps, terminal);
    }

    let mut targets = vec![0.0f64; n_paths];
    for step in (0..n_steps).rev() {
        // Regression design from the caller's basis at the left knot.
        let mut rows = vec![0.0f64; n_paths * n_basis];
        rows.par_chunks_mut(n_basis)
            .enumerate()
            .for_each(|(path, row)| (system.basis)(path, step, row));
        let design = Design::build(rows, n_paths, n_basis, cfg.ridge, step)?;

        // Continuation value m = E[Y_{k+1} | basis].
        for (path, target) in targets.iter_mut().enumerate() {
            *target = y.get(path, step + 1);
        }
        let continuation = design.fit(&targets);

        // Centred Brownian loading: regress (Y_{k+1} - m) dW / dt.
        for (path, target) in targets.iter_mut().enumerate() {
            *target = (y.get(path, step + 1) - continuation[path]) * noise.dw(path, step) / dt;
        }
        let zbar = design.fit(&targets);

        // Centred jump loadings per mark: regress
        // (Y_{k+1} - m)(dN_j - nu_j dt) / (nu_j dt).
        let mut zt_fit: Vec<Vec<f64>> = Vec::with_capacity(n_marks);
        for (mark, &weight) in weights.iter().enumerate() {
            let scale = 1.0 / (weight * dt);
            for (path, target) in targets.iter_mut().enumerate() {
                let incr = noise.dn(path, step, mark) - weight * dt;
                *target = (y.get(path, step + 1) - continuation[path]) * incr * scale;
            }
            zt_fit.push(design.fit(&targets));
        }

        // Distribute the Brownian loading over marks (constant-in-mark mode:
        // the intensity integral of the stored profile equals the fitted
        // loading) and store the jump profile.
        {
            let zbar_ref = &zbar;
            let zt_ref = &zt_fit;
            let path_len = n_steps * n_marks;
            z.as_mut_slice()
                .par_chunks_mut(path_len)
                .zip(zt.as_mut_slice().par_chunks_mut(path_len))
                .enumerate()
                .for_each(|(path, (z_row, zt_row))| {
                    let base = step * n_marks;
                    for mark in 0..n_marks {
                        z_row[base + mark] = zbar_ref[path] / total_intensity;
                        zt_row[base + mark] = zt_ref[mark][path];
                    }
                });
        }

        // Implicit Euler closure: y = m + dt * driver(y, z, zt), solved by
        // fixed-point iteration per path.
        let driver = system.driver;
        let tol = cfg.implicit_tol;
        let max_iters = cfg.implicit_max_iters;
        let z_ref = &z;
        let zt_ref = &zt;
        let continuation_ref = &continuation;
        let results: Vec<Result<()>> = y
            .as_mut_slice()
            .par_chunks_mut(n_steps + 1)
            .enumerate()
            .map(|(path, row)| {
                let z_row = z_ref.at(path, step);
                let zt_row = zt_ref.at(path, step);
                let mut value = continuation_ref[path];
                let mut converged = false;
                let mut residual = f64::INFINITY;
                for _ in 0..max_iters {
                    let next =
                        continuation_ref[path] + dt * driver(path, step, value, z_row, zt_row);
                    residual = (next - value).abs();
                    value = next;
                    if residual <= tol * (1.0 + value.abs()) {
                        converged = true;
                        break;
                    }
                }
                if !converged || !value.is_finite() {
                    return Err(Error::ImplicitStep {
                        step,
                        iters: max_iters,
                        residual,
                    });
                }
                row[step] = value;
                Ok(())
            })
            .collect();
        for result in results {
            result?;
        }
    }

    Ok((y, z, zt))
}

/// Distance between two backward iterates:
/// `E[sup_k |dY_k|^2] + E[sum_k dt * |dZ_k|_nu^2] + E[sum_k sum_j dN_kj dZt_kj^2]`.
pub(crate) fn triple_distance(
    noise: &NoiseBundle,
    a: &BackwardTriple,
    b: &BackwardTriple,
) -> f64 {
    let n_paths = noise.n_paths();
    let n_steps = noise.grid().n_steps();
    let dt = noise.grid().dt();
    let weights = noise.markspace().weights();

    let per_path: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut sup_sq = 0.0f64;
            for knot in 0..=n_steps {
                let d = a.0.get(path, knot) - b.0.get(path, knot);
                sup_sq = sup_sq.max(d * d);
            }
            let mut z_term = 0.0f64;
            let mut zt_term = 0.0f64;
            for step in 0..n_steps {
                for (mark, &weight) in weights.iter().enumerate() {
                    let dz = a.1.get(path, step, mark) - b.1.get(path, step, mark);
                    z_term += dt * weight * dz * dz;
                    let tally = noise.dn(path, step, mark);
                    if tally > 0.0 {
                        let dzt = a.2.get(path, step, mark) - b.2.get(path, step, mark);
                        zt_term += tally * dzt * dzt;
                    }
                }
            }
            sup_sq + z_term + zt_term
        })
        .collect();

    let mut acc = KahanSum::new();
    for chunk in per_path.chunks(CHUNK) {
        let partial: f64 = chunk.iter().sum();
        acc.add(partial);
    }
    acc.value() / n_paths as f64
}

/// Alternate a forward map and a backward map from the zero backward triple
/// until successive backward iterates are closer than `tol`.
///
/// `forward` receives the previous backward triple and must return the state
/// grid; `backward` receives that state grid and returns the next triple.
/// Divergence (three consecutive distance increases, or a non-finite
/// distance) aborts with a contraction-failure error carrying the last three
/// distances; exhausting `max_iterations` returns the last iterate with
/// `converged = false` in the report so callers can decide whether to use it.
#[allow(clippy::type_complexity)]
pub(crate) fn picard_loop(
    noise: &NoiseBundle,
    forward: &dyn Fn(&BackwardTriple) -> Result<ScalarGrid>,
    backward: &dyn Fn(&ScalarGrid) -> Result<BackwardTriple>,
    tol: f64,
    max_iterations: usize,
) -> Result<(ScalarGrid, BackwardTriple, PicardReport)> {
    assert!(max_iterations > 0, "the Picard loop needs at least one iteration");
    let n_paths = noise.n_paths();
    let n_steps = noise.grid().n_steps();
    let n_marks = noise.markspace().len();

    let mut previous: BackwardTriple = (
        ScalarGrid::zeros(n_paths, n_steps + 1),
        MarkGrid::zeros(n_paths, n_steps, n_marks),
        MarkGrid::zeros(n_paths, n_steps, n_marks),
    );
    let mut distances = Vec::new();
    let mut increases = 0usize;
    let mut state = forward(&previous)?;
    let mut current = backward(&state)?;

    for iteration in 1..=max_iterations {
        let distance = triple_distance(noise, &current, &previous);
        distances.push(distance);
        if !distance.is_finite()
            || (distances.len() >= 2 && distance > distances[distances.len() - 2])
        {
            increases += 1;
        } else {
            increases = 0;
        }
        if !distance.is_finite() || increases >= 3 {
            let k = distances.len();
            return Err(Error::ContractionFailure {
                iters: iteration,
                d0: distances[k.saturating_sub(3)],
                d1: distances[k.saturating_sub(2)],
                d2: distances[k - 1],
            });
        }
        if distance < tol {
            let report = PicardReport::from_distances(iteration, true, tol, distances);
            return Ok((state, current, report));
        }
        if iteration == max_iterations {
            break;
        }
        state = forward(&current)?;
        let next = backward(&state)?;
        previous = std::mem::replace(&mut current, next);
    }

    let report = PicardReport::from_distances(max_iterations, false, tol, distances);
    Ok((state, current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markspace::MarkSpace;
    use crate::noise::{generate_noise, TimeGrid};

    fn small_noise() -> NoiseBundle {
        let grid = TimeGrid::new(1.0, 40).expect("grid must build");
        let ms = MarkSpace::new(vec![1.0], vec![0.7]).expect("mark space must build");
        generate_noise(&grid, &ms, 256, 99).expect("noise must generate")
    }

    #[test]
    fn forward_sweep_matches_hand_rolled_euler_on_one_path() {
        let noise = small_noise();
        let system = ForwardSystem {
            initial: InitialState::Constant(1.5),
            drift: &|_, _, x| 0.7 * (0.1 * x),
            diffusion: &|_, _, x| 0.2 * x,
            jump: &|_, _, x, _| 0.3 * x,
        };
        let x = forward_sweep(&noise, &system).expect("forward sweep must run");
        let dt = noise.grid().dt();
        for path in [0usize, 17, 255] {
            let mut state = 1.5f64;
            for step in 0..noise.grid().n_steps() {
                let expected = state
                    + 0.7 * 0.1 * state * dt
                    + 0.2 * state * noise.dw(path, step)
                    + 0.3 * state * (noise.dn(path, step, 0) - 0.7 * dt);
                state = expected;
                let got = x.get(path, step + 1);
                assert!(
                    (got - expected).abs() <= 1e-15 * (1.0 + expected.abs()),
                    "sweep must reproduce the scheme: path {path} step {step}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn forward_sweep_reports_divergence_with_path_and_step() {
        let noise = small_noise();
        let system = ForwardSystem {
            initial: InitialState::Constant(1.0),
            drift: &|_, _, x| x * x * 1e6,
            diffusion: &|_, _, _| 0.0,
            jump: &|_, _, _, _| 0.0,
        };
        match forward_sweep(&noise, &system) {
            Err(Error::ForwardDiverged { path, step }) => {
                assert!(path < 256, "failing path index must be in range, got {path}");
                assert!(step < 40, "failing step index must be in range, got {step}");
            }
            Err(other) => panic!("expected a divergence error, got {other}"),
            Ok(_) => panic!("an explosive drift must be reported as divergence"),
        }
    }

    #[test]
    fn backward_sweep_recovers_constant_terminal_without_generator() {
        let noise = small_noise();
        let n_paths = noise.n_paths();
        let terminal = vec![5.0; n_paths];
        let system = BackwardSystem {
            n_basis: 1,
            basis: &|_, _, row: &mut [f64]| row[0] = 1.0,
            driver: &|_, _, _, _, _| 0.0,
            terminal: &terminal,
        };
        let cfg = RegressionConfig::default();
        let (y, z, zt) = backward_sweep(&noise, &system, &cfg).expect("sweep must run");
        assert!(
            (y.get(0, 0) - 5.0).abs() < 1e-12,
            "a constant terminal with zero generator must propagate unchanged, got {}",
            y.get(0, 0)
        );
        assert!(
            z.max_abs() < 1e-12 && zt.max_abs() < 1e-12,
            "the loadings of a constant value process must vanish: |Z| = {}, |Zt| = {}",
            z.max_abs(),
            zt.max_abs()
        );
    }

    #[test]
    fn picard_loop_stops_immediately_on_a_trivial_system() {
        let noise = small_noise();
        let n_paths = noise.n_paths();
        let n_steps = noise.grid().n_steps();
        let forward = |_: &BackwardTriple| Ok(ScalarGrid::zeros(n_paths, n_steps + 1));
        let backward = |_: &ScalarGrid| {
            Ok((
                ScalarGrid::zeros(n_paths, n_steps + 1),
                MarkGrid::zeros(n_paths, n_steps, 1),
                MarkGrid::zeros(n_paths, n_steps, 1),
            ))
        };
        let (_, _, report) =
            picard_loop(&noise, &forward, &backward, 1e-12, 5).expect("loop must run");
        assert!(report.converged, "the zero system must converge");
        assert_eq!(
            report.iterations, 1,
            "the zero system must converge at the first distance check"
        );
        assert_eq!(
            report.distances,
            vec![0.0],
            "the zero system distance must be exactly zero"
        );
    }

    #[test]
    fn picard_loop_reports_divergence_after_three_increases() {
        let noise = small_noise();
        let n_paths = noise.n_paths();
        let n_steps = noise.grid().n_steps();
        let counter = std::sync::atomic::AtomicUsize::new(0);
        let forward = |_: &BackwardTriple| Ok(ScalarGrid::zeros(n_paths, n_steps + 1));
        let backward = |_: &ScalarGrid| {
            let k = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst) as f64;
            Ok((
                ScalarGrid::constant(n_paths, n_steps + 1, (k + 1.0) * (k + 1.0)),
                MarkGrid::zeros(n_paths, n_steps, 1),
                MarkGrid::zeros(n_paths, n_steps, 1),
            ))
        };
        match picard_loop(&noise, &forward, &backward, 1e-12, 50) {
            Err(Error::ContractionFailure { d0, d1, d2, .. }) => {
                assert!(
                    d0 < d1 && d1 < d2,
                    "the reported distances must be increasing: {d0}, {d1}, {d2}"
                );
            }
            Err(other) => panic!("expected a contraction failure, got {other}"),
            Ok(_) => panic!("growing iterates must be flagged as divergent"),
        }
    }
}
