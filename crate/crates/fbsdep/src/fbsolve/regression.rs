//! Least-squares conditional-expectation estimators used by the backward sweeps.
//!
//! A [`Design`] is built once per time step from per-path basis rows and then
//! fitted against several targets (continuation value, Brownian loading, one
//! jump loading per mark) without refactorising.  Columns other than the
//! leading intercept are standardised to zero mean and unit variance before
//! the normal equations are assembled; a small ridge penalty is applied to the
//! standardised (non-intercept) columns only, so fitting an exactly constant
//! target reproduces the constant to round-off rather than to `O(ridge)`.
//!
//! All reductions over paths are performed in fixed-size chunks whose partial
//! sums are combined serially in chunk order with compensated summation, so
//! results do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::ScalarGrid;
use crate::numeric::KahanSum;

/// Number of paths per reduction chunk.  Fixed (independent of thread count)
/// so that parallel reductions are bitwise reproducible.
const CHUNK: usize = 4096;

/// Relative threshold under which a standardised column is considered
/// constant and dropped from the fit.
const DEAD_COLUMN_TOL: f64 = 1e-12;

/// Empirical clip range for a regression's conditioning variable: the
/// `tail`- and `(1 - tail)`-quantiles of `values`.
///
/// Conditioning states are clamped to this range before basis rows are
/// built, so polynomial fits are never evaluated far outside the bulk of the
/// sample.  Unbounded extrapolation is what destabilises coupled Picard
/// iterations: a handful of tail paths pick up huge fitted loadings, which
/// feed the next forward pass and grow those same tails further.
pub(crate) fn clip_bounds(values: &[f64], tail: f64) -> (f64, f64) {
    assert!(!values.is_empty(), "clip bounds need at least one value");
    assert!(
        (0.0..0.5).contains(&tail),
        "the clipped tail fraction must lie in [0, 0.5), got {tail}"
    );
    let n = values.len();
    let lo_idx = (tail * (n - 1) as f64).floor() as usize;
    let hi_idx = n - 1 - lo_idx;
    let mut scratch = values.to_vec();
    let (_, lo, _) = scratch.select_nth_unstable_by(lo_idx, f64::total_cmp);
    let lo = *lo;
    let (_, hi, _) = scratch.select_nth_unstable_by(hi_idx, f64::total_cmp);
    let hi = *hi;
    (lo, hi)
}

/// Fill `out` with the monomial basis `[1, x, x^2, ..., x^degree]`.
pub(crate) fn monomial_row(x: f64, degree: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), degree + 1, "basis row length must match degree + 1");
    out[0] = 1.0;
    let mut power = 1.0;
    for slot in out.iter_mut().take(degree + 1).skip(1) {
        power *= x;
        *slot = power;
    }
}

/// Clipped monomial basis on the columns of a state grid: the standard
/// conditioning scheme of the backward sweeps.
pub(crate) struct StateBasis<'a> {
    x: &'a ScalarGrid,
    bounds: Vec<(f64, f64)>,
    degree: usize,
}

impl<'a> StateBasis<'a> {
    pub(crate) fn new(x: &'a ScalarGrid, n_steps: usize, degree: usize, clip_tail: f64) -> Self {
        let bounds = (0..n_steps)
            .map(|step| clip_bounds(&x.column(step), clip_tail))
            .collect();
        Self { x, bounds, degree }
    }

    pub(crate) fn n_cols(&self) -> usize {
        self.degree + 1
    }

    pub(crate) fn fill(&self, path: usize, step: usize, row: &mut [f64]) {
        let (lo, hi) = self.bounds[step];
        monomial_row(self.x.get(path, step).clamp(lo, hi), self.degree, row);
    }
}

/// LU factorisation (partial pivoting) of a small dense matrix.
struct LuFactor {
    dim: usize,
    /// Row-major packed factors: unit-lower below the diagonal, upper on/above.
    lu: Vec<f64>,
    pivots: Vec<usize>,
}

impl LuFactor {
    fn factor(mut a: Vec<f64>, dim: usize, step: usize) -> Result<Self> {
        let mut pivots = vec![0usize; dim];
        for col in 0..dim {
            let mut pivot_row = col;
            let mut pivot_mag = a[col * dim + col].abs();
            for row in (col + 1)..dim {
                let mag = a[row * dim + col].abs();
                if mag > pivot_mag {
                    pivot_mag = mag;
                    pivot_row = row;
                }
            }
            if !pivot_mag.is_finite() || pivot_mag < 1e-300 {
                return Err(Error::SingularRegression {
                    step,
                    detail: format!(
                        "normal matrix pivot {pivot_mag:.3e} in column {col} of {dim} is numerically singular"
                    ),
                });
            }
            if pivot_row != col {
                for j in 0..dim {
                    a.swap(col * dim + j, pivot_row * dim + j);
                }
            }
            pivots[col] = pivot_row;
            let inv = 1.0 / a[col * dim + col];
            for row in (col + 1)..dim {
                let factor = a[row * dim + col] * inv;
                a[row * dim + col] = factor;
                for j in (col + 1)..dim {
                    a[row * dim + j] -= factor * a[col * dim + j];
                }
            }
        }
        Ok(Self { dim, lu: a, pivots })
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let dim = self.dim;
        for col in 0..dim {
            b.swap(col, self.pivots[col]);
        }
        for row in 1..dim {
            let mut acc = b[row];
            for (j, &bj) in b.iter().enumerate().take(row) {
                acc -= self.lu[row * dim + j] * bj;
            }
            b[row] = acc;
        }
        for row in (0..dim).rev() {
            let mut acc = b[row];
            for (j, &bj) in b.iter().enumerate().skip(row + 1) {
                acc -= self.lu[row * dim + j] * bj;
            }
            b[row] = acc / self.lu[row * dim + row];
        }
    }
}

/// A standardised, factorised regression design for one time step.
///
/// Holds the standardised basis rows so that several targets can be fitted
/// against the same design with only a back-substitution and one pass over
/// the paths each.
pub(crate) struct Design {
    n_paths: usize,
    n_cols: usize,
    /// Standardised rows, row-major `n_paths x n_cols`; dead columns are zeroed.
    rows: Vec<f64>,
    factor: LuFactor,
}

impl Design {
    /// Build a design from raw basis rows (row-major, `n_paths x n_cols`,
    /// column 0 must be the intercept).  `rows` is standardised in place.
    pub(crate) fn build(
        mut rows: Vec<f64>,
        n_paths: usize,
        n_cols: usize,
        ridge: f64,
        step: usize,
    ) -> Result<Self> {
        assert_eq!(
            rows.len(),
            n_paths * n_cols,
            "basis row buffer holds {} values but {} paths x {} columns were requested",
            rows.len(),
            n_paths,
            n_cols
        );
        assert!(n_paths > 0, "regression design needs at least one path");
        assert!(n_cols > 0, "regression design needs at least one column");

        // Column means and variances via deterministic chunked reduction.
        let mut means = vec![0.0f64; n_cols];
        let mut vars = vec![0.0f64; n_cols];
        {
            let partials: Vec<Vec<f64>> = rows
                .par_chunks(CHUNK * n_cols)
                .map(|chunk| {
                    let mut acc = vec![0.0f64; n_cols];
                    for row in chunk.chunks_exact(n_cols) {
                        for (slot, value) in acc.iter_mut().zip(row) {
                            *slot += value;
                        }
                    }
                    acc
                })
                .collect();
            for (col, mean_slot) in means.iter_mut().enumerate() {
                let mut acc = KahanSum::new();
                for partial in &partials {
                    acc.add(partial[col]);
                }
                *mean_slot = acc.value() / n_paths as f64;
            }
            let partials: Vec<Vec<f64>> = rows
                .par_chunks(CHUNK * n_cols)
                .map(|chunk| {
                    let mut acc = vec![0.0f64; n_cols];
                    for row in chunk.chunks_exact(n_cols) {
                        for ((slot, value), mean) in acc.iter_mut().zip(row).zip(&means) {
                            let d = value - mean;
                            *slot += d * d;
                        }
                    }
                    acc
                })
                .collect();
            for (col, var_slot) in vars.iter_mut().enumerate() {
                let mut acc = KahanSum::new();
                for partial in &partials {
                    acc.add(partial[col]);
                }
                *var_slot = acc.value() / n_paths as f64;
            }
        }

        if means.iter().chain(vars.iter()).any(|v| !v.is_finite()) {
            return Err(Error::SingularRegression {
                step,
                detail: "basis rows contain non-finite values".to_string(),
            });
        }

        // Standardise in place: intercept kept as ones, live columns centred
        // and scaled, dead (constant) columns zeroed so they drop out.
        let mut scale = vec![0.0f64; n_cols];
        let mut alive = vec![false; n_cols];
        for col in 0..n_cols {
            if col == 0 {
                scale[col] = 1.0;
                alive[col] = true;
                continue;
            }
            let sd = vars[col].sqrt();
            if sd > DEAD_COLUMN_TOL * (1.0 + means[col].abs()) {
                scale[col] = 1.0 / sd;
                alive[col] = true;
            }
        }
        rows.par_chunks_mut(n_cols).for_each(|row| {
            row[0] = 1.0;
            for col in 1..n_cols {
                row[col] = if alive[col] {
                    (row[col] - means[col]) * scale[col]
                } else {
                    0.0
                };
            }
        });

        // Normal matrix of the standardised design, ridge on non-intercept
        // columns only (scaled by n so the penalty is relative to the unit
        // column norms produced by standardisation).
        let partials: Vec<Vec<f64>> = rows
            .par_chunks(CHUNK * n_cols)
            .map(|chunk| {
                let mut acc = vec![0.0f64; n_cols * n_cols];
                for row in chunk.chunks_exact(n_cols) {
                    for i in 0..n_cols {
                        let ri = row[i];
                        for j in i..n_cols {
                            acc[i * n_cols + j] += ri * row[j];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut normal = vec![0.0f64; n_cols * n_cols];
        for i in 0..n_cols {
            for j in i..n_cols {
                let mut acc = KahanSum::new();
                for partial in &partials {
                    acc.add(partial[i * n_cols + j]);
                }
                let value = acc.value();
                normal[i * n_cols + j] = value;
                normal[j * n_cols + i] = value;
            }
        }
        for col in 1..n_cols {
            if alive[col] {
                normal[col * n_cols + col] += ridge * n_paths as f64;
            } else {
                // Dead column: decouple it so the factorisation stays regular;
                // its coefficient is forced to zero by the zero right-hand side.
                normal[col * n_cols + col] = n_paths as f64;
            }
        }

        let factor = LuFactor::factor(normal, n_cols, step)?;
        Ok(Self {
            n_paths,
            n_cols,
            rows,
            factor,
        })
    }

    /// Fit `targets` against the design and return the per-path fitted values.
    pub(crate) fn fit(&self, targets: &[f64]) -> Vec<f64> {
        assert_eq!(
            targets.len(),
            self.n_paths,
            "target vector has {} entries but the design holds {} paths",
            targets.len(),
            self.n_paths
        );
        let n_cols = self.n_cols;
        let partials: Vec<Vec<f64>> = self
            .rows
            .par_chunks(CHUNK * n_cols)
            .zip(targets.par_chunks(CHUNK))
            .map(|(rows, ys)| {
                let mut acc = vec![0.0f64; n_cols];
                for (row, &y) in rows.chunks_exact(n_cols).zip(ys) {
                    for (slot, &value) in acc.iter_mut().zip(row) {
                        *slot += value * y;
                    }
                }
                acc
            })
            .collect();
        let mut beta = vec![0.0f64; n_cols];
        for (col, slot) in beta.iter_mut().enumerate() {
            let mut acc = KahanSum::new();
            for partial in &partials {
                acc.add(partial[col]);
            }
            *slot = acc.value();
        }
        self.factor.solve_in_place(&mut beta);

        let mut fitted = vec![0.0f64; self.n_paths];
        fitted
            .par_chunks_mut(CHUNK)
            .zip(self.rows.par_chunks(CHUNK * n_cols))
            .for_each(|(out, rows)| {
                for (slot, row) in out.iter_mut().zip(rows.chunks_exact(n_cols)) {
                    let mut acc = 0.0;
                    for (&coef, &value) in beta.iter().zip(row) {
                        acc += coef * value;
                    }
                    *slot = acc;
                }
            });
        fitted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_rows(xs: &[f64], degree: usize) -> Vec<f64> {
        let mut rows = vec![0.0; xs.len() * (degree + 1)];
        for (row, &x) in rows.chunks_exact_mut(degree + 1).zip(xs) {
            monomial_row(x, degree, row);
        }
        rows
    }

    #[test]
    fn constant_target_is_reproduced_to_roundoff() {
        let xs: Vec<f64> = (0..500).map(|i| (i as f64) * 0.01 - 2.5).collect();
        let rows = build_rows(&xs, 3);
        let design = Design::build(rows, xs.len(), 4, 1e-8, 7).expect("design must build");
        let targets = vec![5.0; xs.len()];
        let fitted = design.fit(&targets);
        for (i, value) in fitted.iter().enumerate() {
            assert!(
                (value - 5.0).abs() < 1e-12,
                "constant target must be fitted exactly despite the ridge, got {value} at row {i}"
            );
        }
    }

    #[test]
    fn exact_cubic_is_recovered() {
        let xs: Vec<f64> = (0..800).map(|i| (i as f64) * 0.005 - 2.0).collect();
        let rows = build_rows(&xs, 3);
        let design = Design::build(rows, xs.len(), 4, 1e-10, 0).expect("design must build");
        let targets: Vec<f64> = xs.iter().map(|&x| 0.3 - 1.2 * x + 0.5 * x * x + 2.0 * x * x * x).collect();
        let fitted = design.fit(&targets);
        for ((&x, &target), &value) in xs.iter().zip(&targets).zip(&fitted) {
            assert!(
                (value - target).abs() < 1e-7 * (1.0 + target.abs()),
                "cubic target must be interpolated by a cubic basis: x = {x}, target = {target}, fitted = {value}"
            );
        }
    }

    #[test]
    fn constant_state_collapses_to_sample_mean() {
        let xs = vec![1.0; 300];
        let rows = build_rows(&xs, 3);
        let design = Design::build(rows, xs.len(), 4, 1e-8, 0).expect("design must build");
        let targets: Vec<f64> = (0..300).map(|i| (i % 7) as f64).collect();
        let mean = targets.iter().sum::<f64>() / 300.0;
        let fitted = design.fit(&targets);
        for value in &fitted {
            assert!(
                (value - mean).abs() < 1e-12,
                "with a degenerate state the fit must return the sample mean {mean}, got {value}"
            );
        }
        let first = fitted[0];
        assert!(
            fitted.iter().all(|v| v.to_bits() == first.to_bits()),
            "degenerate-state fitted values must be bitwise identical across paths"
        );
    }

    #[test]
    fn duplicated_column_without_ridge_is_singular() {
        let xs: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        let mut rows = vec![0.0; xs.len() * 3];
        for (row, &x) in rows.chunks_exact_mut(3).zip(&xs) {
            row[0] = 1.0;
            row[1] = x;
            row[2] = x;
        }
        let err = match Design::build(rows, xs.len(), 3, 0.0, 11) {
            Err(e) => e,
            Ok(_) => panic!("a duplicated column with zero ridge must be singular"),
        };
        match err {
            Error::SingularRegression { step, .. } => {
                assert_eq!(step, 11, "singularity must report the offending step");
            }
            other => panic!("expected a singular-regression error, got {other}"),
        }
        // The default ridge regularises the same design.
        let mut rows = vec![0.0; xs.len() * 3];
        for (row, &x) in rows.chunks_exact_mut(3).zip(&xs) {
            row[0] = 1.0;
            row[1] = x;
            row[2] = x;
        }
        Design::build(rows, xs.len(), 3, 1e-8, 11)
            .expect("ridge must regularise a duplicated column");
    }

    #[test]
    fn clip_bounds_hit_the_requested_quantiles() {
        let mut values: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        // Deterministic shuffle so the selection has to do real work.
        for i in 0..values.len() {
            let j = (i * 7919) % values.len();
            values.swap(i, j);
        }
        let (lo, hi) = clip_bounds(&values, 0.01);
        assert_eq!(lo, 9.0, "the lower clip must be the 1% order statistic");
        assert_eq!(hi, 990.0, "the upper clip must be the 99% order statistic");
        let (lo, hi) = clip_bounds(&values, 0.0);
        assert_eq!(
            (lo, hi),
            (0.0, 999.0),
            "a zero tail must keep the full range"
        );
    }

    #[test]
    fn fit_is_invariant_under_thread_count() {
        let xs: Vec<f64> = (0..20_000)
            .map(|i| ((i as f64) * 0.37).sin() * 2.0)
            .collect();
        let targets: Vec<f64> = xs.iter().map(|&x| x * x - 0.3 * x + 1.0).collect();
        let fit_with = |threads: usize| -> Vec<f64> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool must build");
            pool.install(|| {
                let rows = build_rows(&xs, 3);
                let design = Design::build(rows, xs.len(), 4, 1e-8, 0).expect("design must build");
                design.fit(&targets)
            })
        };
        let serial = fit_with(1);
        let parallel = fit_with(4);
        assert_eq!(
            serial.len(),
            parallel.len(),
            "fitted vectors must have equal lengths"
        );
        for (a, b) in serial.iter().zip(&parallel) {
            assert!(
                a.to_bits() == b.to_bits(),
                "fitted values must be bitwise identical across thread counts: {a} vs {b}"
            );
        }
    }
}
