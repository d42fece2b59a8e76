//! Dense storage for simulated processes on the time grid.
//!
//! Two layouts cover everything the solvers exchange:
//!
//! * [`ScalarGrid`] — one value per (path, knot) or per (path, step); used
//!   for states `X`, backward values `Y`, controls, and adjoint states.
//! * [`MarkGrid`] — one value per (path, step, mark); used for the jump
//!   components `Z`, `Z~`, the adjoint gains, and mark-resolved sources.
//!
//! Both are flat row-major `Vec<f64>` buffers. Per-path rows are contiguous,
//! which lets path loops hand out disjoint `&mut` chunks to worker threads
//! without locking.

/// Values indexed by `(path, k)` with `k` ranging over a fixed number of
/// entries per path (grid knots `K + 1` or steps `K`, depending on use).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    n_paths: usize,
    per_path: usize,
    data: Vec<f64>,
}

impl ScalarGrid {
    pub fn zeros(n_paths: usize, per_path: usize) -> Self {
        Self {
            n_paths,
            per_path,
            data: vec![0.0; n_paths * per_path],
        }
    }

    pub fn constant(n_paths: usize, per_path: usize, value: f64) -> Self {
        Self {
            n_paths,
            per_path,
            data: vec![value; n_paths * per_path],
        }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Number of entries per path (knots or steps).
    pub fn per_path(&self) -> usize {
        self.per_path
    }

    #[inline]
    pub fn get(&self, path: usize, k: usize) -> f64 {
        debug_assert!(path < self.n_paths && k < self.per_path);
        self.data[path * self.per_path + k]
    }

    #[inline]
    pub fn set(&mut self, path: usize, k: usize, v: f64) {
        debug_assert!(path < self.n_paths && k < self.per_path);
        self.data[path * self.per_path + k] = v;
    }

    #[inline]
    pub fn row(&self, path: usize) -> &[f64] {
        &self.data[path * self.per_path..(path + 1) * self.per_path]
    }

    #[inline]
    pub fn row_mut(&mut self, path: usize) -> &mut [f64] {
        &mut self.data[path * self.per_path..(path + 1) * self.per_path]
    }

    /// Column `k` across paths, collected into a fresh vector (path order).
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.get(p, k)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Disjoint per-path rows, for parallel fills.
    pub fn rows_mut(&mut self) -> std::slice::ChunksMut<'_, f64> {
        self.data.chunks_mut(self.per_path)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Values indexed by `(path, step, mark)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkGrid {
    n_paths: usize,
    n_steps: usize,
    n_marks: usize,
    data: Vec<f64>,
}

impl MarkGrid {
    pub fn zeros(n_paths: usize, n_steps: usize, n_marks: usize) -> Self {
        Self {
            n_paths,
            n_steps,
            n_marks,
            data: vec![0.0; n_paths * n_steps * n_marks],
        }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_marks(&self) -> usize {
        self.n_marks
    }

    #[inline]
    fn offset(&self, path: usize, step: usize) -> usize {
        debug_assert!(path < self.n_paths && step < self.n_steps);
        (path * self.n_steps + step) * self.n_marks
    }

    #[inline]
    pub fn get(&self, path: usize, step: usize, mark: usize) -> f64 {
        debug_assert!(mark < self.n_marks);
        self.data[self.offset(path, step) + mark]
    }

    #[inline]
    pub fn set(&mut self, path: usize, step: usize, mark: usize, v: f64) {
        debug_assert!(mark < self.n_marks);
        let o = self.offset(path, step);
        self.data[o + mark] = v;
    }

    /// Mark vector at a fixed `(path, step)`.
    #[inline]
    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        let o = self.offset(path, step);
        &self.data[o..o + self.n_marks]
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, step: usize) -> &mut [f64] {
        let o = self.offset(path, step);
        &mut self.data[o..o + self.n_marks]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Disjoint per-path blocks of `n_steps * n_marks` values.
    pub fn paths_mut(&mut self) -> std::slice::ChunksMut<'_, f64> {
        self.data.chunks_mut(self.n_steps * self.n_marks)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_grid_round_trip() {
        let mut g = ScalarGrid::zeros(3, 4);
        g.set(2, 3, 7.5);
        g.set(0, 0, -1.0);
        assert_eq!(g.get(2, 3), 7.5);
        assert_eq!(g.get(0, 0), -1.0);
        assert_eq!(g.row(1), &[0.0; 4]);
        assert_eq!(g.column(3), vec![0.0, 0.0, 7.5]);
        assert_eq!(g.max_abs(), 7.5);
    }

    #[test]
    fn mark_grid_round_trip() {
        let mut g = MarkGrid::zeros(2, 3, 2);
        g.set(1, 2, 0, 4.0);
        g.set(1, 2, 1, -9.0);
        assert_eq!(g.at(1, 2), &[4.0, -9.0]);
        assert_eq!(g.at(0, 0), &[0.0, 0.0]);
        assert_eq!(g.max_abs(), 9.0);
    }

    #[test]
    fn rows_are_disjoint_slices() {
        let mut g = ScalarGrid::zeros(4, 2);
        for (p, row) in g.rows_mut().enumerate() {
            for v in row.iter_mut() {
                *v = p as f64;
            }
        }
        assert_eq!(g.row(3), &[3.0, 3.0]);
    }
}
