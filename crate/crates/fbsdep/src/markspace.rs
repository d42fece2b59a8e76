//! Finite mark space for the jump noise.
//!
//! The jump component of the driving noise is a Poisson random measure on a
//! mark set `E`. Here `E` is a finite list of real marks `e_j`, and the
//! intensity measure assigns a strictly positive weight `nu_j` to each mark.
//! Mark-indexed quantities (jump coefficients, the jump components `Z~` of
//! backward solutions, adjoint gains) are just vectors aligned with the mark
//! list, integrals against the intensity measure are weighted sums, and the
//! `L²(nu)` norm is the square-rooted weighted sum of squares.
//!
//! The total mass `lambda = Σ_j nu_j` is the arrival intensity of the jump
//! process; a mark-`j` jump arrives with probability `nu_j / lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::KahanSum;

/// Finite mark set with its intensity weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkSpace {
    marks: Vec<f64>,
    weights: Vec<f64>,
    total_intensity: f64,
}

/// A function on the mark space: one value per mark, in mark order.
pub type MarkVector<'a> = &'a [f64];

impl MarkSpace {
    /// Builds a mark space from marks and per-mark intensity weights.
    ///
    /// Requirements: the lists are non-empty, of equal length, all values are
    /// finite, and every weight is strictly positive.
    pub fn new(marks: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if marks.is_empty() {
            return Err(Error::InvalidInput("mark space needs at least one mark".into()));
        }
        if marks.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} marks vs {} weights",
                marks.len(),
                weights.len()
            )));
        }
        for (j, (&e, &w)) in marks.iter().zip(&weights).enumerate() {
            if !e.is_finite() {
                return Err(Error::InvalidInput(format!("mark {j} is not finite: {e}")));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "weight {j} must be strictly positive and finite, got {w}"
                )));
            }
        }
        let mut total = KahanSum::new();
        for &w in &weights {
            total.add(w);
        }
        Ok(Self {
            marks,
            weights,
            total_intensity: total.value(),
        })
    }

    /// Single-mark space with unit intensity; handy for tests.
    pub fn single(mark: f64) -> Self {
        Self::new(vec![mark], vec![1.0]).expect("single finite mark is always valid")
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty mark lists
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mark(&self, j: usize) -> f64 {
        self.marks[j]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    /// Total intensity `lambda = Σ_j nu_j`.
    pub fn total_intensity(&self) -> f64 {
        self.total_intensity
    }

    /// Integral of a mark vector against the intensity measure:
    /// `Σ_j nu_j v_j`, accumulated left to right with compensation.
    pub fn integrate(&self, v: MarkVector) -> f64 {
        debug_assert_eq!(v.len(), self.len(), "mark vector length mismatch");
        let mut acc = KahanSum::new();
        for (&w, &x) in self.weights.iter().zip(v) {
            acc.add(w * x);
        }
        acc.value()
    }

    /// `L²(nu)` norm: `sqrt(Σ_j nu_j v_j²)`.
    pub fn l2_norm(&self, v: MarkVector) -> f64 {
        self.l2_norm_sq(v).sqrt()
    }

    /// Squared `L²(nu)` norm, without the final square root.
    pub fn l2_norm_sq(&self, v: MarkVector) -> f64 {
        debug_assert_eq!(v.len(), self.len(), "mark vector length mismatch");
        let mut acc = KahanSum::new();
        for (&w, &x) in self.weights.iter().zip(v) {
            acc.add(w * x * x);
        }
        acc.value()
    }

    /// Integrate a function of `(mark index, mark value)` against the
    /// intensity measure: `Σ_j nu_j f(j, e_j)`.
    ///
    /// Plain left-to-right accumulation; intended for the per-mark coefficient
    /// loops of the solvers where the mark count is small.
    pub fn integrate_fn(&self, mut f: impl FnMut(usize, f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.len() {
            acc += self.weights[j] * f(j, self.marks[j]);
        }
        acc
    }

    /// `L²(nu)` inner product `Σ_j nu_j u_j v_j`.
    pub fn inner(&self, u: MarkVector, v: MarkVector) -> f64 {
        debug_assert_eq!(u.len(), self.len());
        debug_assert_eq!(v.len(), self.len());
        let mut acc = KahanSum::new();
        for j in 0..self.len() {
            acc.add(self.weights[j] * u[j] * v[j]);
        }
        acc.value()
    }
}
