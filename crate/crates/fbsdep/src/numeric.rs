//! Small numeric helpers shared across modules: compensated summation and
//! ordinary-least-squares sample statistics.
//!
//! Reductions throughout the crate run in a fixed (path-major, left-to-right)
//! order with Kahan compensation so that results do not depend on thread
//! count or chunking.

/// Kahan-Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Left-to-right compensated sum of a slice.
pub fn kahan_sum(xs: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Sample mean and standard error of the mean (compensated sums).
/// Returns `(mean, se)`; `se` is 0 for fewer than two samples.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = kahan_sum(xs) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let mut sq = KahanSum::new();
    for &x in xs {
        let d = x - mean;
        sq.add(d * d);
    }
    let var = sq.value() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Least-squares line fit `y ≈ a + b x`, returning `(intercept, slope, r²)`.
pub fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len(), "line_fit needs paired samples");
    let n = x.len() as f64;
    let mx = kahan_sum(x) / n;
    let my = kahan_sum(y) / n;
    let (mut sxx, mut sxy, mut syy) = (KahanSum::new(), KahanSum::new(), KahanSum::new());
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        sxx.add(dx * dx);
        sxy.add(dx * dy);
        syy.add(dy * dy);
    }
    let sxx = sxx.value();
    let sxy = sxy.value();
    let syy = syy.value();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if sxx > 0.0 && syy > 0.0 {
        (sxy * sxy) / (sxx * syy)
    } else {
        1.0
    };
    (intercept, slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_catastrophic_cancellation() {
        // Naive summation loses the small terms entirely.
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(kahan_sum(&xs), 2.0, "compensation must retain the 1.0s");
    }

    #[test]
    fn mean_se_matches_closed_form() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let (m, se) = mean_se(&xs);
        assert!((m - 2.5).abs() < 1e-15);
        // sample variance 5/3, se = sqrt(5/3/4)
        assert!((se - (5.0 / 12.0f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn line_fit_exact_on_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (a, b, r2) = line_fit(&x, &y);
        assert!((a - 1.0).abs() < 1e-12);
        assert!((b - 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
