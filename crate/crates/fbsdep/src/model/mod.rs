//! Problem definitions: coefficient functions, control sets, terminal cost,
//! Lipschitz budgets, and a registry of built-in benchmark problems.
//!
//! A problem couples a forward equation
//! `dX = ∫b dν dt + ∫σ dν dW + ∫f dÑ` with a backward equation whose
//! generator is `g` and whose terminal value is `phi(X_T)`; the cost of a
//! control is the initial backward value. Coefficients are functions of
//! `(t, x, y, z, z~, u, e)` where `z`, `z~` are the diffusion and jump
//! components of the backward solution evaluated at the mark `e`. The jump
//! coefficient `f` must not read `z`; [`validate_problem`] enforces this
//! along with finite-difference consistency of all declared derivatives.

mod builtins;

pub use builtins::{builtin_names, builtin_problem};

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::markspace::MarkSpace;
use crate::noise::aux_uniform;

// ---------------------------------------------------------------------------
// Coefficient functions
// ---------------------------------------------------------------------------

/// Argument bundle for a coefficient evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoeffPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// Diffusion component of the backward solution at mark `e`.
    pub z: f64,
    /// Jump component of the backward solution at mark `e`.
    pub zt: f64,
    pub u: f64,
    pub e: f64,
}

/// Gradient with respect to the state arguments, ordered `(x, y, z, z~)`.
pub type Grad4 = [f64; 4];

/// Symmetric Hessian over the state arguments, same ordering.
pub type Hess4 = [[f64; 4]; 4];

/// A coefficient together with its first and second partial derivatives in
/// the state arguments `(x, y, z, z~)`. Derivatives in `t`, `u`, `e` are
/// never needed by the solvers.
pub trait CoeffFn: Send + Sync {
    fn value(&self, p: &CoeffPoint) -> f64;
    fn gradient(&self, p: &CoeffPoint) -> Grad4;
    /// Defaults to zero: correct for coefficients affine in the state.
    fn hessian(&self, _p: &CoeffPoint) -> Hess4 {
        [[0.0; 4]; 4]
    }
}

/// Coefficient affine in `(x, y, z, z~, u)` with an additive constant.
#[derive(Debug, Clone, Copy, Default)]
pub struct AffineCoeff {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub zt: f64,
    pub u: f64,
    pub constant: f64,
}

impl CoeffFn for AffineCoeff {
    fn value(&self, p: &CoeffPoint) -> f64 {
        self.constant + self.x * p.x + self.y * p.y + self.z * p.z + self.zt * p.zt + self.u * p.u
    }

    fn gradient(&self, _p: &CoeffPoint) -> Grad4 {
        [self.x, self.y, self.z, self.zt]
    }
}

/// Running cost `u²/2 + c·x` of the linear-quadratic benchmarks.
#[derive(Debug, Clone, Copy)]
pub struct LqRunningCost {
    pub state_weight: f64,
}

impl CoeffFn for LqRunningCost {
    fn value(&self, p: &CoeffPoint) -> f64 {
        0.5 * p.u * p.u + self.state_weight * p.x
    }

    fn gradient(&self, _p: &CoeffPoint) -> Grad4 {
        [self.state_weight, 0.0, 0.0, 0.0]
    }
}

/// Shared closure from a coefficient point to a value of type `T`.
pub type PointFn<T> = Arc<dyn Fn(&CoeffPoint) -> T + Send + Sync>;

/// Fully custom coefficient built from closures; used for ad-hoc problems in
/// tests and experiments. The Hessian closure is optional (zero when absent).
pub struct ClosureCoeff {
    pub value: PointFn<f64>,
    pub gradient: PointFn<Grad4>,
    pub hessian: Option<PointFn<Hess4>>,
}

impl CoeffFn for ClosureCoeff {
    fn value(&self, p: &CoeffPoint) -> f64 {
        (self.value)(p)
    }

    fn gradient(&self, p: &CoeffPoint) -> Grad4 {
        (self.gradient)(p)
    }

    fn hessian(&self, p: &CoeffPoint) -> Hess4 {
        match &self.hessian {
            Some(h) => h(p),
            None => [[0.0; 4]; 4],
        }
    }
}

// ---------------------------------------------------------------------------
// Terminal cost
// ---------------------------------------------------------------------------

/// Terminal map `phi` with its first two derivatives.
pub trait TerminalFn: Send + Sync {
    fn value(&self, x: f64) -> f64;
    fn dx(&self, x: f64) -> f64;
    fn dxx(&self, x: f64) -> f64;
}

/// `phi(x) = slope·x + offset`.
#[derive(Debug, Clone, Copy)]
pub struct LinearTerminal {
    pub slope: f64,
    pub offset: f64,
}

impl TerminalFn for LinearTerminal {
    fn value(&self, x: f64) -> f64 {
        self.slope * x + self.offset
    }

    fn dx(&self, _x: f64) -> f64 {
        self.slope
    }

    fn dxx(&self, _x: f64) -> f64 {
        0.0
    }
}

/// `phi(x) = quad·x²/2 + slope·x + offset`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticTerminal {
    pub quad: f64,
    pub slope: f64,
    pub offset: f64,
}

impl TerminalFn for QuadraticTerminal {
    fn value(&self, x: f64) -> f64 {
        0.5 * self.quad * x * x + self.slope * x + self.offset
    }

    fn dx(&self, x: f64) -> f64 {
        self.quad * x + self.slope
    }

    fn dxx(&self, _x: f64) -> f64 {
        self.quad
    }
}

// ---------------------------------------------------------------------------
// Controls, budget, problem
// ---------------------------------------------------------------------------

/// Admissible control values. Either a closed interval or a finite list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ControlSet {
    Interval { min: f64, max: f64 },
    Finite(Vec<f64>),
}

impl ControlSet {
    pub fn contains(&self, u: f64) -> bool {
        match self {
            ControlSet::Interval { min, max } => u >= *min && u <= *max,
            ControlSet::Finite(vs) => vs.contains(&u),
        }
    }

    pub fn clamp(&self, u: f64) -> f64 {
        match self {
            ControlSet::Interval { min, max } => u.clamp(*min, *max),
            ControlSet::Finite(vs) => {
                let mut best = vs[0];
                for &v in vs {
                    if (v - u).abs() < (best - u).abs() {
                        best = v;
                    }
                }
                best
            }
        }
    }

    /// Representative sample: `n` evenly spaced values of an interval, or the
    /// full list of a finite set.
    pub fn sample(&self, n: usize) -> Vec<f64> {
        match self {
            ControlSet::Interval { min, max } => {
                if n <= 1 || min == max {
                    vec![0.5 * (min + max)]
                } else {
                    (0..n)
                        .map(|i| min + (max - min) * i as f64 / (n - 1) as f64)
                        .collect()
                }
            }
            ControlSet::Finite(vs) => vs.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Interval { min, max } => {
                if !min.is_finite() || !max.is_finite() || min > max {
                    return Err(Error::InvalidInput(format!(
                        "control interval [{min}, {max}] is not a valid closed interval"
                    )));
                }
            }
            ControlSet::Finite(vs) => {
                if vs.is_empty() {
                    return Err(Error::InvalidInput("finite control set is empty".into()));
                }
                if vs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(
                        "finite control set contains a non-finite value".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Declared Lipschitz bounds of the coefficients in each state argument.
/// The coupling strength `max(y, z, z~)` governs how strongly the backward
/// solution feeds back into the forward equation.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LipschitzBudget {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub ztilde: f64,
}

impl LipschitzBudget {
    /// The small-coupling constant: largest budget among the backward
    /// arguments `(y, z, z~)`.
    pub fn coupling(&self) -> f64 {
        self.y.max(self.z).max(self.ztilde)
    }
}

/// The four coefficient functions and the terminal map.
#[derive(Clone)]
pub struct Coefficients {
    /// Drift integrand: enters as `∫ b dν dt`.
    pub b: Arc<dyn CoeffFn>,
    /// Diffusion integrand: enters as `(∫ σ dν) dW`.
    pub sigma: Arc<dyn CoeffFn>,
    /// Jump integrand: enters against the compensated measure; must not
    /// read the `z` argument.
    pub f: Arc<dyn CoeffFn>,
    /// Generator of the backward equation.
    pub g: Arc<dyn CoeffFn>,
    /// Terminal cost.
    pub phi: Arc<dyn TerminalFn>,
}

/// Known closed-form artifacts of a benchmark, when available.
#[derive(Clone)]
pub struct Oracle {
    /// Optimal feedback control `(t, x) -> u`.
    pub control: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// Deterministic first-order adjoint trajectory `t -> p(t)`.
    pub adjoint_p: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

/// A complete control problem instance.
#[derive(Clone)]
pub struct Problem {
    pub name: String,
    pub x0: f64,
    pub horizon: f64,
    pub markspace: MarkSpace,
    pub coefficients: Coefficients,
    pub controls: ControlSet,
    pub budget: LipschitzBudget,
    /// Closed-form benchmark data, if the problem has any.
    pub oracle: Option<Oracle>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("markspace", &self.markspace)
            .field("controls", &self.controls)
            .field("budget", &self.budget)
            .field("oracle", &self.oracle.is_some())
            .finish_non_exhaustive()
    }
}

impl Problem {
    /// Optimal control of the oracle, or an error for problems without one.
    pub fn oracle_control(&self) -> Result<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>> {
        self.oracle
            .as_ref()
            .map(|o| o.control.clone())
            .ok_or_else(|| {
                Error::InvalidInput(format!("problem '{}' has no control oracle", self.name))
            })
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Outcome of the consistency audit of a problem definition.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub problem: String,
    pub samples: usize,
    /// Worst relative mismatch between declared gradients and central
    /// finite differences of the values, over all coefficients and samples.
    pub max_gradient_mismatch: f64,
    /// Worst mismatch between declared Hessians and finite differences of
    /// the declared gradients.
    pub max_hessian_mismatch: f64,
    /// Largest observed `|∂f/∂z|`; must be zero up to tolerance.
    pub f_z_dependence: f64,
    /// Largest observed difference ratios per state argument `(x, y, z, z~)`
    /// across all coefficients.
    pub observed_lipschitz: [f64; 4],
    /// Whether the observed ratios stay within the declared budget.
    pub budget_ok: bool,
    pub warnings: Vec<String>,
}

const FD_TOL: f64 = 1e-5;

fn sample_point(problem: &Problem, seed: u64, i: u64) -> CoeffPoint {
    let span = 3.0;
    let draw = |tag: u64| -> f64 { span * (2.0 * aux_uniform(seed, tag, i) - 1.0) };
    let controls = problem.controls.sample(17);
    let cu = controls[(aux_uniform(seed, 40, i) * controls.len() as f64) as usize % controls.len()];
    let marks = problem.markspace.marks();
    let e = marks[(aux_uniform(seed, 41, i) * marks.len() as f64) as usize % marks.len()];
    CoeffPoint {
        t: problem.horizon * aux_uniform(seed, 42, i),
        x: problem.x0 + draw(43),
        y: draw(44),
        z: draw(45),
        zt: draw(46),
        u: cu,
        e,
    }
}

fn with_arg(p: &CoeffPoint, arg: usize, v: f64) -> CoeffPoint {
    let mut q = *p;
    match arg {
        0 => q.x = v,
        1 => q.y = v,
        2 => q.z = v,
        _ => q.zt = v,
    }
    q
}

fn arg_of(p: &CoeffPoint, arg: usize) -> f64 {
    match arg {
        0 => p.x,
        1 => p.y,
        2 => p.z,
        _ => p.zt,
    }
}

/// Audits a problem definition at `samples` pseudo-random points:
/// declared gradients against central finite differences of the values,
/// declared Hessians against finite differences of the gradients,
/// `z`-independence of the jump coefficient, and the observed difference
/// ratios against the declared Lipschitz budget.
///
/// Derivative mismatches and `z`-dependence of `f` are hard failures;
/// a budget excess is only recorded in the report.
pub fn validate_problem(problem: &Problem, samples: usize, seed: u64) -> Result<ValidationReport> {
    problem.controls.validate()?;
    if !problem.x0.is_finite() || !problem.horizon.is_finite() || problem.horizon <= 0.0 {
        return Err(Error::Validation(format!(
            "initial state {} / horizon {} invalid",
            problem.x0, problem.horizon
        )));
    }

    let coeffs: [(&str, &Arc<dyn CoeffFn>); 4] = [
        ("b", &problem.coefficients.b),
        ("sigma", &problem.coefficients.sigma),
        ("f", &problem.coefficients.f),
        ("g", &problem.coefficients.g),
    ];

    let mut max_grad = 0.0f64;
    let mut max_hess = 0.0f64;
    let mut fz = 0.0f64;
    let mut lipschitz = [0.0f64; 4];
    let mut warnings = Vec::new();

    for i in 0..samples {
        let pt = sample_point(problem, seed, i as u64);
        for (name, c) in &coeffs {
            let value = c.value(&pt);
            if !value.is_finite() {
                return Err(Error::Validation(format!(
                    "{name} is not finite at a sampled point (t={}, x={})",
                    pt.t, pt.x
                )));
            }
            let grad = c.gradient(&pt);
            let hess = c.hessian(&pt);
            for arg in 0..4 {
                let a = arg_of(&pt, arg);
                let h = 1e-6 * (1.0 + a.abs());
                let up = c.value(&with_arg(&pt, arg, a + h));
                let dn = c.value(&with_arg(&pt, arg, a - h));
                let fd = (up - dn) / (2.0 * h);
                let mismatch = (fd - grad[arg]).abs() / (1.0 + value.abs());
                max_grad = max_grad.max(mismatch);
                if mismatch > FD_TOL {
                    return Err(Error::Validation(format!(
                        "declared ∂{name}/∂{} = {} disagrees with finite difference {} \
                         (relative mismatch {mismatch:.2e} > {FD_TOL:.0e})",
                        ["x", "y", "z", "zt"][arg],
                        grad[arg],
                        fd
                    )));
                }
                // Observed local difference ratio for the budget audit.
                let ratio = fd.abs();
                if ratio > lipschitz[arg] {
                    lipschitz[arg] = ratio;
                }
                // Hessian row against gradient differences.
                let hfd = 1e-4 * (1.0 + a.abs());
                let gup = c.gradient(&with_arg(&pt, arg, a + hfd));
                let gdn = c.gradient(&with_arg(&pt, arg, a - hfd));
                for col in 0..4 {
                    let fd2 = (gup[col] - gdn[col]) / (2.0 * hfd);
                    let mismatch2 = (fd2 - hess[arg][col]).abs() / (1.0 + value.abs());
                    max_hess = max_hess.max(mismatch2);
                    if mismatch2 > FD_TOL {
                        return Err(Error::Validation(format!(
                            "declared ∂²{name}/∂{}∂{} = {} disagrees with finite difference {} \
                             (relative mismatch {mismatch2:.2e} > {FD_TOL:.0e})",
                            ["x", "y", "z", "zt"][arg],
                            ["x", "y", "z", "zt"][col],
                            hess[arg][col],
                            fd2
                        )));
                    }
                }
            }
            if *name == "f" {
                // Declared and finite-difference z-sensitivity must vanish.
                let declared = c.gradient(&pt)[2].abs();
                let h = 1e-4 * (1.0 + pt.z.abs());
                let up = c.value(&with_arg(&pt, 2, pt.z + h));
                let dn = c.value(&with_arg(&pt, 2, pt.z - h));
                let observed = ((up - dn) / (2.0 * h)).abs();
                fz = fz.max(declared).max(observed);
                if fz > FD_TOL {
                    return Err(Error::Validation(format!(
                        "jump coefficient depends on z (|∂f/∂z| = {fz:.2e}); \
                         the jump integrand must be z-free"
                    )));
                }
            }
        }
        // Terminal derivatives.
        let phi = &problem.coefficients.phi;
        let h = 1e-6 * (1.0 + pt.x.abs());
        let fd = (phi.value(pt.x + h) - phi.value(pt.x - h)) / (2.0 * h);
        let mismatch = (fd - phi.dx(pt.x)).abs() / (1.0 + phi.value(pt.x).abs());
        if mismatch > FD_TOL {
            return Err(Error::Validation(format!(
                "terminal derivative mismatch {mismatch:.2e} at x = {}",
                pt.x
            )));
        }
        let h2 = 1e-4 * (1.0 + pt.x.abs());
        let fd2 = (phi.dx(pt.x + h2) - phi.dx(pt.x - h2)) / (2.0 * h2);
        let mismatch2 = (fd2 - phi.dxx(pt.x)).abs() / (1.0 + phi.value(pt.x).abs());
        if mismatch2 > FD_TOL {
            return Err(Error::Validation(format!(
                "terminal second derivative mismatch {mismatch2:.2e} at x = {}",
                pt.x
            )));
        }
        max_grad = max_grad.max(mismatch);
        max_hess = max_hess.max(mismatch2);
    }

    let budget = [
        problem.budget.x,
        problem.budget.y,
        problem.budget.z,
        problem.budget.ztilde,
    ];
    let slack = 1e-8;
    let budget_ok = (0..4).all(|i| lipschitz[i] <= budget[i] + slack);
    if !budget_ok {
        warnings.push(format!(
            "observed difference ratios {:?} exceed the declared budget {:?}",
            lipschitz, budget
        ));
    }

    Ok(ValidationReport {
        problem: problem.name.clone(),
        samples,
        max_gradient_mismatch: max_grad,
        max_hessian_mismatch: max_hess,
        f_z_dependence: fz,
        observed_lipschitz: lipschitz,
        budget_ok,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_validates() {
        for name in builtin_names() {
            let p = builtin_problem(name).unwrap();
            let report = validate_problem(&p, 64, 9).unwrap_or_else(|e| {
                panic!("builtin '{name}' failed its own validation: {e}");
            });
            assert!(
                report.max_gradient_mismatch <= FD_TOL,
                "gradient mismatch too large on '{name}'"
            );
            assert!(
                report.budget_ok,
                "builtin '{name}' exceeds its own Lipschitz budget: {:?}",
                report.warnings
            );
        }
    }

    #[test]
    fn unknown_problem_lists_available() {
        let msg = match builtin_problem("no_such_benchmark") {
            Err(e) => e.to_string(),
            Ok(_) => panic!("unknown name must not resolve"),
        };
        assert!(msg.contains("no_such_benchmark"));
        assert!(
            msg.contains("lq_jump") && msg.contains("linear_bsde"),
            "error should list the registry: {msg}"
        );
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut p = builtin_problem("linear_forward").unwrap();
        p.coefficients.b = Arc::new(ClosureCoeff {
            value: Arc::new(|pt: &CoeffPoint| 0.1 * pt.x),
            gradient: Arc::new(|_| [0.3, 0.0, 0.0, 0.0]), // deliberately wrong
            hessian: None,
        });
        let err = validate_problem(&p, 16, 1).unwrap_err();
        assert!(
            err.to_string().contains("∂b/∂x"),
            "should point at the broken partial: {err}"
        );
    }

    #[test]
    fn wrong_hessian_is_caught() {
        let mut p = builtin_problem("linear_forward").unwrap();
        p.coefficients.g = Arc::new(ClosureCoeff {
            value: Arc::new(|pt: &CoeffPoint| 0.5 * pt.x * pt.x),
            gradient: Arc::new(|pt: &CoeffPoint| [pt.x, 0.0, 0.0, 0.0]),
            hessian: None, // should be 1 in the (x,x) slot
        });
        let err = validate_problem(&p, 16, 1).unwrap_err();
        assert!(
            err.to_string().contains("∂²g"),
            "should point at the missing curvature: {err}"
        );
    }

    #[test]
    fn jump_coefficient_reading_z_is_rejected() {
        let mut p = builtin_problem("linear_forward").unwrap();
        p.coefficients.f = Arc::new(AffineCoeff {
            z: 0.2,
            ..AffineCoeff::default()
        });
        let err = validate_problem(&p, 16, 1).unwrap_err();
        assert!(
            err.to_string().contains("z-free"),
            "z-dependence of the jump coefficient must be rejected: {err}"
        );
    }

    #[test]
    fn budget_excess_is_reported_not_fatal() {
        let mut p = builtin_problem("linear_forward").unwrap();
        p.budget = LipschitzBudget {
            x: 1e-6,
            ..LipschitzBudget::default()
        };
        let report = validate_problem(&p, 16, 1).unwrap();
        assert!(!report.budget_ok);
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn control_set_sampling() {
        let interval = ControlSet::Interval { min: -1.0, max: 1.0 };
        let s = interval.sample(5);
        assert_eq!(s, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(interval.contains(0.3) && !interval.contains(1.5));
        assert_eq!(interval.clamp(2.0), 1.0);

        let degenerate = ControlSet::Interval { min: 0.0, max: 0.0 };
        assert_eq!(degenerate.sample(41), vec![0.0]);

        let finite = ControlSet::Finite(vec![-1.0, 0.5]);
        assert_eq!(finite.sample(10), vec![-1.0, 0.5]);
        assert_eq!(finite.clamp(0.4), 0.5);

        assert!(ControlSet::Interval { min: 1.0, max: 0.0 }.validate().is_err());
        assert!(ControlSet::Finite(vec![]).validate().is_err());
    }

    #[test]
    fn coupling_constant_is_max_of_backward_budgets() {
        let b = LipschitzBudget {
            x: 9.0,
            y: 0.1,
            z: 0.05,
            ztilde: 0.07,
        };
        assert_eq!(b.coupling(), 0.1);
    }
}
