//! Registry of built-in benchmark problems.
//!
//! Each entry is small enough to have checkable structure: a degenerate
//! problem whose solution is constant, linear problems with closed-form
//! means, a weakly coupled system for contraction studies, and two
//! linear-quadratic control benchmarks whose optimal control and adjoint
//! trajectory are known in closed form.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::markspace::MarkSpace;
use crate::model::{
    AffineCoeff, Coefficients, ControlSet, LinearTerminal, LipschitzBudget, LqRunningCost, Oracle,
    Problem,
};

/// Names of the registered problems, in registry order.
pub fn builtin_names() -> &'static [&'static str] {
    &[
        "zero",
        "linear_forward",
        "linear_bsde",
        "coupled_small",
        "lq_jump",
        "lq_spike",
    ]
}

fn two_marks() -> MarkSpace {
    // Total intensity 1, two marks so jump-resolved quantities have width.
    MarkSpace::new(vec![-0.5, 1.0], vec![0.4, 0.6]).expect("static mark space")
}

fn zero_coeff() -> Arc<AffineCoeff> {
    Arc::new(AffineCoeff::default())
}

/// Constructs a benchmark problem by name.
///
/// * `zero` — all coefficients and terminal value vanish; the solution is
///   `X ≡ x0`, `Y ≡ 0` and the solver must reproduce it to round-off.
/// * `linear_forward` — uncontrolled forward equation `b = 0.1x`,
///   `σ = 0.2x`, `f = 0.2x` with `phi(x) = x`; the mean of `X_T` is
///   `x0·exp(0.1·T)` because the total intensity is 1.
/// * `linear_bsde` — trivial forward part; generator `g = 0.05·y` with
///   `phi ≡ 1` gives `Y_t = exp(0.05·(T-t))`.
/// * `coupled_small` — every coefficient carries weak backward coupling
///   (budget 0.1) so the fixed-point iteration contracts geometrically.
/// * `lq_jump` — linear-quadratic control with constant diffusion and no
///   jump coefficient: `b = u`, `σ = 0.2`, `g = u²/2 + 0.5x`,
///   `phi = 0.5x`. The optimal control is `u(t) = -p(t)` with
///   `p(t) = 0.5 + 0.5(T-t)`.
/// * `lq_spike` — the same benchmark with the control also driving the
///   diffusion (`σ = 0.2 + 0.8u`) and an active jump coefficient
///   (`f = 0.2x`); its oracle is unchanged, and a needle perturbation now
///   has a first-order diffusion effect, which the spike-order and
///   variational experiments need.
pub fn builtin_problem(name: &str) -> Result<Problem> {
    match name {
        "zero" => Ok(Problem {
            name: name.into(),
            x0: 1.0,
            horizon: 1.0,
            markspace: MarkSpace::new(vec![1.0], vec![1.0]).expect("static mark space"),
            coefficients: Coefficients {
                b: zero_coeff(),
                sigma: zero_coeff(),
                f: zero_coeff(),
                g: zero_coeff(),
                phi: Arc::new(LinearTerminal {
                    slope: 0.0,
                    offset: 0.0,
                }),
            },
            controls: ControlSet::Interval { min: 0.0, max: 0.0 },
            budget: LipschitzBudget::default(),
            oracle: None,
        }),

        "linear_forward" => Ok(Problem {
            name: name.into(),
            x0: 1.0,
            horizon: 1.0,
            markspace: two_marks(),
            coefficients: Coefficients {
                b: Arc::new(AffineCoeff {
                    x: 0.1,
                    ..AffineCoeff::default()
                }),
                sigma: Arc::new(AffineCoeff {
                    x: 0.2,
                    ..AffineCoeff::default()
                }),
                f: Arc::new(AffineCoeff {
                    x: 0.2,
                    ..AffineCoeff::default()
                }),
                g: zero_coeff(),
                phi: Arc::new(LinearTerminal {
                    slope: 1.0,
                    offset: 0.0,
                }),
            },
            controls: ControlSet::Interval { min: 0.0, max: 0.0 },
            budget: LipschitzBudget {
                x: 0.2,
                ..LipschitzBudget::default()
            },
            oracle: None,
        }),

        "linear_bsde" => Ok(Problem {
            name: name.into(),
            x0: 1.0,
            horizon: 1.0,
            markspace: two_marks(),
            coefficients: Coefficients {
                b: zero_coeff(),
                sigma: zero_coeff(),
                f: zero_coeff(),
                g: Arc::new(AffineCoeff {
                    y: 0.05,
                    ..AffineCoeff::default()
                }),
                phi: Arc::new(LinearTerminal {
                    slope: 0.0,
                    offset: 1.0,
                }),
            },
            controls: ControlSet::Interval { min: 0.0, max: 0.0 },
            budget: LipschitzBudget {
                y: 0.05,
                ..LipschitzBudget::default()
            },
            oracle: None,
        }),

        "coupled_small" => Ok(Problem {
            name: name.into(),
            x0: 1.0,
            horizon: 1.0,
            markspace: two_marks(),
            coefficients: Coefficients {
                b: Arc::new(AffineCoeff {
                    x: 0.1,
                    y: 0.08,
                    z: 0.05,
                    zt: 0.05,
                    ..AffineCoeff::default()
                }),
                sigma: Arc::new(AffineCoeff {
                    x: 0.1,
                    y: 0.05,
                    z: 0.05,
                    zt: 0.05,
                    constant: 0.2,
                    ..AffineCoeff::default()
                }),
                f: Arc::new(AffineCoeff {
                    x: 0.1,
                    y: 0.05,
                    zt: 0.05,
                    ..AffineCoeff::default()
                }),
                g: Arc::new(AffineCoeff {
                    x: 0.1,
                    y: 0.1,
                    z: 0.05,
                    zt: 0.05,
                    constant: 0.1,
                    ..AffineCoeff::default()
                }),
                phi: Arc::new(LinearTerminal {
                    slope: 1.0,
                    offset: 0.0,
                }),
            },
            controls: ControlSet::Interval { min: 0.0, max: 0.0 },
            budget: LipschitzBudget {
                x: 0.1,
                y: 0.1,
                z: 0.05,
                ztilde: 0.05,
            },
            oracle: None,
        }),

        "lq_jump" => Ok(lq_problem(name, 0.0, 0.0)),
        "lq_spike" => Ok(lq_problem(name, 0.8, 0.2)),

        _ => Err(Error::UnknownProblem {
            name: name.into(),
            available: builtin_names().join(", "),
        }),
    }
}

/// Linear-quadratic benchmark family: `b = u`, `σ = 0.2 + sigma_u·u`,
/// `f = jump_x·x`, `g = u²/2 + 0.5x`, `phi = 0.5x`.
///
/// The first-order adjoint solves a deterministic equation regardless of
/// `sigma_u` and `jump_x` (its driver is `0.5 + jump_x·q~` and `q~ ≡ 0`), so
/// `p(t) = 0.5 + 0.5·(T - t)` and the pointwise Hamiltonian gap is
/// `(u - u*)²/2` with `u*(t) = -p(t)`.
fn lq_problem(name: &str, sigma_u: f64, jump_x: f64) -> Problem {
    let horizon = 1.0;
    let state_weight = 0.5; // x-weight of the running cost
    let terminal_slope = 0.5;
    let ms = two_marks();
    let lambda = ms.total_intensity();
    let p_of_t =
        move |t: f64| -> f64 { terminal_slope + state_weight * lambda * (horizon - t) };
    Problem {
        name: name.into(),
        x0: 1.0,
        horizon,
        markspace: ms,
        coefficients: Coefficients {
            b: Arc::new(AffineCoeff {
                u: 1.0,
                ..AffineCoeff::default()
            }),
            sigma: Arc::new(AffineCoeff {
                constant: 0.2,
                u: sigma_u,
                ..AffineCoeff::default()
            }),
            f: Arc::new(AffineCoeff {
                x: jump_x,
                ..AffineCoeff::default()
            }),
            g: Arc::new(LqRunningCost { state_weight }),
            phi: Arc::new(LinearTerminal {
                slope: terminal_slope,
                offset: 0.0,
            }),
        },
        controls: ControlSet::Interval {
            min: -3.0,
            max: 3.0,
        },
        budget: LipschitzBudget {
            x: state_weight.max(jump_x),
            ..LipschitzBudget::default()
        },
        oracle: Some(Oracle {
            control: Arc::new(move |t, _x| -p_of_t(t)),
            adjoint_p: Some(Arc::new(p_of_t)),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoeffPoint;

    #[test]
    fn lq_oracle_is_consistent() {
        for name in ["lq_jump", "lq_spike"] {
            let p = builtin_problem(name).unwrap();
            let oracle = p.oracle.as_ref().expect("lq benchmarks carry an oracle");
            let padj = oracle.adjoint_p.as_ref().unwrap();
            // p(T) equals the terminal slope, p(0) = 0.5 + 0.5*T.
            assert!((padj(1.0) - 0.5).abs() < 1e-15);
            assert!((padj(0.0) - 1.0).abs() < 1e-15);
            // The oracle control is the Hamiltonian stationary point:
            // dH/du = u + p = 0 at u = -p (finite difference in u).
            let t = 0.3;
            let u_star = (oracle.control)(t, 1.0);
            assert!((u_star + padj(t)).abs() < 1e-15);
            let pt = |u: f64| CoeffPoint {
                t,
                x: 1.0,
                u,
                e: 1.0,
                ..CoeffPoint::default()
            };
            let h = 1e-6;
            let ham = |u: f64| {
                // g + p·b with q = 0 (the diffusion carries no adjoint load here)
                p.coefficients.g.value(&pt(u)) + padj(t) * p.coefficients.b.value(&pt(u))
            };
            let slope = (ham(u_star + h) - ham(u_star - h)) / (2.0 * h);
            assert!(
                slope.abs() < 1e-8,
                "oracle control of '{name}' is not stationary: dH/du = {slope}"
            );
            // Within the admissible interval.
            assert!(p.controls.contains(u_star));
        }
    }

    #[test]
    fn zero_problem_is_inert() {
        let p = builtin_problem("zero").unwrap();
        let pt = CoeffPoint {
            t: 0.5,
            x: 2.0,
            y: -1.0,
            z: 0.3,
            zt: 0.7,
            u: 0.0,
            e: 1.0,
        };
        assert_eq!(p.coefficients.b.value(&pt), 0.0);
        assert_eq!(p.coefficients.sigma.value(&pt), 0.0);
        assert_eq!(p.coefficients.f.value(&pt), 0.0);
        assert_eq!(p.coefficients.g.value(&pt), 0.0);
        assert_eq!(p.coefficients.phi.value(3.0), 0.0);
    }

    #[test]
    fn coupled_small_budget_is_tight() {
        let p = builtin_problem("coupled_small").unwrap();
        assert!((p.budget.coupling() - 0.1).abs() < 1e-15);
    }
}
