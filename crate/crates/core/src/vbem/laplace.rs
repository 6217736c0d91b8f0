//! Newton mode finding with a Gaussian approximation at the mode.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GaussianBelief;
use crate::linalg::{min_eigenvalue, spd_inverse, symmetrize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonSettings {
    /// Convergence threshold on the gradient norm.
    pub tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
}

impl NewtonSettings {
    pub const ESTEP: NewtonSettings = NewtonSettings {
        tol: 1e-8,
        max_iters: 100,
        max_halvings: 20,
    };
    pub const MSTEP: NewtonSettings = NewtonSettings {
        tol: 1e-6,
        max_iters: 100,
        max_halvings: 20,
    };
}

/// Value, gradient and Hessian of a log-density.
#[derive(Debug)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Mode of a result from [`newton_maximize`] plus the negative Hessian there.
#[derive(Debug)]
pub struct Mode {
    pub point: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub iterations: usize,
}

/// Maximizes a concave objective with damped Newton steps.
///
/// `objective(x, false)` is only asked for the value (line search), so
/// callers may leave gradient and Hessian empty there.
pub fn newton_maximize<F>(objective: F, init: DVector<f64>, settings: &NewtonSettings) -> Result<Mode>
where
    F: Fn(&DVector<f64>, bool) -> Evaluation,
{
    let mut x = init;
    let mut eval = objective(&x, true);
    for iter in 0..=settings.max_iters {
        if !eval.value.is_finite() || eval.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "objective not finite at newton iterate {iter}: {:?}",
                x.as_slice()
            )));
        }
        let mut neg_h = -&eval.hessian;
        symmetrize(&mut neg_h);
        let grad_norm = eval.gradient.norm();
        if grad_norm < settings.tol {
            return finish(x, neg_h, iter);
        }
        if iter == settings.max_iters {
            return Err(Error::NoConvergence {
                iters: iter,
                grad_norm,
                iterate: x.as_slice().to_vec(),
            });
        }
        let chol = match neg_h.clone().cholesky() {
            Some(c) => c,
            None => {
                check_concave(&neg_h)?;
                crate::linalg::cholesky_jittered(&neg_h)?
            }
        };
        let step = chol.solve(&eval.gradient);
        // The gradient can plateau just above `tol` from rounding once the
        // Newton step is below the resolution of `x`.
        if step.norm() <= f64::EPSILON * (1.0 + x.norm()) {
            return finish(x, neg_h, iter);
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.max_halvings {
            let candidate = &x + &step * scale;
            let trial = objective(&candidate, false);
            let slack = 1e-12 * (1.0 + eval.value.abs());
            if trial.value.is_finite() && trial.value >= eval.value - slack {
                x = candidate;
                eval = objective(&x, true);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iters: iter,
                grad_norm,
                iterate: x.as_slice().to_vec(),
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

fn check_concave(neg_h: &DMatrix<f64>) -> Result<()> {
    let lo = min_eigenvalue(neg_h);
    let scale = neg_h.diagonal().amax().max(1.0);
    if lo < -1e-10 * scale {
        return Err(Error::NonConcave(format!(
            "negative Hessian has eigenvalue {lo:.3e}"
        )));
    }
    Ok(())
}

fn finish(x: DVector<f64>, neg_h: DMatrix<f64>, iterations: usize) -> Result<Mode> {
    check_concave(&neg_h)?;
    Ok(Mode {
        point: x,
        precision: neg_h,
        iterations,
    })
}

/// Gaussian approximation `N(mode, (−∇² f(mode))⁻¹)` of the density `exp f`.
pub fn laplace_gaussianize<F>(objective: F, init: DVector<f64>, settings: &NewtonSettings) -> Result<GaussianBelief>
where
    F: Fn(&DVector<f64>, bool) -> Evaluation,
{
    let mode = newton_maximize(objective, init, settings)?;
    let cov = spd_inverse(&mode.precision)?;
    Ok(GaussianBelief {
        mean: mode.point,
        cov,
    })
}

/// Central finite-difference Jacobian of a vector function, used to audit Hessians.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, n);
    for c in 0..n {
        let h = step * (1.0 + x[c].abs());
        let mut plus = x.clone();
        plus[c] += h;
        let mut minus = x.clone();
        minus[c] -= h;
        let col = (f(&plus) - f(&minus)) / (2.0 * h);
        jac.set_column(c, &col);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_poisson_prior(y: f64) -> impl Fn(&DVector<f64>, bool) -> Evaluation {
        move |x, _| {
            let z = x[0];
            Evaluation {
                value: y * z - z.exp() - 0.5 * z * z,
                gradient: DVector::from_element(1, y - z.exp() - z),
                hessian: DMatrix::from_element(1, 1, -z.exp() - 1.0),
            }
        }
    }

    #[test]
    fn gaussian_objective_converges_in_one_step() {
        let mu = DVector::from_vec(vec![1.0, -2.0]);
        let prec = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (mu2, p2) = (mu.clone(), prec.clone());
        let obj = move |x: &DVector<f64>, _| {
            let d = x - &mu2;
            Evaluation {
                value: -0.5 * d.dot(&(&p2 * &d)),
                gradient: -(&p2 * &d),
                hessian: -p2.clone(),
            }
        };
        let mode = newton_maximize(&obj, DVector::zeros(2), &NewtonSettings::ESTEP).unwrap();
        assert_eq!(mode.iterations, 1);
        let g = laplace_gaussianize(&obj, DVector::zeros(2), &NewtonSettings::ESTEP).unwrap();
        assert!((g.mean - mu).amax() < 1e-12);
        assert!((g.cov - prec.try_inverse().unwrap()).amax() < 1e-12);
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn scalar_poisson_with_one_count() {
        // The mode solves 1 − eᶻ − z = 0, whose root is z* = 0.
        let g = laplace_gaussianize(scalar_poisson_prior(1.0), DVector::from_element(1, 2.0), &NewtonSettings::ESTEP).unwrap();
        assert!(g.mean[0].abs() < 1e-8, "{}", g.mean[0]);
        assert!((g.cov[(0, 0)] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn scalar_poisson_with_three_counts() {
        let g = laplace_gaussianize(scalar_poisson_prior(3.0), DVector::zeros(1), &NewtonSettings::ESTEP).unwrap();
        let root = bisect(|z| 3.0 - z.exp() - z, 0.0, 2.0);
        assert!((g.mean[0] - root).abs() < 1e-8, "{} vs {root}", g.mean[0]);
        assert!((g.cov[(0, 0)] - 1.0 / (root.exp() + 1.0)).abs() < 1e-8);
    }

    #[test]
    fn scalar_poisson_with_zero_count() {
        let g = laplace_gaussianize(scalar_poisson_prior(0.0), DVector::from_element(1, 3.0), &NewtonSettings::ESTEP).unwrap();
        // Omega constant: W(1) = 0.567143...
        assert!((g.mean[0] + 0.567_143_290_409_783_8).abs() < 1e-9);
    }

    #[test]
    fn convex_objective_is_rejected() {
        let obj = |x: &DVector<f64>, _| Evaluation {
            value: 0.5 * x[0] * x[0] + x[0],
            gradient: DVector::from_element(1, x[0] + 1.0),
            hessian: DMatrix::from_element(1, 1, 1.0),
        };
        let err = newton_maximize(obj, DVector::zeros(1), &NewtonSettings::ESTEP);
        assert!(matches!(err, Err(Error::NonConcave(_))));
    }

    #[test]
    fn iteration_budget_reports_iterate() {
        let settings = NewtonSettings {
            tol: 1e-14,
            max_iters: 1,
            max_halvings: 20,
        };
        let err = newton_maximize(scalar_poisson_prior(50.0), DVector::zeros(1), &settings).unwrap_err();
        match err {
            Error::NoConvergence { iters, iterate, .. } => {
                assert_eq!(iters, 1);
                assert_eq!(iterate.len(), 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn far_start_uses_line_search() {
        let g = laplace_gaussianize(scalar_poisson_prior(2.0), DVector::from_element(1, 40.0), &NewtonSettings::ESTEP).unwrap();
        assert!((2.0 - g.mean[0].exp() - g.mean[0]).abs() < 1e-8);
    }
}
