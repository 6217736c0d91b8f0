//! Hyperparameter updates: kernel amplitude and length-scale by minimizing the
//! KL divergence from the parameter posterior to the GP prior, ridge precisions
//! in closed form.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gp::{kl_kronecker, scalar_cross_kernel, KroneckerMoments};
use crate::model::Hyperparams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperOptSettings {
    pub sigma2_bounds: (f64, f64),
    pub tau2_bounds: (f64, f64),
    pub max_iters: usize,
    /// Threshold on the projected gradient in log coordinates.
    pub grad_tol: f64,
    /// Update `σ²` and `τ²`.
    pub learn_kernel: bool,
    /// Update ridge precisions of Gaussian parameter blocks.
    pub learn_ridge: bool,
}

impl Default for HyperOptSettings {
    fn default() -> Self {
        Self {
            sigma2_bounds: (1e-6, 1e4),
            tau2_bounds: (0.25, 1e6),
            max_iters: 100,
            grad_tol: 1e-6,
            learn_kernel: true,
            learn_ridge: true,
        }
    }
}

/// `KL(q ‖ N(μ₀, K(σ², τ²) ⊗ I_m))` for the posterior summarized by `moments`.
pub fn kernel_objective(moments: &KroneckerMoments, trial_ids: &[u32], sigma2: f64, tau2: f64, eps: f64) -> Result<f64> {
    let mut hyper = Hyperparams::stationary();
    hyper.sigma2 = sigma2;
    hyper.tau2 = tau2;
    hyper.eps = eps;
    let k = scalar_cross_kernel(&hyper, trial_ids, trial_ids);
    kl_kronecker(moments, &k)
}

/// Minimizes the kernel KL over `(log σ², log τ²)` within bounds; `ε` stays fixed.
///
/// On optimizer failure the current values are kept and a warning is logged.
pub fn update_hyperparams(
    moments: &KroneckerMoments,
    trial_ids: &[u32],
    current: &Hyperparams,
    settings: &HyperOptSettings,
) -> Hyperparams {
    let mut next = current.clone();
    if !settings.learn_kernel || current.sigma2 == 0.0 {
        return next;
    }
    let eps = current.eps;
    let objective = |theta: &[f64; 2]| {
        kernel_objective(moments, trial_ids, theta[0].exp(), theta[1].exp(), eps).unwrap_or(f64::INFINITY)
    };
    let lo = [settings.sigma2_bounds.0.ln(), settings.tau2_bounds.0.ln()];
    let hi = [settings.sigma2_bounds.1.ln(), settings.tau2_bounds.1.ln()];
    let start = [current.sigma2.ln(), current.tau2.ln()];
    match projected_bfgs(objective, start, lo, hi, settings.max_iters, settings.grad_tol) {
        Some(theta) => {
            next.sigma2 = theta[0].exp();
            next.tau2 = theta[1].exp();
        }
        None => log::warn!("hyperparameter optimization failed; keeping sigma2={}, tau2={}", current.sigma2, current.tau2),
    }
    next
}

/// Closed-form ridge precision `n / (‖μ‖² + tr Σ)` of an `n`-parameter Gaussian block.
pub fn ridge_update(mean_sq_norm: f64, cov_trace: f64, n: usize) -> f64 {
    (n as f64 / (mean_sq_norm + cov_trace).max(1e-12)).clamp(1e-6, 1e6)
}

fn numerical_gradient<F: Fn(&[f64; 2]) -> f64>(f: &F, x: &[f64; 2]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for i in 0..2 {
        let h = 1e-5 * (1.0 + x[i].abs());
        let mut plus = *x;
        plus[i] += h;
        let mut minus = *x;
        minus[i] -= h;
        g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

fn clamp(x: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> [f64; 2] {
    [x[0].clamp(lo[0], hi[0]), x[1].clamp(lo[1], hi[1])]
}

/// Box-constrained BFGS with numerical gradients and Armijo backtracking.
fn projected_bfgs<F: Fn(&[f64; 2]) -> f64>(f: F, x0: [f64; 2], lo: [f64; 2], hi: [f64; 2], max_iters: usize, tol: f64) -> Option<[f64; 2]> {
    let mut x = clamp(x0, lo, hi);
    let mut fx = f(&x);
    if !fx.is_finite() {
        return None;
    }
    let mut g = numerical_gradient(&f, &x);
    let mut h_inv = DMatrix::<f64>::identity(2, 2);
    for _ in 0..max_iters {
        let free: Vec<bool> = (0..2)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let pg: Vec<f64> = (0..2).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        if pg.iter().map(|v| v * v).sum::<f64>().sqrt() < tol {
            return Some(x);
        }
        let mut dir = [0.0; 2];
        for i in 0..2 {
            if free[i] {
                dir[i] = -(h_inv[(i, 0)] * pg[0] + h_inv[(i, 1)] * pg[1]);
            }
        }
        if dir[0] * pg[0] + dir[1] * pg[1] >= 0.0 {
            dir = [-pg[0], -pg[1]];
            h_inv = DMatrix::identity(2, 2);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn = clamp([x[0] + step * dir[0], x[1] + step * dir[1]], lo, hi);
            let fnew = f(&xn);
            let decrease = g[0] * (xn[0] - x[0]) + g[1] * (xn[1] - x[1]);
            if fnew.is_finite() && fnew <= fx + 1e-4 * decrease {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // No descent left at machine precision: treat as converged.
            return Some(x);
        };
        let gn = numerical_gradient(&f, &xn);
        let s = [xn[0] - x[0], xn[1] - x[1]];
        let y = [gn[0] - g[0], gn[1] - g[1]];
        let sy = s[0] * y[0] + s[1] * y[1];
        if sy > 1e-12 {
            let sv = DMatrix::from_row_slice(2, 1, &s);
            let yv = DMatrix::from_row_slice(2, 1, &y);
            let rho = 1.0 / sy;
            let i2 = DMatrix::<f64>::identity(2, 2);
            let left = &i2 - &sv * yv.transpose() * rho;
            let right = &i2 - &yv * sv.transpose() * rho;
            h_inv = &left * &h_inv * &right + &sv * sv.transpose() * rho;
        }
        let converged = (fx - fnew).abs() < 1e-12 * (1.0 + fx.abs());
        x = xn;
        fx = fnew;
        g = gn;
        if converged {
            return Some(x);
        }
    }
    Some(x)
}
