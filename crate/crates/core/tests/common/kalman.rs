//! Textbook Kalman filter and Rauch–Tung–Striebel smoother in moment form.
//!
//! Model: `x₀ ~ N(0, I)`, `x_t = A x_{t−1} + B u_t + w_t`, `w_t ~ N(0, I)`,
//! `y_t = C x_t + d + v_t`, `v_t ~ N(0, R)`, for `t = 1..=T`.

use nalgebra::{DMatrix, DVector};

pub struct LinearGaussian {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub r: DMatrix<f64>,
}

pub struct KalmanOutput {
    /// Filtered means/covariances for `t = 0..=T`.
    pub filt_mean: Vec<DVector<f64>>,
    pub filt_cov: Vec<DMatrix<f64>>,
    /// Predicted for `t = 1..=T` (index `t − 1`).
    pub pred_mean: Vec<DVector<f64>>,
    pub pred_cov: Vec<DMatrix<f64>>,
    pub smooth_mean: Vec<DVector<f64>>,
    pub smooth_cov: Vec<DMatrix<f64>>,
    /// `Cov(x_t, x_{t+1} | y)` for `t = 0..T`.
    pub smooth_cross: Vec<DMatrix<f64>>,
}

/// `observed[t] = false` skips the update at bin `t`.
pub fn kalman_smoother(model: &LinearGaussian, u: &DMatrix<f64>, y: &DMatrix<f64>, observed: &[bool]) -> KalmanOutput {
    let k = model.a.nrows();
    let t_len = y.nrows();
    let eye = DMatrix::<f64>::identity(k, k);
    let mut filt_mean = vec![DVector::zeros(k)];
    let mut filt_cov = vec![eye.clone()];
    let mut pred_mean = Vec::new();
    let mut pred_cov = Vec::new();
    for t in 0..t_len {
        let m_pred = &model.a * &filt_mean[t] + &model.b * u.row(t).transpose();
        let p_pred = &model.a * &filt_cov[t] * model.a.transpose() + &eye;
        let (m, p) = if observed[t] {
            let s = &model.c * &p_pred * model.c.transpose() + &model.r;
            let gain = &p_pred * model.c.transpose() * s.try_inverse().unwrap();
            let innov = y.row(t).transpose() - &model.c * &m_pred - &model.d;
            let m = &m_pred + &gain * innov;
            let p = (&eye - &gain * &model.c) * &p_pred;
            (m, 0.5 * (&p + p.transpose()))
        } else {
            (m_pred.clone(), p_pred.clone())
        };
        pred_mean.push(m_pred);
        pred_cov.push(p_pred);
        filt_mean.push(m);
        filt_cov.push(p);
    }
    let mut smooth_mean = filt_mean.clone();
    let mut smooth_cov = filt_cov.clone();
    let mut smooth_cross = vec![DMatrix::zeros(k, k); t_len];
    for t in (0..t_len).rev() {
        let gain = &filt_cov[t] * model.a.transpose() * pred_cov[t].clone().try_inverse().unwrap();
        smooth_mean[t] = &filt_mean[t] + &gain * (&smooth_mean[t + 1] - &pred_mean[t]);
        smooth_cov[t] = &filt_cov[t] + &gain * (&smooth_cov[t + 1] - &pred_cov[t]) * gain.transpose();
        smooth_cross[t] = &gain * &smooth_cov[t + 1];
    }
    KalmanOutput {
        filt_mean,
        filt_cov,
        pred_mean,
        pred_cov,
        smooth_mean,
        smooth_cov,
        smooth_cross,
    }
}
