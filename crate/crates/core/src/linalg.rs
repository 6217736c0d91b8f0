//! Dense linear-algebra helpers shared across the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Maximum number of times the diagonal jitter is multiplied by ten.
const JITTER_ESCALATIONS: usize = 4;
const JITTER_BASE: f64 = 1e-8;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Cholesky factorization with bounded jitter escalation.
///
/// Tries the plain factorization first, then adds `1e-8 * mean(diag)` to the
/// diagonal and multiplies that amount by ten up to four times.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!(
            "cholesky of non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cholesky input has non-finite entries".into()));
    }
    let sym = symmetrized(m);
    if let Some(ch) = sym.clone().cholesky() {
        return Ok(ch);
    }
    let n = m.nrows();
    let mean_diag = (0..n).map(|i| sym[(i, i)].abs()).sum::<f64>() / n.max(1) as f64;
    let mut jitter = JITTER_BASE * mean_diag.max(f64::MIN_POSITIVE);
    for _ in 0..=JITTER_ESCALATIONS {
        let mut trial = sym.clone();
        for i in 0..n {
            trial[(i, i)] += jitter;
        }
        if let Some(ch) = trial.cholesky() {
            return Ok(ch);
        }
        jitter *= 10.0;
    }
    Err(Error::Numeric(format!(
        "cholesky failed for {n}x{n} matrix after jitter escalation to {:.3e}",
        jitter / 10.0
    )))
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut inv = cholesky_jittered(m)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// `log |M|` for a symmetric positive definite matrix.
pub fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let ch = cholesky_jittered(m)?;
    Ok(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// `A ⊗ I_m`.
pub fn kron_identity(a: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let (r, c) = a.shape();
    let mut out = DMatrix::zeros(r * m, c * m);
    for i in 0..r {
        for j in 0..c {
            let v = a[(i, j)];
            if v != 0.0 {
                for l in 0..m {
                    out[(i * m + l, j * m + l)] = v;
                }
            }
        }
    }
    out
}

/// Row-major vectorization, i.e. `vec(Mᵀ)` in column-stacking notation.
pub fn vec_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    let (r, c) = m.shape();
    DVector::from_fn(r * c, |idx, _| m[(idx / c, idx % c)])
}

pub fn unvec_row_major(v: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Shape(format!(
            "cannot unvec length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solves `Σ = A Σ Aᵀ + Q` for the stationary covariance of a stable system.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    if a.ncols() != k || q.shape() != (k, k) {
        return Err(Error::Shape("lyapunov operands must be square and matching".into()));
    }
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(Error::Domain(format!(
            "stationary covariance requires spectral radius < 1, got {rho:.6}"
        )));
    }
    // (I - A ⊗ A) vec(Σ) = vec(Q), row-major vectorization.
    let n = k * k;
    let mut lhs = DMatrix::<f64>::identity(n, n);
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                for m in 0..k {
                    lhs[(i * k + j, l * k + m)] -= a[(i, l)] * a[(j, m)];
                }
            }
        }
    }
    let rhs = vec_row_major(q);
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular lyapunov system".into()))?;
    let mut sigma = unvec_row_major(sol.as_slice(), k, k)?;
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrized(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    #[test]
    fn lyapunov_scalar_closed_form() {
        let a = DMatrix::from_element(1, 1, 0.6);
        let q = DMatrix::identity(1, 1);
        let s = solve_discrete_lyapunov(&a, &q).unwrap();
        assert!((s[(0, 0)] - 1.0 / (1.0 - 0.36)).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_fixed_point_holds() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.7]);
        let q = DMatrix::identity(2, 2);
        let s = solve_discrete_lyapunov(&a, &q).unwrap();
        let resid = &a * &s * a.transpose() + &q - &s;
        assert!(resid.amax() < 1e-12);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = DMatrix::from_element(1, 1, 1.2);
        let q = DMatrix::identity(1, 1);
        assert!(matches!(
            solve_discrete_lyapunov(&a, &q),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kron_identity_layout() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let k = kron_identity(&a, 2);
        assert_eq!(k[(0, 2)], 2.0);
        assert_eq!(k[(1, 3)], 2.0);
        assert_eq!(k[(0, 3)], 0.0);
        assert_eq!(k[(3, 1)], 3.0);
    }

    #[test]
    fn cholesky_escalates_jitter_on_psd_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_jittered(&m).is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_jittered(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn row_major_vec_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = vec_row_major(&m);
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unvec_row_major(v.as_slice(), 2, 3).unwrap(), m);
    }
}
