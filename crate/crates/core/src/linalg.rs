//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{DemError, Result};

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc))
                .copy_from(&(b * s));
        }
    }
    out
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn cholesky(m: &DMatrix<f64>, block: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(DemError::param(format!("`{block}` is not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(DemError::not_pd(block));
    }
    Cholesky::new(symmetrize(m)).ok_or_else(|| DemError::not_pd(block))
}

/// `ln det m` for a symmetric positive-definite matrix. Fails instead of
/// regularizing when the factorization breaks down.
pub fn spd_logdet(m: &DMatrix<f64>, block: &str) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = cholesky(m, block)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn spd_inverse(m: &DMatrix<f64>, block: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    Ok(symmetrize(&cholesky(m, block)?.inverse()))
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.nrows() > 0 && cholesky(m, "").is_ok()
}

/// Solves `m x = rhs` for SPD `m`.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, block: &str) -> Result<DVector<f64>> {
    Ok(cholesky(m, block)?.solve(rhs))
}

/// Returns `(exp(J h), ∫₀ʰ exp(J s) ds)` from the exponential of the augmented
/// matrix `[[J, I], [0, 0]]·h`. Valid for singular `J`.
pub fn expm_with_integral(j: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = j.nrows();
    let mut aug = DMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(j * h));
    aug.view_mut((0, n), (n, n))
        .copy_from(&(DMatrix::<f64>::identity(n, n) * h));
    let e = aug.exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, n)).into_owned(),
    )
}

/// Exact zero-order-hold discretization of `ẋ = A x + B u`.
pub fn zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (ad, gamma) = expm_with_integral(a, dt);
    (ad, gamma * b)
}

/// First-order-hold maps for `ẋ = A x + u` with `u` linear between samples:
/// `x_{k+1} = Φ x_k + P₀ u_k + P₁ u_{k+1}`. Returns `(Φ, P₀, P₁)`.
pub fn foh(a: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(3 * n, 3 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, n)).fill_with_identity();
    aug.view_mut((0, n), (n, n)).scale_mut(dt);
    aug.view_mut((n, 2 * n), (n, n)).fill_with_identity();
    let e = aug.exp();
    let phi = e.view((0, 0), (n, n)).into_owned();
    let g1 = e.view((0, n), (n, n)).into_owned();
    let g2 = e.view((0, 2 * n), (n, n)).into_owned();
    (phi, &g1 - &g2, g2)
}

/// Largest-to-smallest singular value ratio.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Frobenius inner product `Σ a_ij b_ij`.
pub fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}
