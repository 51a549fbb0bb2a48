//! Dense symmetric-matrix helpers shared by the covariance, prediction and
//! fusion code.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// `A <- (A + A^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Mean of the diagonal, floored at 1 so an all-zero matrix still gets a
/// strictly positive jitter.
pub fn trace_scale(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().max(1);
    let s = a.trace() / n as f64;
    if s.is_finite() && s > 0.0 {
        s
    } else {
        1.0
    }
}

pub fn add_diagonal(a: &mut DMatrix<f64>, value: f64) {
    for i in 0..a.nrows().min(a.ncols()) {
        a[(i, i)] += value;
    }
}

/// Cholesky factor of a symmetric matrix, or a numeric error naming `what`.
pub fn cholesky(a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{what}: non-finite entries")));
    }
    Cholesky::new(a).ok_or_else(|| Error::numeric(format!("{what}: matrix is not positive definite")))
}

/// Inverse of a symmetric positive-definite matrix via Cholesky, symmetrized.
pub fn spd_inverse(a: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let chol = cholesky(a, what)?;
    if n <= TRI_TILE {
        let mut inv = chol.inverse();
        symmetrize(&mut inv);
        return Ok(inv);
    }
    // A^{-1} = L^{-T} L^{-1}, with both steps as blocked matrix products.
    let x = lower_inverse(&chol.unpack());
    let mut inv = DMatrix::zeros(n, n);
    syrk_lower(&mut inv, 1.0, &x.transpose());
    mirror_lower(&mut inv);
    Ok(inv)
}

/// Row-block height for [`lower_inverse`].
const TRI_TILE: usize = 128;

/// Inverse of a nonsingular lower-triangular matrix by blocked forward
/// substitution: `X_I = -L_II^{-1} L_[I, <I] X_[<I, <I]` below the diagonal.
pub fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = DMatrix::zeros(n, n);
    for i0 in (0..n).step_by(TRI_TILE) {
        let w = TRI_TILE.min(n - i0);
        let diag = l
            .view((i0, i0), (w, w))
            .solve_lower_triangular(&DMatrix::identity(w, w))
            .expect("nonzero diagonal");
        if i0 > 0 {
            let s = l.view((i0, 0), (w, i0)) * x.view((0, 0), (i0, i0));
            x.view_mut((i0, 0), (w, i0)).gemm(-1.0, &diag, &s, 0.0);
        }
        x.view_mut((i0, i0), (w, w)).copy_from(&diag);
    }
    x
}

/// Square-root factor `A` with `A A^T = C` from the eigendecomposition of a
/// symmetric matrix, negative eigenvalues clamped to zero.
pub fn psd_sqrt_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(c.clone());
    let mut factor = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    factor
}

/// Column-tile width for [`syrk_lower`].
const SYRK_TILE: usize = 256;

/// `C += alpha A A^T` on the lower triangle only (diagonal tiles are filled
/// completely). Pair with [`mirror_lower`] to restore symmetry.
pub fn syrk_lower(c: &mut DMatrix<f64>, alpha: f64, a: &DMatrix<f64>) {
    let n = c.nrows();
    debug_assert_eq!(a.nrows(), n);
    for jb in (0..n).step_by(SYRK_TILE) {
        let w = SYRK_TILE.min(n - jb);
        let at = a.rows(jb, w).transpose();
        c.view_mut((jb, jb), (n - jb, w))
            .gemm(alpha, &a.rows(jb, n - jb), &at, 1.0);
    }
}

/// Copies the strict lower triangle onto the upper one.
pub fn mirror_lower(c: &mut DMatrix<f64>) {
    let n = c.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            c[(j, i)] = c[(i, j)];
        }
    }
}

pub fn min_eigenvalue(c: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(c.clone()).eigenvalues.min()
}

pub fn max_eigenvalue(c: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(c.clone()).eigenvalues.max()
}

/// `||a - b||_F / max(||b||_F, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}
