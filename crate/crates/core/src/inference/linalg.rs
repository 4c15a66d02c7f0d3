use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest accepted condition number of an information matrix.
pub const MAX_CONDITION: f64 = 1e10;

/// `(M + M') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix. Fails when the matrix is
/// not positive definite or its condition number exceeds [`MAX_CONDITION`].
pub fn spd_inverse(m: &DMatrix<f64>, label: &str) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInformation { label: label.to_string(), condition: f64::INFINITY });
    }
    let eig = sym.clone().symmetric_eigen();
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularInformation { label: label.to_string(), condition });
    }
    let chol = sym
        .cholesky()
        .ok_or_else(|| Error::SingularInformation { label: label.to_string(), condition })?;
    Ok(symmetrize(&chol.inverse()))
}

/// Submatrix on the given rows and columns.
pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}
