use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Smallest acceptable eigenvalue ratio before a symmetric matrix is treated as singular.
const RCOND_MIN: f64 = 1e-13;

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    check_conditioning(m, what)?;
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn spd_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    check_conditioning(m, what)?;
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    Ok(chol.solve(rhs))
}

fn check_conditioning(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what} has non-finite entries")));
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 || min <= max * RCOND_MIN {
        return Err(Error::Singular(format!(
            "{what} (eigenvalues span [{min:.3e}, {max:.3e}])"
        )));
    }
    Ok(())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Robust (HC0) covariance for weighted least squares, with the coefficients.
pub fn wls_robust(design: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let wx = DMatrix::from_fn(design.nrows(), design.ncols(), |i, j| w[i] * design[(i, j)]);
    let bread = design.transpose() * &wx;
    let bread_inv = spd_inverse(&bread, "weighted cross-product matrix")?;
    let coef = &bread_inv * (wx.transpose() * y);
    let resid = y - design * &coef;
    let scaled = DMatrix::from_fn(design.nrows(), design.ncols(), |i, j| w[i] * resid[i] * design[(i, j)]);
    let meat = scaled.transpose() * &scaled;
    Ok((coef, symmetrize(&(&bread_inv * meat * &bread_inv))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_matrix_is_reported() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(spd_inverse(&m, "test"), Err(Error::Singular(_))));
    }

    #[test]
    fn inverse_of_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = spd_inverse(&m, "test").unwrap();
        let id = &m * inv;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }
}
