//! Small dense linear-algebra helpers over nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition number above which a system is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct WlsSolution {
    pub coefficients: DVector<f64>,
    /// `(X^T W X)^{-1}`.
    pub unscaled_covariance: DMatrix<f64>,
}

/// Minimizes `sum_r w_r (y_r - x_r^T b)^2` through an SVD of `diag(sqrt(w)) X`.
pub fn weighted_least_squares(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: &DVector<f64>,
) -> Result<WlsSolution> {
    let (n, p) = design.shape();
    if response.len() != n || weights.len() != n {
        return Err(Error::Dimension(format!(
            "design has {n} rows but response/weights have {}/{}",
            response.len(),
            weights.len()
        )));
    }
    if n < p {
        return Err(Error::Singular(format!("{n} rows cannot identify {p} coefficients")));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let root_w = weights.map(f64::sqrt);
    let mut a = design.clone();
    for (mut row, rw) in a.row_iter_mut().zip(root_w.iter()) {
        row *= *rw;
    }
    let b = response.component_mul(&root_w);

    let svd = a.svd(true, true);
    let s = &svd.singular_values;
    let s_max = s.max();
    let s_min = s.min();
    if !(s_min > 0.0) || s_max / s_min > MAX_CONDITION {
        return Err(Error::Singular(format!(
            "design condition number {:.3e} exceeds {MAX_CONDITION:.0e}",
            if s_min > 0.0 { s_max / s_min } else { f64::INFINITY }
        )));
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let ut_b = u.transpose() * b;
    let scaled = DVector::from_iterator(p, ut_b.iter().zip(s.iter()).map(|(c, sv)| c / sv));
    let coefficients = v_t.transpose() * scaled;

    let mut v_scaled = v_t.transpose();
    for (mut col, sv) in v_scaled.column_iter_mut().zip(s.iter()) {
        col /= *sv;
    }
    let unscaled_covariance = &v_scaled * v_scaled.transpose();
    Ok(WlsSolution {
        coefficients,
        unscaled_covariance,
    })
}

/// Inverse of a symmetric positive-definite matrix, rejecting ill-conditioned input.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension("matrix is not square".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(Error::Singular(format!(
            "information matrix has eigenvalues in [{min:.3e}, {max:.3e}]"
        )));
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}
