//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    let sym = symmetrize(m);
    match sym.clone().cholesky() {
        Some(c) => Ok(symmetrize(&c.inverse())),
        None => Err(Error::Numerical(format!(
            "matrix is not positive definite (min eigenvalue {:.3e})",
            min_eigenvalue(&sym)
        ))),
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// `x^T m x`.
pub fn quad_form(x: &Vector, m: &Matrix) -> f64 {
    let mx = m * x;
    x.dot(&mx)
}

pub fn eigenvalues(m: &Matrix) -> Vector {
    symmetrize(m).symmetric_eigenvalues()
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    eigenvalues(m).min()
}

pub fn max_eigenvalue(m: &Matrix) -> f64 {
    eigenvalues(m).max()
}

/// Spectral norm of a symmetric matrix.
pub fn op_norm(m: &Matrix) -> f64 {
    eigenvalues(m).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Unit eigenvector of the smallest eigenvalue.
pub fn min_eigenvector(m: &Matrix) -> (f64, Vector) {
    let eig = symmetrize(m).symmetric_eigen();
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

pub fn is_psd(m: &Matrix, tol: f64) -> bool {
    let asym = (m - m.transpose()).abs().max();
    asym <= tol.max(1e-12) * (1.0 + m.abs().max()) && min_eigenvalue(m) >= -tol
}

pub fn outer(x: &Vector) -> Matrix {
    x * x.transpose()
}

/// Adds `w * x x^T` to `m` in place.
pub fn add_outer(m: &mut Matrix, x: &Vector, w: f64) {
    m.ger(w, x, x, 1.0);
}

/// Sherman-Morrison update of `inv = A^{-1}` to `(A + x x^T)^{-1}`.
/// Returns `x^T A^{-1} x`.
pub fn sherman_morrison(inv: &mut Matrix, x: &Vector) -> f64 {
    let u = &*inv * x;
    let q = x.dot(&u);
    inv.ger(-1.0 / (1.0 + q), &u, &u, 1.0);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_round_trip() {
        let m = Matrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let inv = spd_inverse(&m).unwrap();
        let id = &m * &inv;
        assert!((id - Matrix::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(spd_inverse(&m), Err(Error::Numerical(_))));
    }

    #[test]
    fn sherman_morrison_matches_direct_inverse() {
        let a = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let x = Vector::from_vec(vec![0.4, -0.7]);
        let mut inv = spd_inverse(&a).unwrap();
        sherman_morrison(&mut inv, &x);
        let direct = spd_inverse(&(a + outer(&x))).unwrap();
        assert!((inv - direct).abs().max() < 1e-12);
    }

    #[test]
    fn min_eigenvector_of_diagonal() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 0.5, 2.0]));
        let (v, e) = min_eigenvector(&m);
        assert!((v - 0.5).abs() < 1e-12);
        assert!((e[1].abs() - 1.0).abs() < 1e-12);
    }
}
