//! Dense linear algebra kernel: matrices, Jacobi SVD, Householder QR,
//! Haar sampling and similarity metrics.

mod matrix;
mod qr;
mod svd;

pub use matrix::{dot, norm, Matrix};
pub use qr::{haar_orthogonal, qr};
pub use svd::{
    condition_number, operator_norm, pseudo_inverse, qk_svd, svd, SvdResult, MAX_SWEEPS,
    ROTATION_TOL,
};

use crate::error::{Error, Result};

/// Cosine similarity between every column of `a` and every column of `b`.
/// Entry `(i, j)` compares `a_i` with `b_j`.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape("cosine_similarity_matrix", a.rows(), b.rows()));
    }
    let na = column_norms(a, "a")?;
    let nb = column_norms(b, "b")?;
    let g = a.matmul_tn(b);
    Ok(Matrix::from_fn(a.cols(), b.cols(), |i, j| {
        (g[(i, j)] / (na[i] * nb[j])).clamp(-1.0, 1.0)
    }))
}

fn column_norms(m: &Matrix, which: &'static str) -> Result<Vec<f64>> {
    (0..m.cols())
        .map(|j| {
            let n = norm(&m.col(j));
            if n == 0.0 {
                Err(Error::ZeroColumn { which, column: j })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Cosine of the angle between two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// `sin ∠(a, b)` for nonzero vectors, sign-agnostic.
pub fn sin_angle(a: &[f64], b: &[f64]) -> f64 {
    let c = cosine(a, b);
    (1.0 - c * c).max(0.0).sqrt()
}
