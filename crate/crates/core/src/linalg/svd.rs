//! One-sided (Hestenes) Jacobi SVD.
//!
//! The working copy is stored transposed so that each column being
//! orthogonalized is a contiguous slice.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use super::qr::qr;
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
pub const ROTATION_TOL: f64 = 1e-12;

/// Thin SVD `A = U diag(sigma) Vᵀ` with `k = min(rows, cols)` triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank_len(&self) -> usize {
        self.sigma.len()
    }

    pub fn left(&self, k: usize) -> Vec<f64> {
        self.u.col(k)
    }

    pub fn right(&self, k: usize) -> Vec<f64> {
        self.v.col(k)
    }

    /// `U diag(sigma) Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (k, s) in self.sigma.iter().enumerate() {
                us[(i, k)] *= s;
            }
        }
        us.matmul_nt(&self.v)
    }

    /// Flips each (u_k, v_k) pair so the largest-magnitude entry of u_k is
    /// nonnegative. The product u_k σ_k v_kᵀ is unchanged.
    pub fn canonicalize_signs(&mut self) {
        for k in 0..self.sigma.len() {
            let mut best = 0.0f64;
            let mut best_val = 0.0;
            for i in 0..self.u.rows() {
                let x = self.u[(i, k)];
                if x.abs() > best {
                    best = x.abs();
                    best_val = x;
                }
            }
            if best_val < 0.0 {
                for i in 0..self.u.rows() {
                    self.u[(i, k)] = -self.u[(i, k)];
                }
                for i in 0..self.v.rows() {
                    self.v[(i, k)] = -self.v[(i, k)];
                }
            }
        }
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::shape("svd", "min(rows, cols) >= 1", format!("{m}x{n}")));
    }
    a.check_finite()?;
    let mut out = if m >= n {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    out.canonicalize_signs();
    Ok(out)
}

/// Jacobi on an `m x n` matrix with `m >= n`.
fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // work row j = column j of A; vt row j = column j of V
    let mut work = a.transpose();
    let mut vt = Matrix::identity(n);
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return Ok(SvdResult {
            u: complete_basis(&Matrix::zeros(m, n), &[false; 0], m, n),
            sigma: vec![0.0; n],
            v: Matrix::identity(n),
        });
    }
    let negligible = {
        let e = (m.max(n) as f64) * f64::EPSILON * scale;
        e * e
    };

    let mut converged = false;
    let mut worst = 0.0f64;
    for _sweep in 0..MAX_SWEEPS {
        worst = 0.0;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let cp = work.row(p);
                    let cq = work.row(q);
                    (dot(cp, cp), dot(cq, cq), dot(cp, cq))
                };
                if alpha <= negligible || beta <= negligible || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off <= ROTATION_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut work, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            off_diag: worst,
        });
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(work.row(j), work.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms[order[0]];
    let zero_cut = (m.max(n) as f64) * f64::EPSILON * sigma_max;
    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut filled = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        let ok = s > zero_cut && s > 0.0;
        filled.push(ok);
        if ok {
            for (i, x) in work.row(j).iter().enumerate() {
                u[(i, k)] = x / s;
            }
        }
        for (i, x) in vt.row(j).iter().enumerate() {
            v[(i, k)] = *x;
        }
    }
    let u = complete_basis(&u, &filled, m, n);
    Ok(SvdResult { u, sigma, v })
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Replaces unfilled columns of `u` with unit vectors orthogonal to all
/// others (Gram-Schmidt over the standard basis, two passes).
fn complete_basis(u: &Matrix, filled: &[bool], m: usize, n: usize) -> Matrix {
    let mut out = u.clone();
    let mut have: Vec<bool> = (0..n).map(|k| filled.get(k).copied().unwrap_or(false)).collect();
    let mut candidate = 0usize;
    for k in 0..n {
        if have[k] {
            continue;
        }
        while candidate < m {
            let mut x = vec![0.0; m];
            x[candidate] = 1.0;
            candidate += 1;
            for _pass in 0..2 {
                for j in 0..n {
                    if !have[j] {
                        continue;
                    }
                    let col = out.col(j);
                    let d = dot(&x, &col);
                    for (xi, ci) in x.iter_mut().zip(&col) {
                        *xi -= d * ci;
                    }
                }
            }
            let nrm = dot(&x, &x).sqrt();
            if nrm > 1e-6 {
                for xi in &mut x {
                    *xi /= nrm;
                }
                out.set_col(k, &x);
                have[k] = true;
                break;
            }
        }
    }
    out
}

/// Thin SVD of `Ω = W_Qᵀ W_K` with `H` triplets, computed through the QR
/// factors of both projections so only an `H x H` core is decomposed.
pub fn qk_svd(w_q: &Matrix, w_k: &Matrix) -> Result<SvdResult> {
    if w_q.shape() != w_k.shape() {
        return Err(Error::shape(
            "qk_svd",
            format!("{:?}", w_q.shape()),
            format!("{:?}", w_k.shape()),
        ));
    }
    let (h, d) = w_q.shape();
    if h > d {
        let full = svd(&w_q.matmul_tn(w_k))?;
        return Ok(full);
    }
    let (q1, r1) = qr(&w_q.transpose());
    let (q2, r2) = qr(&w_k.transpose());
    let core = svd(&r1.matmul_nt(&r2))?;
    let mut out = SvdResult {
        u: q1.matmul(&core.u),
        sigma: core.sigma,
        v: q2.matmul(&core.v),
    };
    out.canonicalize_signs();
    Ok(out)
}

/// Largest singular value.
pub fn operator_norm(a: &Matrix) -> Result<f64> {
    Ok(svd(a)?.sigma[0])
}

/// Moore-Penrose pseudoinverse, dropping singular values below
/// `rel_cut * sigma_1`.
pub fn pseudo_inverse(a: &Matrix, rel_cut: f64) -> Result<Matrix> {
    let s = svd(a)?;
    let cut = rel_cut * s.sigma[0];
    let mut vs = s.v.clone();
    for k in 0..s.sigma.len() {
        let inv = if s.sigma[k] > cut { 1.0 / s.sigma[k] } else { 0.0 };
        for i in 0..vs.rows() {
            vs[(i, k)] *= inv;
        }
    }
    Ok(vs.matmul_nt(&s.u))
}

/// `sigma_1 / sigma_min` (infinite for singular input).
pub fn condition_number(a: &Matrix) -> Result<f64> {
    let s = svd(a)?;
    let last = *s.sigma.last().unwrap();
    Ok(if last == 0.0 { f64::INFINITY } else { s.sigma[0] / last })
}
