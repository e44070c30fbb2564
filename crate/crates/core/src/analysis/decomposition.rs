use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SvdResult};

/// Per-singular-vector expansion of the relative attention paid by one
/// query to one key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub query_idx: usize,
    pub key_idx: usize,
    pub terms: Vec<f64>,
    pub relative_attention: f64,
    pub sparsity_s: f64,
    /// `None` when the relative attention is not positive, or when the
    /// terms cannot reach it (possible only for rotated bases).
    pub n_recon: Option<usize>,
}

impl DecompositionRecord {
    /// `|Σ t_k − ℓ̃| / max(1, |ℓ̃|)`
    pub fn completeness_error(&self) -> f64 {
        let sum: f64 = self.terms.iter().sum();
        (sum - self.relative_attention).abs() / self.relative_attention.abs().max(1.0)
    }
}

/// `ℓ_j − mean_{i≠j} ℓ_i`
pub fn relative_attention(logits: &[f64], j: usize) -> f64 {
    let m = logits.len();
    assert!(m >= 2 && j < m, "need m >= 2 and j < m");
    let others: f64 = logits.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, l)| l).sum();
    logits[j] - others / (m - 1) as f64
}

/// Key `j` minus the mean of the other keys.
pub fn centered_key(keys: &Matrix, j: usize) -> Vec<f64> {
    let m = keys.rows();
    assert!(m >= 2 && j < m, "need m >= 2 and j < m");
    let mut mean = vec![0.0; keys.cols()];
    for i in (0..m).filter(|&i| i != j) {
        for (acc, x) in mean.iter_mut().zip(keys.row(i)) {
            *acc += x;
        }
    }
    keys.row(j)
        .iter()
        .zip(&mean)
        .map(|(s, o)| s - o / (m - 1) as f64)
        .collect()
}

/// `(mean |v|)² / mean(v²)`, in `[1/n, 1]`.
pub fn sparsity_s(v: &[f64]) -> Result<f64> {
    let n = v.len() as f64;
    let l1 = v.iter().map(|x| x.abs()).sum::<f64>() / n;
    let l2 = v.iter().map(|x| x * x).sum::<f64>() / n;
    if v.is_empty() || l2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((l1 * l1 / l2).clamp(1.0 / n, 1.0))
}

/// Size of the smallest subset of `terms` whose sum reaches `target`.
/// Greedy over descending terms is optimal for a cardinality minimum.
pub fn n_recon(terms: &[f64], target: f64) -> Option<usize> {
    if !(target > 0.0) {
        return None;
    }
    let mut sorted = terms.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (k, t) in sorted.iter().enumerate() {
        if *t <= 0.0 {
            break;
        }
        acc += t;
        // absorb rounding when the target is the exact total
        if acc >= target * (1.0 - 1e-12) {
            return Some(k + 1);
        }
    }
    None
}

/// `t_k = (rᵀ u_k) σ_k (v_kᵀ s̃)` for the given (possibly rotated) bases.
fn terms_from(u: &Matrix, sigma: &[f64], v: &Matrix, query: &[f64], s_tilde: &[f64]) -> Vec<f64> {
    let ru = u.matvec_t(query);
    let vs = v.matvec_t(s_tilde);
    (0..sigma.len()).map(|k| ru[k] * sigma[k] * vs[k]).collect()
}

fn record(query_idx: usize, key_idx: usize, terms: Vec<f64>, rel: f64) -> Result<DecompositionRecord> {
    let sparsity = sparsity_s(&terms)?;
    Ok(DecompositionRecord {
        query_idx,
        key_idx,
        n_recon: n_recon(&terms, rel),
        terms,
        relative_attention: rel,
        sparsity_s: sparsity,
    })
}

fn check_dims(svd: &SvdResult, query: &[f64], keys: &Matrix, j: usize) -> Result<()> {
    if query.len() != svd.u.rows() || keys.cols() != svd.v.rows() {
        return Err(Error::shape(
            "decompose",
            format!("token dim {}", svd.u.rows()),
            format!("query {} / keys {}", query.len(), keys.cols()),
        ));
    }
    if keys.rows() < 2 || j >= keys.rows() {
        return Err(Error::Config(format!(
            "key index {j} invalid for a context of {}",
            keys.rows()
        )));
    }
    Ok(())
}

/// Decomposes the relative attention of `query` on row `j` of `keys` along
/// the singular triplets of Ω. `query_idx` is recorded as given.
pub fn decompose(svd: &SvdResult, query: &[f64], query_idx: usize, keys: &Matrix, j: usize) -> Result<DecompositionRecord> {
    check_dims(svd, query, keys, j)?;
    let s_tilde = centered_key(keys, j);
    let terms = terms_from(&svd.u, &svd.sigma, &svd.v, query, &s_tilde);
    let rel: f64 = terms.iter().sum();
    record(query_idx, j, terms, rel)
}

/// Same expansion with bases `U·R_U` and `V·R_V`. The spectrum is kept; the
/// terms no longer telescope to the relative attention, which is reported
/// from the unrotated Ω.
pub fn rotated_terms(
    svd: &SvdResult,
    r_u: &Matrix,
    r_v: &Matrix,
    query: &[f64],
    query_idx: usize,
    keys: &Matrix,
    j: usize,
) -> Result<DecompositionRecord> {
    check_dims(svd, query, keys, j)?;
    let k = svd.sigma.len();
    if r_u.shape() != (k, k) || r_v.shape() != (k, k) {
        return Err(Error::shape("rotated_terms", format!("{k}x{k}"), format!("{:?}", r_u.shape())));
    }
    let s_tilde = centered_key(keys, j);
    let u = svd.u.matmul(r_u);
    let v = svd.v.matmul(r_v);
    let terms = terms_from(&u, &svd.sigma, &v, query, &s_tilde);
    let rel = terms_from(&svd.u, &svd.sigma, &svd.v, query, &s_tilde).iter().sum();
    record(query_idx, j, terms, rel)
}

/// Independent Haar rotations of the left and right bases, one per seed.
pub fn rotation_pair(k: usize, seed_u: u64, seed_v: u64) -> (Matrix, Matrix) {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let r_u = crate::linalg::haar_orthogonal(k, &mut ChaCha8Rng::seed_from_u64(seed_u));
    let r_v = crate::linalg::haar_orthogonal(k, &mut ChaCha8Rng::seed_from_u64(seed_v));
    (r_u, r_v)
}

pub fn rotated_baseline(
    svd: &SvdResult,
    query: &[f64],
    query_idx: usize,
    keys: &Matrix,
    j: usize,
    seeds: (u64, u64),
) -> Result<DecompositionRecord> {
    let (r_u, r_v) = rotation_pair(svd.sigma.len(), seeds.0, seeds.1);
    rotated_terms(svd, &r_u, &r_v, query, query_idx, keys, j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, svd};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    /// Smallest subset size by exhaustive search.
    fn brute_force(terms: &[f64], target: f64) -> Option<usize> {
        let n = terms.len();
        let mut best: Option<usize> = None;
        for mask in 0u32..(1 << n) {
            let size = mask.count_ones() as usize;
            if best.is_some_and(|b| size >= b) {
                continue;
            }
            let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| terms[i]).sum();
            if s >= target {
                best = Some(size);
            }
        }
        best
    }

    #[test]
    fn relative_attention_examples() {
        assert_eq!(relative_attention(&[1.5; 4], 2), 0.0);
        assert!((relative_attention(&[2.0, 1.0, 1.0, 0.0], 0) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(relative_attention(&[0.0, 0.0, 0.0, 3.0], 3), 3.0);
    }

    #[test]
    fn sparsity_examples() {
        assert!((sparsity_s(&[-2.0; 7]).unwrap() - 1.0).abs() < 1e-15);
        assert!((sparsity_s(&[0.0, 0.0, 5.0, 0.0, 0.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!((sparsity_s(&[3.0, 1.0, 0.0, 0.0]).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(sparsity_s(&[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn n_recon_examples() {
        assert_eq!(n_recon(&[5.0, -1.0, -1.0, -1.0], 2.0), Some(1));
        assert_eq!(n_recon(&[0.7; 6], 6.0 * 0.7), Some(6));
        assert_eq!(n_recon(&[1.0, -2.0], -1.0), None);
        assert_eq!(n_recon(&[1.0, 2.0], 0.0), None);
    }

    #[test]
    fn n_recon_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 2000 {
            let n = rng.gen_range(1..=10);
            let terms: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let target: f64 = terms.iter().sum();
            if target <= 0.0 {
                continue;
            }
            assert_eq!(n_recon(&terms, target), brute_force(&terms, target), "{terms:?}");
            checked += 1;
        }
    }

    #[test]
    fn rank_one_head_has_one_term() {
        let u = [0.6, 0.8, 0.0];
        let v = [0.0, 0.0, 1.0];
        let s = svd(&Matrix::outer(&u, &v).scale(2.0)).unwrap();
        let keys = Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, -0.5], vec![0.2, 0.3, 0.0]]);
        let rec = decompose(&s, &[0.6, 0.8, 0.0], 2, &keys, 0).unwrap();
        assert!(rec.relative_attention > 0.0);
        assert!(rec.terms[1..].iter().all(|t| t.abs() < 1e-14));
        assert_eq!(rec.n_recon, Some(1));
        assert!((rec.sparsity_s - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn terms_telescope_to_bilinear_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let omega = gaussian(8, 8, &mut rng);
            let keys = gaussian(5, 8, &mut rng);
            let query = keys.row(4).to_vec();
            let s = svd(&omega).unwrap();
            for j in 0..5 {
                let rec = decompose(&s, &query, 4, &keys, j).unwrap();
                let direct = dot(&query, &omega.matvec(&centered_key(&keys, j)));
                assert!((rec.relative_attention - direct).abs() < 1e-10);
                let logits: Vec<f64> = (0..5).map(|i| dot(&query, &omega.matvec(keys.row(i)))).collect();
                assert!((relative_attention(&logits, j) - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_rotation_reproduces_decompose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = svd(&gaussian(6, 6, &mut rng)).unwrap();
        let keys = gaussian(4, 6, &mut rng);
        let q = keys.row(3).to_vec();
        let eye = Matrix::identity(6);
        let a = decompose(&s, &q, 3, &keys, 1).unwrap();
        let b = rotated_terms(&s, &eye, &eye, &q, 3, &keys, 1).unwrap();
        assert_eq!(a.terms, b.terms);
        assert!((a.relative_attention - b.relative_attention).abs() < 1e-12);
    }

    #[test]
    fn rotation_keeps_relative_attention_and_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = svd(&gaussian(6, 6, &mut rng)).unwrap();
        let keys = gaussian(4, 6, &mut rng);
        let q = keys.row(3).to_vec();
        let a = decompose(&s, &q, 3, &keys, 2).unwrap();
        let b = rotated_baseline(&s, &q, 3, &keys, 2, (10, 11)).unwrap();
        assert!((a.relative_attention - b.relative_attention).abs() < 1e-12);
        let (r_u, r_v) = rotation_pair(6, 10, 11);
        let rotated = SvdResult {
            u: s.u.matmul(&r_u),
            sigma: s.sigma.clone(),
            v: s.v.matmul(&r_v),
        };
        let m = rotated.u.matmul(&Matrix::diag(&rotated.sigma)).matmul_nt(&rotated.v);
        let again = svd(&m).unwrap();
        for (x, y) in again.sigma.iter().zip(&s.sigma) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
