use rand::Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;

/// Householder QR of an `m x n` matrix with `m >= n`.
/// Returns the thin factors `Q` (`m x n`, orthonormal columns) and `R` (`n x n`).
pub fn qr(a: &Matrix) -> (Matrix, Matrix) {
    let (m, n) = a.shape();
    assert!(m >= n, "qr requires rows >= cols");
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);

    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        let alpha = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if alpha == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= vn;
        }
        for j in k..n {
            let d: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
            for i in k..m {
                r[(i, j)] -= 2.0 * v[i - k] * d;
            }
        }
        reflectors.push(v);
    }

    let mut q = Matrix::zeros(m, n);
    for j in 0..n {
        q[(j, j)] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..n {
            let d: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            for i in k..m {
                q[(i, j)] -= 2.0 * v[i - k] * d;
            }
        }
    }
    let r_sq = Matrix::from_fn(n, n, |i, j| if j >= i { r[(i, j)] } else { 0.0 });
    (q, r_sq)
}

/// Haar-distributed `n x n` orthogonal matrix: QR of a standard Gaussian
/// matrix with the columns of `Q` sign-fixed so `diag(R) > 0`.
pub fn haar_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    assert!(n >= 1);
    let g = Matrix::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let (mut q, r) = qr(&g);
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(7, 4, |_, _| rng.sample(StandardNormal));
        let (q, r) = qr(&a);
        assert!(q.matmul(&r).max_abs_diff(&a) < 1e-12);
        assert!(q.matmul_tn(&q).max_abs_diff(&Matrix::identity(4)) < 1e-12);
        for i in 0..4 {
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn haar_one_by_one_is_plus_or_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = haar_orthogonal(1, &mut rng);
            assert_eq!(q[(0, 0)].abs(), 1.0);
        }
    }

    #[test]
    fn haar_is_orthogonal() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = haar_orthogonal(5, &mut rng);
            let e = q.matmul_tn(&q).sub(&Matrix::identity(5)).frobenius_norm();
            assert!(e < 1e-10, "seed {seed}: {e}");
        }
    }

    #[test]
    fn haar_entry_mean_is_zero() {
        // Q00 of a Haar 3x3 matrix has mean 0 and variance 1/3.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let sum: f64 = (0..n).map(|_| haar_orthogonal(3, &mut rng)[(0, 0)]).sum();
        let mean = sum / n as f64;
        let se = (1.0 / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }
}
