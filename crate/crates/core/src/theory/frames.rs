use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, haar_orthogonal, norm, operator_norm, pseudo_inverse, Matrix};

/// Singular values below this fraction of the largest are dropped when
/// inverting a Gram matrix.
pub const PINV_CUT: f64 = 1e-10;
pub const MAX_CONDITION: f64 = 1e6;

/// Query-side and key-side feature frames with their Gram matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub x_features: Matrix,
    pub y_features: Matrix,
    pub sigma_x: Matrix,
    pub sigma_y: Matrix,
    /// `(D/N)·Σ − I`
    pub e_x: Matrix,
    pub e_y: Matrix,
    pub e_x_norm: f64,
    pub e_y_norm: f64,
}

fn deviation(sigma: &Matrix, n: usize) -> Matrix {
    let d = sigma.rows();
    sigma.scale(d as f64 / n as f64).sub(&Matrix::identity(d))
}

impl FramePair {
    pub fn new(x_features: Matrix, y_features: Matrix) -> Result<Self> {
        if x_features.rows() != y_features.rows() {
            return Err(Error::shape("frame pair", x_features.rows(), y_features.rows()));
        }
        let sigma_x = x_features.matmul_nt(&x_features);
        let sigma_y = y_features.matmul_nt(&y_features);
        let e_x = deviation(&sigma_x, x_features.cols());
        let e_y = deviation(&sigma_y, y_features.cols());
        Ok(Self {
            e_x_norm: operator_norm(&e_x)?,
            e_y_norm: operator_norm(&e_y)?,
            x_features,
            y_features,
            sigma_x,
            sigma_y,
            e_x,
            e_y,
        })
    }

    pub fn dim(&self) -> usize {
        self.x_features.rows()
    }

    pub fn x1(&self) -> Vec<f64> {
        self.x_features.col(0)
    }

    pub fn y1(&self) -> Vec<f64> {
        self.y_features.col(0)
    }

    /// Independent Gaussian frames with unit columns.
    pub fn random(d: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_unit_frame(d, n, &mut rng);
        let y = random_unit_frame(d, n, &mut rng);
        Self::new(x, y).expect("matching dims")
    }

    /// Both sides `c·[Q, −Q]` for a Haar `Q`, so `Σ = 2c²·I`. With
    /// `shared` the two sides use the same `Q`.
    pub fn antipodal(d: usize, scale_x: f64, scale_y: f64, shared: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qx = haar_orthogonal(d, &mut rng);
        let qy = if shared { qx.clone() } else { haar_orthogonal(d, &mut rng) };
        let frame = |q: &Matrix, c: f64| Matrix::from_fn(d, 2 * d, |i, j| if j < d { c * q[(i, j)] } else { -c * q[(i, j - d)] });
        Self::new(frame(&qx, scale_x), frame(&qy, scale_y)).expect("matching dims")
    }

    /// Unit-column frames with `XXᵀ = (N/D)(I + E)` where `‖E‖₂` lands
    /// within 5% of each target. The measured norms are stored.
    pub fn near_isotropic(d: usize, n: usize, target_ex: f64, target_ey: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = perturbed_tight_frame(d, n, target_ex, &mut rng)?;
        let y = perturbed_tight_frame(d, n, target_ey, &mut rng)?;
        Self::new(x, y)
    }
}

pub fn random_unit_frame<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::from_fn(d, n, |_, _| rng.sample(StandardNormal));
    normalize_columns(&mut m);
    m
}

fn normalize_columns(m: &mut Matrix) {
    for j in 0..m.cols() {
        let c = m.col(j);
        let len = norm(&c);
        m.set_col(j, &c.iter().map(|v| v / len).collect::<Vec<_>>());
    }
}

/// Harmonic tight frame: `N` unit vectors in `R^D` with `XXᵀ = (N/D)·I`.
/// Needs `N ≥ D`; `N = D` gives the identity.
pub fn harmonic_frame(d: usize, n: usize) -> Matrix {
    assert!(n >= d && d >= 1);
    if n == d {
        return Matrix::identity(d);
    }
    let pairs = d / 2;
    let amp = (2.0 / d as f64).sqrt();
    Matrix::from_fn(d, n, |i, k| {
        if i < 2 * pairs {
            let theta = 2.0 * PI * (i / 2 + 1) as f64 * k as f64 / n as f64;
            amp * if i % 2 == 0 { theta.cos() } else { theta.sin() }
        } else {
            1.0 / (d as f64).sqrt()
        }
    })
}

fn tilt(base: &Matrix, s: &Matrix, t: f64) -> Matrix {
    let d = base.rows();
    let mut x = Matrix::identity(d).add(&s.scale(t)).matmul(base);
    normalize_columns(&mut x);
    x
}

fn e_norm(x: &Matrix) -> Result<f64> {
    operator_norm(&deviation(&x.matmul_nt(x), x.cols()))
}

fn perturbed_tight_frame<R: Rng + ?Sized>(d: usize, n: usize, target: f64, rng: &mut R) -> Result<Matrix> {
    let rot = haar_orthogonal(d, rng);
    let base = rot.matmul(&harmonic_frame(d, n));
    if target == 0.0 {
        return Ok(base);
    }
    for _ in 0..20 {
        let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sym = g.add(&g.transpose());
        let s = sym.scale(1.0 / operator_norm(&sym)?);
        let (mut lo, mut hi) = (0.0, 0.9);
        if e_norm(&tilt(&base, &s, hi))? < target {
            continue;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if e_norm(&tilt(&base, &s, mid))? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = tilt(&base, &s, 0.5 * (lo + hi));
        if (e_norm(&x)? - target).abs() <= 0.05 * target {
            return Ok(x);
        }
    }
    Err(Error::Config(format!("could not reach ‖E‖₂ = {target} with D={d}, N={n}")))
}

/// Rank-1 teacher built from the detectors `Σ⁻¹x₁` and `Σ⁻¹y₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub alpha: f64,
    pub detector_u: Vec<f64>,
    pub detector_v: Vec<f64>,
    pub omega_t: Matrix,
}

impl TeacherSpec {
    pub fn new(frames: &FramePair, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("teacher scale must be finite and non-negative, got {alpha}")));
        }
        let detector_u = pseudo_inverse(&frames.sigma_x, PINV_CUT)?.matvec(&frames.x1());
        let detector_v = pseudo_inverse(&frames.sigma_y, PINV_CUT)?.matvec(&frames.y1());
        let omega_t = Matrix::outer(&detector_u, &detector_v).scale(alpha);
        Ok(Self {
            alpha,
            detector_u,
            detector_v,
            omega_t,
        })
    }
}

/// Fails when either Gram matrix is too ill-conditioned to train against.
pub fn check_conditioning(frames: &FramePair) -> Result<()> {
    for sigma in [&frames.sigma_x, &frames.sigma_y] {
        let c = condition_number(sigma)?;
        if !(c < MAX_CONDITION) {
            return Err(Error::IllConditioned(c));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;

    #[test]
    fn harmonic_frames_are_tight_with_unit_columns() {
        for (d, n) in [(2, 3), (4, 8), (5, 9), (6, 12), (3, 3)] {
            let x = harmonic_frame(d, n);
            let g = x.matmul_nt(&x);
            assert!(g.max_abs_diff(&Matrix::identity(d).scale(n as f64 / d as f64)) < 1e-12, "{d} {n}");
            for j in 0..n {
                assert!((norm(&x.col(j)) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn near_isotropic_hits_requested_deviation() {
        for (seed, ex, ey) in [(0, 0.1, 0.0), (1, 0.05, 0.05), (2, 0.3, 0.2)] {
            let f = FramePair::near_isotropic(6, 12, ex, ey, seed).unwrap();
            assert!((f.e_x_norm - ex).abs() <= 0.05 * ex + 1e-12, "{} vs {ex}", f.e_x_norm);
            assert!((f.e_y_norm - ey).abs() <= 0.05 * ey + 1e-12);
            for j in 0..12 {
                assert!((norm(&f.x_features.col(j)) - 1.0).abs() < 1e-10);
            }
            let g = f.x_features.matmul_nt(&f.x_features);
            assert!(g.max_abs_diff(&f.sigma_x) < 1e-12);
            let rebuilt = Matrix::identity(6).add(&f.e_x).scale(2.0);
            assert!(rebuilt.max_abs_diff(&f.sigma_x) < 1e-12);
        }
    }

    #[test]
    fn teacher_is_rank_one() {
        let f = FramePair::random(6, 9, 4);
        let t = TeacherSpec::new(&f, 8.0).unwrap();
        let s = svd(&t.omega_t).unwrap();
        assert!(s.sigma[1] / s.sigma[0] < 1e-10);
    }

    #[test]
    fn scaled_tight_frame_detectors_scale_inversely() {
        let base = TeacherSpec::new(&FramePair::antipodal(4, 1.0, 1.0, false, 3), 1.0).unwrap();
        let scaled = TeacherSpec::new(&FramePair::antipodal(4, 3.0, 3.0, false, 3), 1.0).unwrap();
        for (a, b) in base.detector_u.iter().zip(&scaled.detector_u) {
            // Σ⁻¹(c·x₁) with Σ ∝ c² is the base detector divided by c.
            assert!((a / 3.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_gram_is_rejected() {
        let x = Matrix::from_fn(3, 4, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let f = FramePair::new(x.clone(), x).unwrap();
        assert!(matches!(check_conditioning(&f), Err(Error::IllConditioned(_))));
    }
}
