use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::frames::{check_conditioning, FramePair, TeacherSpec};
use super::{Check, Tolerances, TheoremVerdict};
use crate::error::{Error, Result};
use crate::linalg::{dot, sin_angle, svd, Matrix};
use crate::toy_model::{softmax, cross_entropy_logits};
use crate::trainer::{AdamW, Moments};

/// Sum of the frame columns selected by an independent Bernoulli(p) mask.
fn binary_token<R: Rng + ?Sized>(frame: &Matrix, p: f64, rng: &mut R, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..frame.cols() {
        if rng.gen_bool(p) {
            for (o, r) in out.iter_mut().enumerate() {
                *r += frame[(o, i)];
            }
        }
    }
}

/// Monte-Carlo estimate of `E[ΔΔᵀ]` for key differences `s_j − s_1`.
pub fn sample_key_difference_covariance(y: &Matrix, p: f64, m: usize, n_samples: usize, seed: u64) -> Matrix {
    let n = y.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Accumulate in feature coordinates, then map through Y once.
    let mut acc = Matrix::zeros(n, n);
    let mut first = vec![false; n];
    let mut c = vec![0.0; n];
    for _ in 0..n_samples {
        for f in first.iter_mut() {
            *f = rng.gen_bool(p);
        }
        for _ in 1..m {
            for i in 0..n {
                c[i] = rng.gen_bool(p) as i32 as f64 - first[i] as i32 as f64;
            }
            for a in 0..n {
                if c[a] == 0.0 {
                    continue;
                }
                for b in 0..n {
                    acc[(a, b)] += c[a] * c[b];
                }
            }
        }
    }
    let mean = acc.scale(1.0 / n_samples as f64);
    y.matmul(&mean).matmul_nt(y)
}

pub fn verify_lemma3(y_features: &Matrix, p: f64, m: usize, n_samples: usize, seed: u64) -> Result<TheoremVerdict> {
    if !(p > 0.0 && p < 1.0) || m < 2 || n_samples == 0 {
        return Err(Error::Config(format!("lemma3 needs p in (0,1), m >= 2, samples > 0; got p={p}, m={m}")));
    }
    let est = sample_key_difference_covariance(y_features, p, m, n_samples, seed);
    let sigma_y = y_features.matmul_nt(y_features);
    let expected = sigma_y.scale(2.0 * (m - 1) as f64 * p * (1.0 - p));
    let rel = est.sub(&expected).frobenius_norm() / sigma_y.frobenius_norm();
    let mut v = TheoremVerdict::checked(
        "lemma3",
        format!("D={} N={} p={p} m={m} n={n_samples}", y_features.rows(), y_features.cols()),
        vec![Check::new("relative_frobenius_error", rel, 5.0 / (n_samples as f64).sqrt())],
    );
    v.record("estimate_frobenius", est.frobenius_norm());
    v.record("expected_frobenius", expected.frobenius_norm());
    Ok(v)
}

/// Optimizer settings for the free bilinear student `Ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OmegaBudget {
    pub steps: usize,
    pub batch_contexts: usize,
    pub lr: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for OmegaBudget {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_contexts: 512,
            lr: 0.05,
            init_std: 0.01,
            seed: 0,
        }
    }
}

/// One sampled batch: query tokens `contexts × D` and keys `contexts·m × D`.
struct BinaryBatch {
    queries: Matrix,
    keys: Matrix,
    m: usize,
}

impl BinaryBatch {
    fn sample<R: Rng + ?Sized>(frames: &FramePair, p: f64, m: usize, contexts: usize, rng: &mut R) -> Self {
        let d = frames.dim();
        let mut queries = Matrix::zeros(contexts, d);
        let mut keys = Matrix::zeros(contexts * m, d);
        for c in 0..contexts {
            binary_token(&frames.x_features, p, rng, queries.row_mut(c));
            for j in 0..m {
                binary_token(&frames.y_features, p, rng, keys.row_mut(c * m + j));
            }
        }
        Self { queries, keys, m }
    }

    fn logits(&self, omega: &Matrix, c: usize) -> Vec<f64> {
        let q = omega.matvec_t(self.queries.row(c));
        (0..self.m).map(|j| dot(&q, self.keys.row(c * self.m + j))).collect()
    }

    /// Mean cross-entropy against the teacher and its gradient in `Ω`.
    fn loss_and_grad(&self, omega: &Matrix, teacher: &Matrix) -> (f64, Matrix) {
        let d = omega.rows();
        let contexts = self.queries.rows();
        let mut grad = Matrix::zeros(d, d);
        let mut loss = 0.0;
        let mut z = vec![0.0; d];
        for c in 0..contexts {
            let ls = self.logits(omega, c);
            let lt = self.logits(teacher, c);
            loss += cross_entropy_logits(&lt, &ls);
            let (ps, pt) = (softmax(&ls), softmax(&lt));
            z.fill(0.0);
            for j in 0..self.m {
                let g = ps[j] - pt[j];
                for (zi, k) in z.iter_mut().zip(self.keys.row(c * self.m + j)) {
                    *zi += g * k;
                }
            }
            let r = self.queries.row(c);
            for a in 0..d {
                for b in 0..d {
                    grad[(a, b)] += r[a] * z[b];
                }
            }
        }
        let inv = 1.0 / contexts as f64;
        (loss * inv, grad.scale(inv))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaFit {
    pub omega: Matrix,
    pub initial_sigma1: f64,
    pub initial_grad_norm: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
}

/// Fits `Ω` to the teacher's attention distribution with AdamW on fresh
/// batches each step and a cosine learning-rate decay.
pub fn fit_omega(
    frames: &FramePair,
    teacher: &TeacherSpec,
    p: f64,
    m: usize,
    budget: &OmegaBudget,
    init: Option<Matrix>,
) -> Result<OmegaFit> {
    check_conditioning(frames)?;
    let d = frames.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut omega =
        init.unwrap_or_else(|| Matrix::from_fn(d, d, |_, _| budget.init_std * rng.sample::<f64, _>(StandardNormal)));
    let initial_sigma1 = svd(&omega)?.sigma[0];
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut moments = Moments::zeros(d * d);
    let mut initial_grad_norm = f64::NAN;
    let (mut final_loss, mut final_grad_norm) = (f64::NAN, f64::NAN);
    for step in 0..budget.steps {
        let batch = BinaryBatch::sample(frames, p, m, budget.batch_contexts, &mut rng);
        let (loss, grad) = batch.loss_and_grad(&omega, &teacher.omega_t);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::OptimizationDiverged(format!("non-finite loss at step {step}")));
        }
        if step == 0 {
            initial_grad_norm = grad.frobenius_norm();
        }
        final_loss = loss;
        final_grad_norm = grad.frobenius_norm();
        let progress = step as f64 / budget.steps as f64;
        let lr = budget.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.step(omega.as_mut_slice(), grad.as_slice(), &mut moments, step + 1, lr);
    }
    Ok(OmegaFit {
        omega,
        initial_sigma1,
        initial_grad_norm,
        final_loss,
        final_grad_norm,
    })
}

pub fn verify_theorem1(
    frames: &FramePair,
    teacher: &TeacherSpec,
    p: f64,
    m: usize,
    budget: &OmegaBudget,
    tol: &Tolerances,
) -> Result<TheoremVerdict> {
    let fit = fit_omega(frames, teacher, p, m, budget, None)?;
    let s = svd(&fit.omega)?;
    let mut v = TheoremVerdict::checked(
        "theorem1",
        format!("D={} N={} alpha={} p={p} m={m}", frames.dim(), frames.x_features.cols(), teacher.alpha),
        vec![
            Check::new("sigma2_over_sigma1", s.sigma[1] / s.sigma[0], tol.rank_ratio),
            Check::new("sin_u1_detector", sin_angle(&s.left(0), &teacher.detector_u), tol.sine),
            Check::new("sin_v1_detector", sin_angle(&s.right(0), &teacher.detector_v), tol.sine),
        ],
    );
    v.record("final_loss", fit.final_loss);
    v.record("final_grad_norm", fit.final_grad_norm);
    v.record("relative_error_to_teacher", fit.omega.sub(&teacher.omega_t).frobenius_norm() / teacher.omega_t.frobenius_norm());
    Ok(v)
}

/// Both sides are scaled antipodal frames `c·[Q, −Q]`, so `Σ = 2c²·I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightSetup {
    pub d: usize,
    pub scale_x: f64,
    pub scale_y: f64,
    pub shared: bool,
    pub seed: u64,
}

impl TightSetup {
    pub fn frames(&self) -> FramePair {
        FramePair::antipodal(self.d, self.scale_x, self.scale_y, self.shared, self.seed)
    }
}

pub fn verify_theorem2(
    setup: &TightSetup,
    alpha: f64,
    p: f64,
    m: usize,
    budget: &OmegaBudget,
    tol: &Tolerances,
) -> Result<TheoremVerdict> {
    let frames = setup.frames();
    let teacher = TeacherSpec::new(&frames, alpha)?;
    let fit = fit_omega(&frames, &teacher, p, m, budget, None)?;
    let s = svd(&fit.omega)?;
    let a = frames.sigma_x.trace() / setup.d as f64;
    let b = frames.sigma_y.trace() / setup.d as f64;
    let predicted = alpha / (a * b) * setup.scale_x * setup.scale_y;
    let mut v = TheoremVerdict::checked(
        "theorem2",
        format!("D={} a={a:.4} b={b:.4} alpha={alpha} p={p} m={m}", setup.d),
        vec![
            Check::new("sin_u1_x1", sin_angle(&s.left(0), &frames.x1()), tol.sine),
            Check::new("sin_v1_y1", sin_angle(&s.right(0), &frames.y1()), tol.sine),
        ],
    );
    v.record("sigma1", s.sigma[0]);
    v.record("predicted_sigma1", predicted);
    v.record("sigma1_relative_gap", (s.sigma[0] - predicted).abs() / predicted);
    v.record(
        "asymmetry",
        fit.omega.sub(&fit.omega.transpose()).frobenius_norm() / fit.omega.frobenius_norm(),
    );
    Ok(v)
}

/// `τ = 4ab + 2a + 2b` for deviation norms `a`, `b`.
pub fn perturbation_tau(ex: f64, ey: f64) -> f64 {
    4.0 * ex * ey + 2.0 * ex + 2.0 * ey
}

pub fn angle_bound(ex: f64, ey: f64) -> f64 {
    8.0 * ex * ey + 4.0 * ex + 4.0 * ey
}

/// Sin angles between the top singular pair of `α·Σ_X⁻¹x₁(Σ_Y⁻¹y₁)ᵀ` and
/// `(x₁, y₁)`, checked against the perturbation bound. Frames outside
/// the bound's preconditions give a not-applicable verdict.
pub fn theorem3_on(frames: &FramePair, alpha: f64, label: String) -> Result<TheoremVerdict> {
    let (ex, ey) = (frames.e_x_norm, frames.e_y_norm);
    let tau = perturbation_tau(ex, ey);
    if !(ex < 0.5 && ey < 0.5 && tau < 0.5) {
        let mut v = TheoremVerdict::not_applicable("theorem3", label, format!("‖E_X‖={ex:.4} ‖E_Y‖={ey:.4} τ={tau:.4}"));
        v.record("tau", tau);
        return Ok(v);
    }
    let teacher = TeacherSpec::new(frames, alpha)?;
    let s = svd(&teacher.omega_t)?;
    let bound = angle_bound(ex, ey);
    let mut v = TheoremVerdict::checked(
        "theorem3",
        label,
        vec![
            Check::new("sin_u1_x1", sin_angle(&s.left(0), &frames.x1()), bound),
            Check::new("sin_v1_y1", sin_angle(&s.right(0), &frames.y1()), bound),
        ],
    );
    v.record("e_x_norm", ex);
    v.record("e_y_norm", ey);
    v.record("tau", tau);
    Ok(v)
}

pub fn verify_theorem3(d: usize, n: usize, target_ex: f64, target_ey: f64, alpha: f64, seed: u64) -> Result<TheoremVerdict> {
    let frames = FramePair::near_isotropic(d, n, target_ex, target_ey, seed)?;
    theorem3_on(&frames, alpha, format!("D={d} N={n} target ‖E_X‖={target_ex} ‖E_Y‖={target_ey} seed={seed}"))
}

/// Runs `draws` independent constructions and reports the largest excess
/// of a measured angle over its own bound.
pub fn theorem3_audit(d: usize, n: usize, target: f64, alpha: f64, draws: usize, seed: u64) -> Result<TheoremVerdict> {
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let mut largest_bound = 0.0f64;
    for k in 0..draws {
        let v = verify_theorem3(d, n, target, target, alpha, seed.wrapping_add(k as u64))?;
        if v.checks.is_empty() {
            continue;
        }
        for c in &v.checks {
            worst = worst.max(c.measured - c.bound);
            largest_bound = largest_bound.max(c.bound);
        }
        if v.bound_satisfied() == Some(false) {
            violations += 1;
        }
    }
    let mut out = TheoremVerdict::checked(
        "theorem3",
        format!("audit D={d} N={n} ‖E‖={target} draws={draws}"),
        vec![Check::new("worst_excess_over_bound", worst, 0.0)],
    );
    out.record("violations", violations as f64);
    out.record("largest_bound", largest_bound);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lemma3_identity_frame_matches_closed_form() {
        let y = Matrix::identity(4);
        let est = sample_key_difference_covariance(&y, 0.5, 4, 200_000, 1);
        assert!(est.max_abs_diff(&Matrix::identity(4).scale(1.5)) < 0.02);
        let v = verify_lemma3(&y, 0.5, 4, 200_000, 2).unwrap();
        assert_eq!(v.bound_satisfied(), Some(true));
    }

    #[test]
    fn lemma3_rare_features_give_tiny_covariance() {
        let est = sample_key_difference_covariance(&Matrix::identity(4), 0.001, 4, 100_000, 3);
        assert!(est.frobenius_norm() < 0.05 * 3.0);
    }

    #[test]
    fn lemma3_single_difference() {
        let f = FramePair::random(5, 7, 9);
        let v = verify_lemma3(&f.y_features, 0.3, 2, 100_000, 4).unwrap();
        assert_eq!(v.bound_satisfied(), Some(true), "{v:?}");
    }

    #[test]
    fn lemma3_rejects_bad_inputs() {
        assert!(verify_lemma3(&Matrix::identity(2), 0.0, 3, 10, 0).is_err());
        assert!(verify_lemma3(&Matrix::identity(2), 0.5, 1, 10, 0).is_err());
    }

    #[test]
    fn omega_gradient_matches_finite_differences() {
        let frames = FramePair::random(4, 6, 1);
        let teacher = TeacherSpec::new(&frames, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = BinaryBatch::sample(&frames, 0.4, 3, 16, &mut rng);
        let omega = Matrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (_, g) = batch.loss_and_grad(&omega, &teacher.omega_t);
        let h = 1e-6;
        for idx in 0..16 {
            let mut plus = omega.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = omega.clone();
            minus.as_mut_slice()[idx] -= h;
            let fd = (batch.loss_and_grad(&plus, &teacher.omega_t).0 - batch.loss_and_grad(&minus, &teacher.omega_t).0) / (2.0 * h);
            assert!((fd - g.as_slice()[idx]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn teacher_is_stationary() {
        let frames = FramePair::random(6, 9, 2);
        let teacher = TeacherSpec::new(&frames, 8.0).unwrap();
        let budget = OmegaBudget { steps: 1, ..OmegaBudget::default() };
        let fit = fit_omega(&frames, &teacher, 0.3, 4, &budget, Some(teacher.omega_t.clone())).unwrap();
        assert!(fit.initial_grad_norm < 1e-12);
    }

    #[test]
    fn zero_teacher_shrinks_omega() {
        let frames = FramePair::random(6, 9, 3);
        let teacher = TeacherSpec::new(&frames, 0.0).unwrap();
        let budget = OmegaBudget { init_std: 1.0, ..OmegaBudget::default() };
        let fit = fit_omega(&frames, &teacher, 0.3, 4, &budget, None).unwrap();
        let s1 = svd(&fit.omega).unwrap().sigma[0];
        assert!(s1 < 0.05 * fit.initial_sigma1, "{s1} vs {}", fit.initial_sigma1);
    }

    #[test]
    fn theorem3_isotropic_limit_is_exact() {
        let v = verify_theorem3(6, 12, 0.0, 0.0, 1.0, 0).unwrap();
        assert_eq!(v.bound_satisfied(), Some(true));
        for c in &v.checks {
            assert!(c.bound < 1e-12 && c.measured < 1e-12);
            assert!(c.margin().abs() < 1e-12);
        }
    }

    #[test]
    fn theorem3_one_sided_perturbation() {
        let v = verify_theorem3(6, 12, 0.1, 0.0, 1.0, 1).unwrap();
        assert_eq!(v.bound_satisfied(), Some(true));
        assert!((v.checks[0].bound - 0.4).abs() < 0.02);
    }

    #[test]
    fn theorem3_outside_preconditions() {
        let v = verify_theorem3(6, 12, 0.3, 0.3, 1.0, 2).unwrap();
        assert_eq!(v.bound_satisfied(), None);
    }

    #[test]
    fn trained_student_recovers_teacher() {
        let tol = Tolerances::default();
        let frames = FramePair::random(6, 9, 0);
        let teacher = TeacherSpec::new(&frames, 8.0).unwrap();
        let v = verify_theorem1(&frames, &teacher, 0.3, 4, &OmegaBudget::default(), &tol).unwrap();
        assert_eq!(v.bound_satisfied(), Some(true));
        assert!(v.recorded["relative_error_to_teacher"] < 1e-3);
    }

    #[test]
    fn symmetric_tight_frames_give_symmetric_student() {
        let tol = Tolerances::default();
        for scale in [1.0, 2.5] {
            let setup = TightSetup { d: 4, scale_x: scale, scale_y: scale, shared: true, seed: 0 };
            let v = verify_theorem2(&setup, 8.0, 0.3, 4, &OmegaBudget::default(), &tol).unwrap();
            assert_eq!(v.bound_satisfied(), Some(true));
            assert!(v.recorded["asymmetry"] < 0.1);
            assert!(v.recorded["sigma1_relative_gap"] < 0.05);
        }
    }

    #[test]
    fn tau_and_bound_formulas() {
        assert!((perturbation_tau(0.05, 0.05) - 0.21).abs() < 1e-15);
        assert!((angle_bound(0.05, 0.05) - 0.42).abs() < 1e-15);
        assert_eq!(angle_bound(0.1, 0.0), 0.4);
    }
}
