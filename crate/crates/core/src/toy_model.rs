//! Toy autoencoder with an attention head.
//!
//! Tokens are built from sparse feature strengths `f` as `r = W f`, the
//! autoencoder reconstructs `f' = ReLU(Wᵀ r + b)`, and a single attention
//! head scores query/key pairs with `rᵀ W_Qᵀ W_K s`. The head is trained
//! against a teacher distribution given by sparse target logits
//! `Σ T_ij f⁽ʳ⁾_i f⁽ˢ⁾_j`.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_features: usize,
    pub token_dim: usize,
    pub head_dim: usize,
    pub context_len: usize,
    pub feature_prob: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_features: 20,
            token_dim: 10,
            head_dim: 10,
            context_len: 4,
            feature_prob: 0.52,
            lambda: 4.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.token_dim == 0 || self.head_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.head_dim > self.token_dim {
            return Err(Error::Config(format!(
                "head_dim {} exceeds token_dim {}",
                self.head_dim, self.token_dim
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be at least 2".into()));
        }
        if !(self.feature_prob > 0.0 && self.feature_prob < 1.0) {
            return Err(Error::Config(format!(
                "feature_prob {} outside (0, 1)",
                self.feature_prob
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Feature directions (columns of `w`, `D x N`) and decoder bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureUniverse {
    pub w: Matrix,
    pub bias: Vec<f64>,
}

impl FeatureUniverse {
    pub fn n_features(&self) -> usize {
        self.w.cols()
    }

    pub fn token_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn feature(&self, i: usize) -> Vec<f64> {
        self.w.col(i)
    }

    /// Tokens `W f` for each row of `strengths`.
    pub fn tokens(&self, strengths: &Matrix) -> Matrix {
        strengths.matmul_nt(&self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub w_q: Matrix,
    pub w_k: Matrix,
}

impl AttentionHead {
    pub fn head_dim(&self) -> usize {
        self.w_q.rows()
    }

    /// `Ω = W_Qᵀ W_K`
    pub fn omega(&self) -> Matrix {
        self.w_q.matmul_tn(&self.w_k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub query: usize,
    pub key: usize,
    pub logit: f64,
}

/// Sparse table of feature-pair target logits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetSpec {
    pub entries: Vec<TargetEntry>,
}

impl TargetSpec {
    pub fn new(entries: Vec<(usize, usize, f64)>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|(query, key, logit)| TargetEntry { query, key, logit })
                .collect(),
        }
    }

    pub fn single(query: usize, key: usize, logit: f64) -> Self {
        Self::new(vec![(query, key, logit)])
    }

    /// The four-pair teacher used for robustness sweeps:
    /// (0,4)=24, (1,5)=21, (2,6)=18, (3,7)=15.
    pub fn four_pair_default() -> Self {
        Self::new(vec![(0, 4, 24.0), (1, 5, 21.0), (2, 6, 18.0), (3, 7, 15.0)])
    }

    /// Pairs `(i, i + offset)` for `i < n_pairs` with logit `logit(i)`.
    pub fn offset_pairs(n_pairs: usize, offset: usize, logit: impl Fn(usize) -> f64) -> Self {
        Self::new((0..n_pairs).map(|i| (i, i + offset, logit(i))).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.query >= n_features || e.key >= n_features {
                return Err(Error::Config(format!(
                    "target pair ({}, {}) out of range for {} features",
                    e.query, e.key, n_features
                )));
            }
            if !seen.insert((e.query, e.key)) {
                return Err(Error::Config(format!(
                    "duplicate target pair ({}, {})",
                    e.query, e.key
                )));
            }
            if !e.logit.is_finite() {
                return Err(Error::Config("target logits must be finite".into()));
            }
        }
        Ok(())
    }

    /// Entries sorted by descending logit (stable for ties).
    pub fn ranked(&self) -> Vec<TargetEntry> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| b.logit.total_cmp(&a.logit));
        v
    }

    /// `Σ T_ij fq_i fk_j`
    pub fn logit(&self, fq: &[f64], fk: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|e| e.logit * fq[e.query] * fk[e.key])
            .sum()
    }
}

/// A batch of `n_keys` tokens grouped into contexts of `context_len`
/// consecutive keys. The last key of each context is also its query.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    pub strengths: Matrix,
    pub tokens: Matrix,
    pub context_len: usize,
}

impl ContextBatch {
    pub fn from_strengths(universe: &FeatureUniverse, strengths: Matrix, context_len: usize) -> Result<Self> {
        if context_len < 2 || strengths.rows() % context_len != 0 {
            return Err(Error::Config(format!(
                "{} keys do not split into contexts of {}",
                strengths.rows(),
                context_len
            )));
        }
        if strengths.cols() != universe.n_features() {
            return Err(Error::shape("ContextBatch", universe.n_features(), strengths.cols()));
        }
        let tokens = universe.tokens(&strengths);
        Ok(Self {
            strengths,
            tokens,
            context_len,
        })
    }

    pub fn n_keys(&self) -> usize {
        self.tokens.rows()
    }

    pub fn n_contexts(&self) -> usize {
        self.n_keys() / self.context_len
    }

    /// Row index of key `j` in context `c`.
    #[inline]
    pub fn key_row(&self, c: usize, j: usize) -> usize {
        c * self.context_len + j
    }

    #[inline]
    pub fn query_row(&self, c: usize) -> usize {
        self.key_row(c, self.context_len - 1)
    }
}

/// Draws `f_i = a_i b_i`, `a_i ~ Bernoulli(p)`, `b_i ~ U(0, 1)`.
/// `b_i` is drawn only when `a_i = 1`.
pub fn sample_strengths<R: Rng + ?Sized>(rows: usize, n_features: usize, p: f64, rng: &mut R) -> Matrix {
    let mut f = Matrix::zeros(rows, n_features);
    for x in f.as_mut_slice() {
        if rng.gen_bool(p) {
            *x = rng.gen::<f64>();
        }
    }
    f
}

pub fn sample_batch<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    universe: &FeatureUniverse,
    n_keys: usize,
    rng: &mut R,
) -> Result<ContextBatch> {
    if n_keys % cfg.context_len != 0 {
        return Err(Error::Config(format!(
            "n_keys {} not divisible by context_len {}",
            n_keys, cfg.context_len
        )));
    }
    let f = sample_strengths(n_keys, cfg.n_features, cfg.feature_prob, rng);
    ContextBatch::from_strengths(universe, f, cfg.context_len)
}

/// `ReLU(Wᵀ r + b)` for each token row.
pub fn reconstruct(universe: &FeatureUniverse, tokens: &Matrix) -> Result<Matrix> {
    if tokens.cols() != universe.token_dim() {
        return Err(Error::shape("reconstruct", universe.token_dim(), tokens.cols()));
    }
    let mut z = tokens.matmul(&universe.w);
    for i in 0..z.rows() {
        for (x, b) in z.row_mut(i).iter_mut().zip(&universe.bias) {
            *x = (*x + b).max(0.0);
        }
    }
    Ok(z)
}

/// Student logits `rᵀ Ω s_j`, one vector of `m` per context.
pub fn attention_logits(head: &AttentionHead, batch: &ContextBatch) -> Vec<Vec<f64>> {
    let keys = batch.tokens.matmul_nt(&head.w_k);
    let q_all = batch.tokens.matmul_nt(&head.w_q);
    (0..batch.n_contexts())
        .map(|c| {
            let q = q_all.row(batch.query_row(c));
            (0..batch.context_len)
                .map(|j| dot(q, keys.row(batch.key_row(c, j))))
                .collect()
        })
        .collect()
}

pub fn target_logits(spec: &TargetSpec, batch: &ContextBatch) -> Vec<Vec<f64>> {
    (0..batch.n_contexts())
        .map(|c| {
            let fq = batch.strengths.row(batch.query_row(c));
            (0..batch.context_len)
                .map(|j| spec.logit(fq, batch.strengths.row(batch.key_row(c, j))))
                .collect()
        })
        .collect()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-Σ_j softmax(target)_j log softmax(student)_j`, via log-sum-exp.
pub fn cross_entropy_logits(target: &[f64], student: &[f64]) -> f64 {
    let p = softmax(target);
    let lse = log_sum_exp(student);
    p.iter().zip(student).map(|(pj, lj)| pj * (lse - lj)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub attn: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Matrix,
    pub bias: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
}

/// Trainable state of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub universe: FeatureUniverse,
    pub head: AttentionHead,
}

pub const BLOCK_NAMES: [&str; 4] = ["w", "bias", "w_q", "w_k"];

impl ModelParams {
    /// Gaussian init with std `1/√D` for `W`, `W_Q`, `W_K`; zero bias.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let std = 1.0 / (cfg.token_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut draw = |r, c| Matrix::from_fn(r, c, |_, _| rng.sample(normal));
        let w = draw(cfg.token_dim, cfg.n_features);
        let w_q = draw(cfg.head_dim, cfg.token_dim);
        let w_k = draw(cfg.head_dim, cfg.token_dim);
        Self {
            universe: FeatureUniverse {
                w,
                bias: vec![0.0; cfg.n_features],
            },
            head: AttentionHead { w_q, w_k },
        }
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [
            self.universe.w.as_slice(),
            &self.universe.bias,
            self.head.w_q.as_slice(),
            self.head.w_k.as_slice(),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.universe.w.as_mut_slice(),
            &mut self.universe.bias,
            self.head.w_q.as_mut_slice(),
            self.head.w_k.as_mut_slice(),
        ]
    }
}

impl Gradients {
    pub fn blocks(&self) -> [&[f64]; 4] {
        [self.w.as_slice(), &self.bias, self.w_q.as_slice(), self.w_k.as_slice()]
    }
}

fn check_shapes(cfg: &ModelConfig, universe: &FeatureUniverse, head: &AttentionHead, batch: &ContextBatch) -> Result<()> {
    let (d, n, h) = (cfg.token_dim, cfg.n_features, cfg.head_dim);
    if universe.w.shape() != (d, n) || universe.bias.len() != n {
        return Err(Error::shape("feature universe", format!("{d}x{n}"), format!("{:?}", universe.w.shape())));
    }
    if head.w_q.shape() != (h, d) || head.w_k.shape() != (h, d) {
        return Err(Error::shape("attention head", format!("{h}x{d}"), format!("{:?}", head.w_q.shape())));
    }
    if batch.strengths.cols() != n || batch.tokens.cols() != d || batch.context_len != cfg.context_len {
        return Err(Error::shape("batch", format!("N={n}, D={d}, m={}", cfg.context_len), format!("{:?}", batch.tokens.shape())));
    }
    Ok(())
}

pub fn loss(
    cfg: &ModelConfig,
    universe: &FeatureUniverse,
    head: &AttentionHead,
    spec: &TargetSpec,
    batch: &ContextBatch,
) -> Result<LossBreakdown> {
    Ok(loss_and_gradients(cfg, universe, head, spec, batch)?.0)
}

pub fn gradients(
    cfg: &ModelConfig,
    universe: &FeatureUniverse,
    head: &AttentionHead,
    spec: &TargetSpec,
    batch: &ContextBatch,
) -> Result<Gradients> {
    Ok(loss_and_gradients(cfg, universe, head, spec, batch)?.1)
}

/// Forward pass and exact backward pass of `recon + λ·attn`.
///
/// Reconstruction loss is the element-wise mean of `(f − f')²` over tokens
/// and features; attention
/// loss is the mean over contexts of the teacher/student cross-entropy.
/// Attention gradients flow into `W` through the tokens.
pub fn loss_and_gradients(
    cfg: &ModelConfig,
    universe: &FeatureUniverse,
    head: &AttentionHead,
    spec: &TargetSpec,
    batch: &ContextBatch,
) -> Result<(LossBreakdown, Gradients)> {
    check_shapes(cfg, universe, head, batch)?;
    let n = batch.n_keys();
    let m = batch.context_len;
    let n_ctx = batch.n_contexts();
    let x = &batch.tokens;
    let f = &batch.strengths;

    // reconstruction
    let mut dz = x.matmul(&universe.w);
    let mut recon = 0.0;
    let inv_n = 1.0 / (n * universe.n_features()) as f64;
    for i in 0..n {
        let f_row = f.row(i);
        for (k, z) in dz.row_mut(i).iter_mut().enumerate() {
            let pre = *z + universe.bias[k];
            let out = pre.max(0.0);
            let diff = out - f_row[k];
            recon += diff * diff;
            *z = if pre > 0.0 { 2.0 * diff * inv_n } else { 0.0 };
        }
    }
    recon *= inv_n;

    let mut grad_w = x.matmul_tn(&dz);
    let mut grad_b = vec![0.0; universe.bias.len()];
    for i in 0..n {
        for (g, d) in grad_b.iter_mut().zip(dz.row(i)) {
            *g += d;
        }
    }
    let mut dx = dz.matmul(&universe.w.transpose());

    // attention
    let keys = x.matmul_nt(&head.w_k);
    let queries: Vec<usize> = (0..n_ctx).map(|c| batch.query_row(c)).collect();
    let q_tokens = Matrix::from_fn(n_ctx, x.cols(), |c, j| x[(queries[c], j)]);
    let q_proj = q_tokens.matmul_nt(&head.w_q);

    let mut attn = 0.0;
    let mut d_keys = Matrix::zeros(n, head.head_dim());
    let mut d_q = Matrix::zeros(n_ctx, head.head_dim());
    let scale = cfg.lambda / n_ctx as f64;
    let mut student = vec![0.0; m];
    let mut target = vec![0.0; m];
    for c in 0..n_ctx {
        let q = q_proj.row(c);
        let fq = f.row(queries[c]);
        for j in 0..m {
            let row = batch.key_row(c, j);
            student[j] = dot(q, keys.row(row));
            target[j] = spec.logit(fq, f.row(row));
        }
        let p_t = softmax(&target);
        let lse = log_sum_exp(&student);
        let mut ce = 0.0;
        for j in 0..m {
            ce += p_t[j] * (lse - student[j]);
        }
        attn += ce;
        if scale == 0.0 {
            continue;
        }
        let p_s = softmax(&student);
        for j in 0..m {
            let g = scale * (p_s[j] - p_t[j]);
            if g == 0.0 {
                continue;
            }
            let row = batch.key_row(c, j);
            let k_row = keys.row(row);
            for (dq, kv) in d_q.row_mut(c).iter_mut().zip(k_row) {
                *dq += g * kv;
            }
            for (dk, qv) in d_keys.row_mut(row).iter_mut().zip(q) {
                *dk += g * qv;
            }
        }
    }
    attn /= n_ctx as f64;

    let grad_wq = d_q.matmul_tn(&q_tokens);
    let grad_wk = d_keys.matmul_tn(x);
    dx.add_scaled(&d_keys.matmul(&head.w_k), 1.0);
    let dq_tokens = d_q.matmul(&head.w_q);
    for (c, &row) in queries.iter().enumerate() {
        for (a, b) in dx.row_mut(row).iter_mut().zip(dq_tokens.row(c)) {
            *a += b;
        }
    }
    // tokens = F Wᵀ
    grad_w.add_scaled(&dx.matmul_tn(f), 1.0);

    let breakdown = LossBreakdown {
        recon,
        attn,
        total: recon + cfg.lambda * attn,
    };
    Ok((
        breakdown,
        Gradients {
            w: grad_w,
            bias: grad_b,
            w_q: grad_wq,
            w_k: grad_wk,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, n_keys: usize) -> (ModelConfig, ModelParams, TargetSpec, ContextBatch) {
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&cfg, &mut rng);
        for b in params.universe.bias.iter_mut() {
            *b = rng.gen_range(-0.3..0.1);
        }
        let batch = sample_batch(&cfg, &params.universe, n_keys, &mut rng).unwrap();
        (cfg, params, TargetSpec::four_pair_default(), batch)
    }

    // Independent, deliberately naive evaluation of the loss.
    fn reference_loss(cfg: &ModelConfig, p: &ModelParams, spec: &TargetSpec, batch: &ContextBatch) -> (f64, f64) {
        let (d, nf) = p.universe.w.shape();
        let n = batch.n_keys();
        let mut recon = 0.0;
        for t in 0..n {
            let f = batch.strengths.row(t);
            let tok: Vec<f64> = (0..d).map(|i| (0..nf).map(|k| p.universe.w[(i, k)] * f[k]).sum()).collect();
            for k in 0..nf {
                let z: f64 = (0..d).map(|i| p.universe.w[(i, k)] * tok[i]).sum::<f64>() + p.universe.bias[k];
                let e = z.max(0.0) - f[k];
                recon += e * e;
            }
        }
        recon /= (n * nf) as f64;
        let omega = p.head.omega();
        let m = cfg.context_len;
        let mut attn = 0.0;
        for c in 0..n / m {
            let r = batch.tokens.row(c * m + m - 1);
            let fr = batch.strengths.row(c * m + m - 1);
            let mut ls = vec![];
            let mut lt = vec![];
            for j in 0..m {
                let s = batch.tokens.row(c * m + j);
                let fs = batch.strengths.row(c * m + j);
                ls.push((0..d).map(|a| (0..d).map(|b| r[a] * omega[(a, b)] * s[b]).sum::<f64>()).sum::<f64>());
                lt.push(spec.entries.iter().map(|e| e.logit * fr[e.query] * fs[e.key]).sum::<f64>());
            }
            let zt: f64 = lt.iter().map(|v| v.exp()).sum();
            let zs: f64 = ls.iter().map(|v| v.exp()).sum();
            for j in 0..m {
                attn -= (lt[j].exp() / zt) * (ls[j].exp() / zs).ln();
            }
        }
        (recon, attn / (n / m) as f64)
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = ModelConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let a = sample_batch(&cfg, &params.universe, 64, &mut r1).unwrap();
        let b = sample_batch(&cfg, &params.universe, 64, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_batch_rejects_indivisible() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let err = sample_batch(&cfg, &params.universe, 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn near_one_probability_fills_strengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = sample_strengths(500, 20, 0.999, &mut rng);
        let nz = f.as_slice().iter().filter(|&&x| x > 0.0).count();
        assert!(nz as f64 / 10_000.0 > 0.99);
    }

    #[test]
    fn nonzero_count_matches_binomial_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = 100_000;
        let f = sample_strengths(rows, 20, 0.52, &mut rng);
        let nz = f.as_slice().iter().filter(|&&x| x > 0.0).count() as f64 / rows as f64;
        let sd = (20.0f64 * 0.52 * 0.48 / rows as f64).sqrt();
        assert!((nz - 10.4).abs() < 3.0 * sd, "{nz}");
    }

    #[test]
    fn one_hot_token_is_feature_column() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let mut f = Matrix::zeros(1, 20);
        f[(0, 7)] = 1.0;
        let t = params.universe.tokens(&f);
        assert_eq!(t.row(0), params.universe.feature(7).as_slice());
    }

    #[test]
    fn reconstruct_orthonormal_case() {
        let universe = FeatureUniverse {
            w: Matrix::identity(4),
            bias: vec![0.0; 4],
        };
        let mut f = Matrix::zeros(1, 4);
        f[(0, 2)] = 0.7;
        let out = reconstruct(&universe, &universe.tokens(&f)).unwrap();
        assert_eq!(out.row(0), &[0.0, 0.0, 0.7, 0.0]);
    }

    #[test]
    fn reconstruct_saturates_with_negative_bias() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        params.universe.bias = vec![-10.0; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tokens = Matrix::from_fn(16, 10, |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..16 {
            let n = crate::linalg::norm(tokens.row(i));
            for x in tokens.row_mut(i) {
                *x /= n;
            }
        }
        let out = reconstruct(&params.universe, &tokens).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_matches_direct_formula() {
        let (_, params, _, batch) = setup(6, 8);
        let out = reconstruct(&params.universe, &batch.tokens).unwrap();
        let wtw = params.universe.w.matmul_tn(&params.universe.w);
        for t in 0..8 {
            let direct = wtw.matvec(batch.strengths.row(t));
            for k in 0..20 {
                let want = (direct[k] + params.universe.bias[k]).max(0.0);
                assert!((out[(t, k)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_omega_gives_zero_logits() {
        let (_, mut params, _, batch) = setup(7, 16);
        params.head.w_k = Matrix::zeros(10, 10);
        for ctx in attention_logits(&params.head, &batch) {
            assert!(ctx.iter().all(|&l| l == 0.0));
        }
    }

    #[test]
    fn identity_omega_gives_squared_norm() {
        let (_, mut params, _, batch) = setup(8, 16);
        params.head = AttentionHead {
            w_q: Matrix::identity(10),
            w_k: Matrix::identity(10),
        };
        let logits = attention_logits(&params.head, &batch);
        for (c, ctx) in logits.iter().enumerate() {
            let r = batch.tokens.row(batch.query_row(c));
            assert!((ctx[3] - dot(r, r)).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_match_two_step_evaluation() {
        let (_, params, _, batch) = setup(9, 32);
        let logits = attention_logits(&params.head, &batch);
        for (c, ctx) in logits.iter().enumerate() {
            let q = params.head.w_q.matvec(batch.tokens.row(batch.query_row(c)));
            for (j, &l) in ctx.iter().enumerate() {
                let k = params.head.w_k.matvec(batch.tokens.row(batch.key_row(c, j)));
                assert!((l - dot(&q, &k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_target_gives_uniform_teacher() {
        let (_, _, _, batch) = setup(10, 16);
        let t = target_logits(&TargetSpec::default(), &batch);
        for ctx in t {
            assert!(ctx.iter().all(|&v| v == 0.0));
            assert!(softmax(&ctx).iter().all(|&p| (p - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn single_target_product() {
        let spec = TargetSpec::single(0, 1, 1.0);
        let mut fq = vec![0.0; 4];
        let mut fk = vec![0.0; 4];
        fq[0] = 0.5;
        fk[1] = 0.8;
        assert!((spec.logit(&fq, &fk) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn four_pair_targets_match_dense_bilinear() {
        let (_, _, spec, batch) = setup(11, 64);
        let mut dense = Matrix::zeros(20, 20);
        dense[(0, 4)] = 24.0;
        dense[(1, 5)] = 21.0;
        dense[(2, 6)] = 18.0;
        dense[(3, 7)] = 15.0;
        let t = target_logits(&spec, &batch);
        for (c, ctx) in t.iter().enumerate() {
            let fq = batch.strengths.row(batch.query_row(c));
            for (j, &v) in ctx.iter().enumerate() {
                let fk = batch.strengths.row(batch.key_row(c, j));
                let want = dot(fq, &dense.matvec(fk));
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_at_equal_logits_is_teacher_entropy() {
        // m=2, both teacher and student logits zero
        let cfg = ModelConfig {
            context_len: 2,
            ..ModelConfig::default()
        };
        let universe = FeatureUniverse {
            w: Matrix::identity(10).leading_columns(10),
            bias: vec![0.0; 10],
        };
        let cfg = ModelConfig {
            n_features: 10,
            ..cfg
        };
        let head = AttentionHead {
            w_q: Matrix::zeros(10, 10),
            w_k: Matrix::zeros(10, 10),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = sample_batch(&cfg, &universe, 32, &mut rng).unwrap();
        let l = loss(&cfg, &universe, &head, &TargetSpec::default(), &batch).unwrap();
        assert!(l.recon.abs() < 1e-24);
        assert!((l.attn - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l.total - (l.recon + cfg.lambda * l.attn)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_at_equality_is_entropy() {
        let a = [0.3, -1.2, 2.0, 0.0];
        let p = softmax(&a);
        let h: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        assert!((cross_entropy_logits(&a, &a) - h).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_reference_implementation() {
        let (cfg, params, spec, batch) = setup(13, 32);
        let l = loss(&cfg, &params.universe, &params.head, &spec, &batch).unwrap();
        let (recon, attn) = reference_loss(&cfg, &params, &spec, &batch);
        assert!((l.recon - recon).abs() < 1e-10);
        assert!((l.attn - attn).abs() < 1e-10);
    }

    #[test]
    fn lambda_zero_kills_head_gradients() {
        let (mut cfg, params, spec, batch) = setup(14, 64);
        cfg.lambda = 0.0;
        let g = gradients(&cfg, &params.universe, &params.head, &spec, &batch).unwrap();
        assert!(g.w_q.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.w_k.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn orthonormal_features_are_stationary_for_reconstruction() {
        let cfg = ModelConfig {
            n_features: 10,
            lambda: 0.0,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut params = ModelParams::init(&cfg, &mut rng);
        params.universe.w = crate::linalg::haar_orthogonal(10, &mut rng);
        let batch = sample_batch(&cfg, &params.universe, 128, &mut rng).unwrap();
        let g = gradients(&cfg, &params.universe, &params.head, &TargetSpec::default(), &batch).unwrap();
        assert!(g.w.frobenius_norm() < 1e-12);
    }

    #[test]
    fn shift_invariance_of_student_logits() {
        // adding c·1 to every student logit of a context leaves CE unchanged
        let t = [1.0, 0.5, -0.2, 3.0];
        let s = [0.1, -0.4, 2.2, 0.7];
        let shifted: Vec<f64> = s.iter().map(|v| v + 17.5).collect();
        assert!((cross_entropy_logits(&t, &s) - cross_entropy_logits(&t, &shifted)).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_bad_targets() {
        assert!(TargetSpec::single(0, 25, 1.0).validate(20).is_err());
        assert!(TargetSpec::new(vec![(0, 1, 1.0), (0, 1, 2.0)]).validate(20).is_err());
        assert!(TargetSpec::four_pair_default().validate(20).is_ok());
    }
}
