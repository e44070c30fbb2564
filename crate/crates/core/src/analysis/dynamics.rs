use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decomposition::{decompose, DecompositionRecord};
use super::alignment;
use crate::error::{Error, Result};
use crate::linalg::{cosine, qk_svd, Matrix};
use crate::toy_model::{sample_strengths, ModelParams, TargetSpec};
use crate::trainer::RunRecord;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const SMOOTHING_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Left,
    Right,
}

/// What to track across checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Dynamics {
    /// Singular vector `index` at checkpoint t₁ against itself at t₂.
    SvSelf { index: usize, side: Side },
    /// Feature `w_i` at t₁ against t₂.
    FeatureSelf { feature: usize },
    /// Per checkpoint and ranked pair, `min(|cos_u|, |cos_v|)` at the
    /// assigned singular index.
    SvFeature,
}

/// Time×time matrices for the self variants, time×pairs for `SvFeature`.
/// All cosines are absolute.
pub fn training_dynamics(run: &RunRecord, what: Dynamics) -> Result<Matrix> {
    let n = run.checkpoints.len();
    if n < 2 {
        return Err(Error::Config(format!("training dynamics need at least 2 checkpoints, run has {n}")));
    }
    let vectors: Vec<Vec<f64>> = match what {
        Dynamics::SvFeature => {
            let rows = run
                .checkpoints
                .par_iter()
                .map(|c| {
                    let r = alignment(&c.params.universe, &c.params.head, &run.spec)?;
                    Ok(r.pair_assignment.iter().map(|p| p.min_cos()).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(Matrix::from_rows(&rows));
        }
        Dynamics::SvSelf { index, side } => run
            .checkpoints
            .iter()
            .map(|c| {
                let s = qk_svd(&c.params.head.w_q, &c.params.head.w_k)?;
                if index >= s.sigma.len() {
                    return Err(Error::Config(format!("singular index {index} out of range")));
                }
                Ok(match side {
                    Side::Left => s.left(index),
                    Side::Right => s.right(index),
                })
            })
            .collect::<Result<_>>()?,
        Dynamics::FeatureSelf { feature } => run
            .checkpoints
            .iter()
            .map(|c| {
                if feature >= c.params.universe.n_features() {
                    return Err(Error::Config(format!("feature {feature} out of range")));
                }
                Ok(c.params.universe.feature(feature))
            })
            .collect::<Result<_>>()?,
    };
    Ok(Matrix::from_fn(n, n, |a, b| cosine(&vectors[a], &vectors[b]).abs()))
}

/// First index whose value exceeds `threshold`.
pub fn first_crossing(values: &[f64], threshold: f64) -> Option<usize> {
    values.iter().position(|v| *v > threshold)
}

/// Trailing moving average; early entries average what is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some((at(tail), at(1.0 - tail)))
}

/// Number of target pairs present in a (query, key) strength pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    #[serde(rename = "0")]
    None,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2+")]
    Many,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::None, Stratum::One, Stratum::Many];

    pub fn classify(spec: &TargetSpec, fq: &[f64], fk: &[f64]) -> Self {
        match spec.entries.iter().filter(|e| fq[e.query] * fk[e.key] > 0.0).count() {
            0 => Stratum::None,
            1 => Stratum::One,
            _ => Stratum::Many,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stratum::None => "0",
            Stratum::One => "1",
            Stratum::Many => "2+",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub step: usize,
    pub stratum: Stratum,
    pub count: usize,
    /// Absent when the stratum is empty.
    pub mean: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

/// Decomposes every (query, key) pair of the evaluation contexts under
/// `params`. `strengths` holds `contexts × m` rows; the last key of each
/// context is its query. Pairs whose terms all vanish are skipped.
pub fn stratum_records(
    params: &ModelParams,
    spec: &TargetSpec,
    strengths: &Matrix,
    context_len: usize,
) -> Result<Vec<(Stratum, DecompositionRecord)>> {
    let s = qk_svd(&params.head.w_q, &params.head.w_k)?;
    let tokens = params.universe.tokens(strengths);
    let mut out = Vec::with_capacity(strengths.rows());
    for c in 0..strengths.rows() / context_len {
        let base = c * context_len;
        let q_row = base + context_len - 1;
        let keys = Matrix::from_fn(context_len, tokens.cols(), |j, d| tokens[(base + j, d)]);
        for j in 0..context_len {
            let stratum = Stratum::classify(spec, strengths.row(q_row), strengths.row(base + j));
            match decompose(&s, tokens.row(q_row), context_len - 1, &keys, j) {
                Ok(rec) => out.push((stratum, rec)),
                Err(Error::ZeroVector) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Mean S(v) per stratum and checkpoint over a fixed evaluation sample
/// drawn from `eval_seed`, with 95% bootstrap intervals.
pub fn presence_stratified_sparsity(
    run: &RunRecord,
    spec: &TargetSpec,
    n_eval_contexts: usize,
    eval_seed: u64,
) -> Result<Vec<StratumSummary>> {
    if spec.is_empty() {
        return Err(Error::Config("presence strata need a nonempty target spec".into()));
    }
    let m = run.model.context_len;
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let strengths = sample_strengths(n_eval_contexts * m, run.model.n_features, run.model.feature_prob, &mut rng);
    let per_ckpt = run
        .checkpoints
        .par_iter()
        .map(|c| {
            let records = stratum_records(&c.params, spec, &strengths, m)?;
            Ok(Stratum::ALL
                .iter()
                .map(|&stratum| {
                    let s: Vec<f64> = records
                        .iter()
                        .filter(|(st, _)| *st == stratum)
                        .map(|(_, r)| r.sparsity_s)
                        .collect();
                    StratumSummary {
                        step: c.step,
                        stratum,
                        count: s.len(),
                        mean: (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64),
                        ci: bootstrap_mean_ci(&s, BOOTSTRAP_RESAMPLES, 0.95, eval_seed ^ c.step as u64),
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_ckpt.into_iter().flatten().collect())
}
