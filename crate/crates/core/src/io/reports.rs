use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{write_csv, HeadSnapshot, SCHEMA_VERSION};
use crate::analysis::{decompose, rotated_baseline, DecompositionRecord, Stratum};
use crate::error::{Error, Result};
use crate::linalg::{qk_svd, Matrix};
use crate::toy_model::sample_strengths;
use crate::trainer::Checkpoint;
use crate::trainer::RunRecord;

/// JSON envelope for every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema_version: u32,
    pub kind: String,
    pub data: T,
}

impl<T> Report<T> {
    pub fn new(kind: &str, data: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            data,
        }
    }
}

/// One row of a decomposition CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub run_id: String,
    pub step: u64,
    pub head_id: String,
    pub query_idx: usize,
    pub key_idx: usize,
    pub rel_attn: f64,
    pub s_metric: f64,
    pub n_recon: Option<usize>,
    pub rotated: bool,
    pub stratum: Option<String>,
}

pub fn write_decomposition_csv(path: &Path, rows: &[DecompositionRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Decomposition rows for every (query, key) pair of `n_contexts` sampled
/// contexts at one checkpoint, labelled by presence stratum. With
/// `rotate`, each pair also gets a rotated-basis row.
pub fn toy_decomposition_rows(
    run: &RunRecord,
    ckpt: &Checkpoint,
    run_id: &str,
    n_contexts: usize,
    seed: u64,
    rotate: bool,
) -> Result<Vec<DecompositionRow>> {
    let m = run.model.context_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strengths = sample_strengths(n_contexts * m, run.model.n_features, run.model.feature_prob, &mut rng);
    let tokens = ckpt.params.universe.tokens(&strengths);
    let svd = qk_svd(&ckpt.params.head.w_q, &ckpt.params.head.w_k)?;
    let mut rows = Vec::new();
    for c in 0..n_contexts {
        let base = c * m;
        let keys = Matrix::from_fn(m, tokens.cols(), |j, d| tokens[(base + j, d)]);
        let query = tokens.row(base + m - 1);
        for j in 0..m {
            let stratum = Stratum::classify(&run.spec, strengths.row(base + m - 1), strengths.row(base + j));
            let rec = match decompose(&svd, query, m - 1, &keys, j) {
                Ok(r) => r,
                Err(Error::ZeroVector) => continue,
                Err(e) => return Err(e),
            };
            let mut push = |r: &DecompositionRecord, rotated| {
                rows.push(DecompositionRow {
                    run_id: run_id.to_string(),
                    step: ckpt.step as u64,
                    head_id: "toy".into(),
                    query_idx: base + m - 1,
                    key_idx: base + j,
                    rel_attn: r.relative_attention,
                    s_metric: r.sparsity_s,
                    n_recon: r.n_recon,
                    rotated,
                    stratum: Some(stratum.label().to_string()),
                })
            };
            push(&rec, false);
            if rotate {
                let seeds = (seed ^ (2 * (base + j)) as u64, seed ^ (2 * (base + j) + 1) as u64);
                push(&rotated_baseline(&svd, query, m - 1, &keys, j, seeds)?, true);
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTarget {
    /// Matches `L<layer>H<head>` of a dump.
    pub head: String,
    pub dest: usize,
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairSpec {
    pub pairs: Vec<PairTarget>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LmDecomposeOptions {
    pub rotate: bool,
    pub seed: u64,
    /// Positions dropped from every key set (for example a BOS token).
    pub exclude_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRecord {
    pub head_id: String,
    pub checkpoint_step: u64,
    pub dest: usize,
    pub source: usize,
    pub n_keys: usize,
    pub record: DecompositionRecord,
    pub rotated: Option<DecompositionRecord>,
}

impl LmRecord {
    pub fn rows(&self, run_id: &str) -> Vec<DecompositionRow> {
        let row = |r: &DecompositionRecord, rotated| DecompositionRow {
            run_id: run_id.to_string(),
            step: self.checkpoint_step,
            head_id: self.head_id.clone(),
            query_idx: self.dest,
            key_idx: self.source,
            rel_attn: r.relative_attention,
            s_metric: r.sparsity_s,
            n_recon: r.n_recon,
            rotated,
            stratum: None,
        };
        std::iter::once(row(&self.record, false))
            .chain(self.rotated.iter().map(|r| row(r, true)))
            .collect()
    }
}

pub fn head_label(snapshot: &HeadSnapshot) -> String {
    format!("L{}H{}", snapshot.manifest.layer, snapshot.manifest.head)
}

/// Decomposes the listed (destination, source) pairs of this head under a
/// causal mask. Pairs that cannot be scored are skipped and described in
/// the returned notices.
pub fn lm_decompose(snapshot: &HeadSnapshot, pairs: &PairSpec, opts: &LmDecomposeOptions) -> Result<(Vec<LmRecord>, Vec<String>)> {
    let label = head_label(snapshot);
    let seq = snapshot.seq_len();
    for p in pairs.pairs.iter().filter(|p| p.head == label) {
        if p.dest >= seq || p.source >= seq {
            return Err(Error::Config(format!(
                "pair ({}, {}) out of range for {seq} tokens",
                p.dest, p.source
            )));
        }
    }
    let svd = qk_svd(&snapshot.wq, &snapshot.wk)?;
    let mut out = Vec::new();
    let mut notices = Vec::new();
    for p in pairs.pairs.iter().filter(|p| p.head == label) {
        if p.source > p.dest {
            notices.push(format!("{label}: source {} is after destination {}; skipped", p.source, p.dest));
            continue;
        }
        if opts.exclude_positions.contains(&p.dest) || opts.exclude_positions.contains(&p.source) {
            notices.push(format!("{label}: pair ({}, {}) touches an excluded position; skipped", p.dest, p.source));
            continue;
        }
        let positions: Vec<usize> = (0..=p.dest).filter(|i| !opts.exclude_positions.contains(i)).collect();
        if positions.len() < 2 {
            notices.push(format!("{label}: destination {} has fewer than 2 keys; skipped", p.dest));
            continue;
        }
        let keys = Matrix::from_rows(&positions.iter().map(|&i| snapshot.resid.row(i).to_vec()).collect::<Vec<_>>());
        let j = positions.iter().position(|&i| i == p.source).expect("source kept");
        let query = snapshot.resid.row(p.dest);
        let record = match decompose(&svd, query, p.dest, &keys, j) {
            Ok(r) => r,
            Err(Error::ZeroVector) => {
                notices.push(format!("{label}: pair ({}, {}) has all-zero terms; skipped", p.dest, p.source));
                continue;
            }
            Err(e) => return Err(e),
        };
        let rotated = if opts.rotate {
            Some(rotated_baseline(&svd, query, p.dest, &keys, j, (opts.seed, opts.seed.wrapping_add(1)))?)
        } else {
            None
        };
        out.push(LmRecord {
            head_id: label.clone(),
            checkpoint_step: snapshot.manifest.checkpoint_step,
            dest: p.dest,
            source: p.source,
            n_keys: positions.len(),
            record,
            rotated,
        });
    }
    Ok((out, notices))
}
