//! Measurements on trained heads: singular-vector/feature alignment,
//! feature geometry, relative-attention decomposition and its sparsity,
//! and training dynamics.

mod decomposition;
mod dynamics;

pub use decomposition::{
    centered_key, decompose, n_recon, relative_attention, rotated_baseline, rotated_terms,
    rotation_pair, sparsity_s, DecompositionRecord,
};
pub use dynamics::{
    bootstrap_mean_ci, first_crossing, moving_average, presence_stratified_sparsity,
    stratum_records, training_dynamics, Dynamics, Side, Stratum, StratumSummary, BOOTSTRAP_RESAMPLES,
    SMOOTHING_WINDOW,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{cosine_similarity_matrix, qk_svd, Matrix};
use crate::toy_model::{AttentionHead, FeatureUniverse, TargetSpec};

/// Pass/fail cut-offs for alignment and sparsity summaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub aligned_cos: f64,
    pub sigma_ratio: f64,
    pub sweep_cos: f64,
    pub sparse_present: f64,
    pub dense_absent: f64,
    pub unassigned_cos: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            aligned_cos: 0.9,
            sigma_ratio: 3.0,
            sweep_cos: 0.8,
            sparse_present: 0.35,
            dense_absent: 0.5,
            unassigned_cos: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAlignment {
    pub query: usize,
    pub key: usize,
    pub singular_idx: usize,
    pub cos_u: f64,
    pub cos_v: f64,
}

impl PairAlignment {
    pub fn min_cos(&self) -> f64 {
        self.cos_u.min(self.cos_v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// `|cos(u_k, w_i)|`, singular index by feature.
    pub cos_u_w: Matrix,
    /// `|cos(v_k, w_i)|`
    pub cos_v_w: Matrix,
    pub sigma: Vec<f64>,
    pub pair_assignment: Vec<PairAlignment>,
}

impl AlignmentReport {
    /// Smallest `min(cos_u, cos_v)` over assigned pairs.
    pub fn min_pair_cos(&self) -> f64 {
        self.pair_assignment.iter().map(PairAlignment::min_cos).fold(1.0, f64::min)
    }

    /// Singular index with the largest `|cos|` to feature `i` (left side).
    pub fn best_left(&self, i: usize) -> (usize, f64) {
        best_in_column(&self.cos_u_w, i)
    }

    pub fn best_right(&self, i: usize) -> (usize, f64) {
        best_in_column(&self.cos_v_w, i)
    }
}

fn best_in_column(m: &Matrix, col: usize) -> (usize, f64) {
    (0..m.rows())
        .map(|k| (k, m[(k, col)]))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
}

fn abs_matrix(m: Matrix) -> Matrix {
    let (r, c) = m.shape();
    Matrix::from_vec(r, c, m.into_vec().into_iter().map(f64::abs).collect()).expect("same shape")
}

/// Pairs ranked by descending target logit are assigned singular indices
/// 0, 1, 2, … (clamped to the last index when pairs outnumber the head).
pub fn alignment(universe: &FeatureUniverse, head: &AttentionHead, spec: &TargetSpec) -> Result<AlignmentReport> {
    let s = qk_svd(&head.w_q, &head.w_k)?;
    let cos_u_w = abs_matrix(cosine_similarity_matrix(&s.u, &universe.w)?);
    let cos_v_w = abs_matrix(cosine_similarity_matrix(&s.v, &universe.w)?);
    let last = s.sigma.len() - 1;
    let pair_assignment = spec
        .ranked()
        .iter()
        .enumerate()
        .map(|(rank, e)| {
            let k = rank.min(last);
            PairAlignment {
                query: e.query,
                key: e.key,
                singular_idx: k,
                cos_u: cos_u_w[(k, e.query)],
                cos_v: cos_v_w[(k, e.key)],
            }
        })
        .collect();
    Ok(AlignmentReport {
        cos_u_w,
        cos_v_w,
        sigma: s.sigma,
        pair_assignment,
    })
}

/// Cosine similarities among the columns of `W`.
pub fn feature_geometry(universe: &FeatureUniverse) -> Result<Matrix> {
    cosine_similarity_matrix(&universe.w, &universe.w)
}

/// `‖WWᵀ/τ − I‖_F / √D` with `τ = tr(WWᵀ)/D`.
pub fn isotropy_residual(universe: &FeatureUniverse) -> f64 {
    let d = universe.token_dim();
    let g = universe.w.matmul_nt(&universe.w);
    let tau = g.trace() / d as f64;
    g.scale(1.0 / tau).sub(&Matrix::identity(d)).frobenius_norm() / (d as f64).sqrt()
}

/// Largest `|cos(w_i, w_j)|` over `j` outside `exclude`.
pub fn max_interference(geometry: &Matrix, i: usize, exclude: &[usize]) -> f64 {
    (0..geometry.cols())
        .filter(|j| *j != i && !exclude.contains(j))
        .map(|j| geometry[(i, j)].abs())
        .fold(0.0, f64::max)
}
