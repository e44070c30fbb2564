//! One-axis parameter sweeps over full training runs, the over-capacity
//! study and early/late sparsity tables.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{alignment, presence_stratified_sparsity, stratum_records, PairAlignment, Stratum, StratumSummary};
use crate::error::{Error, Result};
use crate::toy_model::{sample_strengths, ModelConfig, TargetSpec};
use crate::trainer::{train, RunRecord, TrainConfig};

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub spec: TargetSpec,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                steps: 20_000,
                checkpoint_every: 20_000,
                ..TrainConfig::default()
            },
            spec: TargetSpec::four_pair_default(),
        }
    }
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.spec.validate(self.model.n_features)?;
        self.train.validate(&self.model)
    }
}

/// A named parameter a sweep can vary.
pub trait SweepAxis: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, base: &CellConfig, value: f64) -> Result<CellConfig>;
}

fn as_count(axis: &str, value: f64) -> Result<usize> {
    if value >= 0.0 && value.fract() == 0.0 && value < 1e12 {
        Ok(value as usize)
    } else {
        Err(Error::Config(format!("axis {axis} needs a non-negative integer, got {value}")))
    }
}

macro_rules! model_axis {
    ($ty:ident, $name:literal, |$cfg:ident, $v:ident| $body:expr) => {
        pub struct $ty;

        impl SweepAxis for $ty {
            fn name(&self) -> &'static str {
                $name
            }

            fn apply(&self, base: &CellConfig, $v: f64) -> Result<CellConfig> {
                let mut $cfg = base.clone();
                $body;
                $cfg.validate()?;
                Ok($cfg)
            }
        }
    };
}

model_axis!(FeatureProbAxis, "feature_prob", |c, v| c.model.feature_prob = v);
model_axis!(LambdaAxis, "lambda", |c, v| c.model.lambda = v);
model_axis!(NFeaturesAxis, "n_features", |c, v| c.model.n_features = as_count("n_features", v)?);
model_axis!(HeadDimAxis, "head_dim", |c, v| c.model.head_dim = as_count("head_dim", v)?);
model_axis!(ContextLenAxis, "context_len", |c, v| {
    c.model.context_len = as_count("context_len", v)?;
    // Keep the number of keys per batch close to the base while staying
    // a whole number of contexts.
    let m = c.model.context_len.max(1);
    c.train.batch_keys = (c.train.batch_keys / m).max(1) * m;
});
model_axis!(SeedAxis, "seed", |c, v| c.model.seed = as_count("seed", v)? as u64);
model_axis!(NPairsAxis, "n_pairs", |c, v| {
    let n = as_count("n_pairs", v)?;
    c.spec = capacity_target(n, c.model.n_features)?;
});

/// Pairs `(i, i + N/2)` with logit `1 + n − i`.
pub fn capacity_target(n_pairs: usize, n_features: usize) -> Result<TargetSpec> {
    let offset = n_features / 2;
    if n_pairs == 0 || n_pairs > offset {
        return Err(Error::Config(format!(
            "{n_pairs} pairs do not fit in {n_features} features as (i, i + {offset})"
        )));
    }
    Ok(TargetSpec::offset_pairs(n_pairs, offset, |i| (1 + n_pairs - i) as f64))
}

pub struct AxisRegistry {
    axes: Vec<Box<dyn SweepAxis>>,
}

impl Default for AxisRegistry {
    fn default() -> Self {
        Self {
            axes: vec![
                Box::new(FeatureProbAxis),
                Box::new(LambdaAxis),
                Box::new(NFeaturesAxis),
                Box::new(HeadDimAxis),
                Box::new(ContextLenAxis),
                Box::new(SeedAxis),
                Box::new(NPairsAxis),
            ],
        }
    }
}

impl AxisRegistry {
    pub fn register(&mut self, axis: Box<dyn SweepAxis>) {
        self.axes.retain(|a| a.name() != axis.name());
        self.axes.push(axis);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.axes.iter().map(|a| a.name()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn SweepAxis> {
        self.axes
            .iter()
            .find(|a| a.name() == name)
            .map(|a| a.as_ref())
            .ok_or_else(|| Error::UnknownName {
                kind: "sweep axis",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }
}

/// Default tick values per axis. The probability and penalty ladders are
/// geometric.
pub fn default_values(axis: &str) -> Option<Vec<f64>> {
    Some(match axis {
        "feature_prob" => vec![0.52, 0.27, 0.14, 0.073, 0.052, 0.038, 0.02],
        "lambda" => vec![0.4, 1.3, 4.0, 12.6, 40.0],
        "n_features" => vec![12.0, 16.0, 20.0, 30.0, 40.0],
        "head_dim" => vec![10.0, 8.0, 6.0, 4.0],
        "context_len" => vec![2.0, 4.0, 8.0],
        "seed" => vec![0.0, 1.0, 2.0, 3.0, 4.0],
        "n_pairs" => vec![1.0, 2.0, 3.0, 4.0],
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub base: CellConfig,
    pub axis: String,
    pub values: Vec<f64>,
    pub replicates: usize,
    /// Cells below `escalate_below` are retrained with this many steps.
    pub escalate_steps: Option<usize>,
    pub escalate_below: f64,
    /// Worker threads; all available when absent.
    pub workers: Option<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            base: CellConfig::default(),
            axis: "lambda".into(),
            values: default_values("lambda").expect("known axis"),
            replicates: 1,
            escalate_steps: Some(80_000),
            escalate_below: 0.8,
            workers: None,
        }
    }
}

impl SweepSpec {
    pub fn for_axis(axis: &str) -> Result<Self> {
        let values = default_values(axis).ok_or_else(|| Error::UnknownName {
            kind: "sweep axis",
            name: axis.to_string(),
            available: AxisRegistry::default().names().join(", "),
        })?;
        Ok(Self {
            axis: axis.to_string(),
            values,
            ..Self::default()
        })
    }

    /// Config for one cell. Replicates shift the model seed.
    pub fn cell_config(&self, registry: &AxisRegistry, value: f64, replicate: usize) -> Result<CellConfig> {
        let mut cfg = registry.get(&self.axis)?.apply(&self.base, value)?;
        cfg.model.seed = cfg.model.seed.wrapping_add(replicate as u64);
        Ok(cfg)
    }

    pub fn validate(&self, registry: &AxisRegistry) -> Result<()> {
        if self.values.is_empty() || self.replicates == 0 {
            return Err(Error::Config("sweep needs at least one value and one replicate".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        for &v in &self.values {
            self.cell_config(registry, v, 0)?;
        }
        Ok(())
    }
}

pub fn cell_id(axis: &str, value: f64, replicate: usize) -> String {
    format!("{axis}={value}-r{replicate}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub run_id: String,
    pub axis_value: f64,
    pub replicate: usize,
    pub steps: usize,
    pub escalated: bool,
    pub pairs: Vec<PairAlignment>,
    pub final_recon: Option<f64>,
    pub final_attn: Option<f64>,
    pub error: Option<String>,
}

impl SweepCell {
    /// Smallest `min(cos_u, cos_v)` over pairs; `None` for failed cells.
    pub fn min_cos(&self) -> Option<f64> {
        if self.error.is_some() {
            return None;
        }
        Some(self.pairs.iter().map(PairAlignment::min_cos).fold(1.0, f64::min))
    }
}

fn train_cell(cfg: &CellConfig) -> Result<(RunRecord, Vec<PairAlignment>)> {
    let run = train(&cfg.model, &cfg.spec, &cfg.train)?;
    let last = run.last();
    let report = alignment(&last.params.universe, &last.params.head, &cfg.spec)?;
    Ok((run, report.pair_assignment))
}

/// Trains one cell, escalating the step budget once when alignment falls
/// short.
pub fn run_cell(spec: &SweepSpec, registry: &AxisRegistry, value: f64, replicate: usize) -> (SweepCell, Option<RunRecord>) {
    let mut cell = SweepCell {
        run_id: cell_id(&spec.axis, value, replicate),
        axis_value: value,
        replicate,
        steps: 0,
        escalated: false,
        pairs: Vec::new(),
        final_recon: None,
        final_attn: None,
        error: None,
    };
    let outcome = spec.cell_config(registry, value, replicate).and_then(|mut cfg| {
        let (mut run, mut pairs) = train_cell(&cfg)?;
        let short = pairs.iter().map(PairAlignment::min_cos).fold(1.0, f64::min) <= spec.escalate_below;
        if let Some(steps) = spec.escalate_steps.filter(|s| short && *s > cfg.train.steps) {
            cfg.train.checkpoint_every = cfg.train.checkpoint_every * steps / cfg.train.steps;
            cfg.train.steps = steps;
            (run, pairs) = train_cell(&cfg)?;
            cell.escalated = true;
        }
        Ok((run, pairs))
    });
    match outcome {
        Ok((run, pairs)) => {
            let last = run.last();
            cell.steps = last.step;
            cell.final_recon = Some(last.loss.recon);
            cell.final_attn = Some(last.loss.attn);
            cell.pairs = pairs;
            (cell, Some(run))
        }
        Err(e) => {
            cell.error = Some(e.to_string());
            (cell, None)
        }
    }
}

/// Runs every (value, replicate) cell. Failed cells are recorded and the
/// sweep continues. `on_cell` sees each finished cell with its run.
pub fn run_sweep(
    spec: &SweepSpec,
    registry: &AxisRegistry,
    on_cell: &(dyn Fn(&SweepCell, Option<&RunRecord>) -> Result<()> + Sync),
) -> Result<Vec<SweepCell>> {
    spec.validate(registry)?;
    let jobs: Vec<(f64, usize)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.replicates).map(move |r| (v, r)))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(v, r)| {
                let (cell, run) = run_cell(spec, registry, v, r);
                on_cell(&cell, run.as_ref())?;
                Ok(cell)
            })
            .collect::<Result<Vec<_>>>()
    };
    match spec.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// One line of `sweep_summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis_value: f64,
    pub replicate: usize,
    pub pair_idx: usize,
    pub cos_u: f64,
    pub cos_v: f64,
    pub sigma_idx: usize,
    pub final_recon: f64,
    pub final_attn: f64,
}

pub fn summary_rows(cells: &[SweepCell]) -> Vec<SummaryRow> {
    cells
        .iter()
        .flat_map(|c| {
            c.pairs.iter().enumerate().map(move |(k, p)| SummaryRow {
                axis_value: c.axis_value,
                replicate: c.replicate,
                pair_idx: k,
                cos_u: p.cos_u,
                cos_v: p.cos_v,
                sigma_idx: p.singular_idx,
                final_recon: c.final_recon.unwrap_or(f64::NAN),
                final_attn: c.final_attn.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPlacement {
    pub query: usize,
    pub key: usize,
    pub logit: f64,
    /// Singular index maximizing `min(|cos_u|, |cos_v|)`.
    pub best_idx: usize,
    pub best_cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub n_pairs: usize,
    pub sigma: Vec<f64>,
    /// Ranked pairs by singular index: `min(|cos_u|, |cos_v|)`.
    pub heatmap: Vec<Vec<f64>>,
    pub placements: Vec<PairPlacement>,
    /// Ranks of pairs whose best index is the last singular vector.
    pub collapsed: Vec<usize>,
}

/// Places each ranked pair on the singular vector it aligns with best.
pub fn capacity_result(run: &RunRecord) -> Result<CapacityResult> {
    let last = run.last();
    let report = alignment(&last.params.universe, &last.params.head, &run.spec)?;
    let k = report.sigma.len();
    let ranked = run.spec.ranked();
    let heatmap: Vec<Vec<f64>> = ranked
        .iter()
        .map(|e| (0..k).map(|s| report.cos_u_w[(s, e.query)].min(report.cos_v_w[(s, e.key)])).collect())
        .collect();
    let placements: Vec<PairPlacement> = ranked
        .iter()
        .zip(&heatmap)
        .map(|(e, row)| {
            let (best_idx, best_cos) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            PairPlacement {
                query: e.query,
                key: e.key,
                logit: e.logit,
                best_idx,
                best_cos,
            }
        })
        .collect();
    let collapsed = placements
        .iter()
        .enumerate()
        .filter(|(_, p)| p.best_idx == k - 1)
        .map(|(r, _)| r)
        .collect();
    Ok(CapacityResult {
        n_pairs: ranked.len(),
        sigma: report.sigma,
        heatmap,
        placements,
        collapsed,
    })
}

/// Trains one model per pair count with targets from [`capacity_target`].
pub fn over_capacity_study(model: &ModelConfig, pair_counts: &[usize], budget: &TrainConfig) -> Result<Vec<CapacityResult>> {
    pair_counts
        .par_iter()
        .map(|&n| {
            let spec = capacity_target(n, model.n_features)?;
            capacity_result(&train(model, &spec, budget)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRow {
    pub step: usize,
    pub stratum: Stratum,
    pub context: usize,
    pub key_idx: usize,
    pub relative_attention: f64,
    pub sparsity_s: f64,
    pub terms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityControl {
    pub early: Vec<StratumSummary>,
    pub late: Vec<StratumSummary>,
    /// A few token pairs per stratum with their per-singular-vector terms,
    /// at the first and last checkpoint.
    pub examples: Vec<ContributionRow>,
}

/// Early/late presence-stratified sparsity on a fixed evaluation sample.
pub fn sparsity_control_study(
    run: &RunRecord,
    spec: &TargetSpec,
    n_eval_contexts: usize,
    examples_per_stratum: usize,
    eval_seed: u64,
) -> Result<SparsityControl> {
    if run.checkpoints.len() < 2 {
        return Err(Error::Config("sparsity control needs at least 2 checkpoints".into()));
    }
    let ends = RunRecord {
        checkpoints: vec![run.first().clone(), run.last().clone()],
        ..run.clone()
    };
    let mut summaries = presence_stratified_sparsity(&ends, spec, n_eval_contexts, eval_seed)?;
    let late = summaries.split_off(Stratum::ALL.len());
    let m = run.model.context_len;
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let strengths = sample_strengths(n_eval_contexts * m, run.model.n_features, run.model.feature_prob, &mut rng);
    let mut examples = Vec::new();
    for c in &ends.checkpoints {
        let records = stratum_records(&c.params, spec, &strengths, m)?;
        for stratum in Stratum::ALL {
            examples.extend(
                records
                    .iter()
                    .enumerate()
                    .filter(|(_, (s, _))| *s == stratum)
                    .take(examples_per_stratum)
                    .map(|(i, (_, r))| ContributionRow {
                        step: c.step,
                        stratum,
                        context: i / m,
                        key_idx: r.key_idx,
                        relative_attention: r.relative_attention,
                        sparsity_s: r.sparsity_s,
                        terms: r.terms.clone(),
                    }),
            );
        }
    }
    Ok(SparsityControl {
        early: summaries,
        late,
        examples,
    })
}
