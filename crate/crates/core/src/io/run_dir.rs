use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_csv, read_json, write_csv, write_json, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::toy_model::{AttentionHead, FeatureUniverse, LossBreakdown, ModelConfig, ModelParams, TargetSpec};
use crate::trainer::{train_with, Checkpoint, Moments, RngState, RunRecord, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"SVFCKPT1";

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub spec: TargetSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LossRow {
    step: usize,
    recon: f64,
    attn: f64,
    total: f64,
}

fn ckpt_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step}.bin"))
}

/// Little-endian layout: magic, step, loss triple, rng state, then the
/// four parameter blocks followed by their first and second moments, each
/// as a length-prefixed `f64` array.
pub fn encode_checkpoint(state: &TrainState, loss: &LossBreakdown) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(state.step as u64).to_le_bytes());
    for v in [loss.recon, loss.attn, loss.total] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&state.rng.seed);
    out.extend_from_slice(&state.rng.stream.to_le_bytes());
    out.extend_from_slice(&state.rng.word_pos.to_le_bytes());
    let blocks = state.params.blocks();
    let arrays = blocks
        .iter()
        .copied()
        .chain(state.moments.iter().map(|m| m.m.as_slice()))
        .chain(state.moments.iter().map(|m| m.v.as_slice()));
    for a in arrays {
        out.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for v in a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: format!("truncated at byte {}", self.at),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self, expected: usize) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Checkpoint {
                path: self.path.to_path_buf(),
                reason: format!("array of length {n} where the config implies {expected}"),
            });
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Inverse of [`encode_checkpoint`]; shapes come from `model`.
pub fn decode_checkpoint(bytes: &[u8], model: &ModelConfig, path: &Path) -> Result<(TrainState, LossBreakdown)> {
    let mut c = Cursor { bytes, at: 0, path };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "not a checkpoint file".into(),
        });
    }
    let step = c.u64()? as usize;
    let loss = LossBreakdown {
        recon: c.f64()?,
        attn: c.f64()?,
        total: c.f64()?,
    };
    let seed: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    let stream = c.u64()?;
    let word_pos = u128::from_le_bytes(c.take(16)?.try_into().expect("16 bytes"));
    let (d, n, h) = (model.token_dim, model.n_features, model.head_dim);
    let lens = [d * n, n, h * d, h * d];
    let mut arrays = Vec::with_capacity(12);
    for k in 0..12 {
        arrays.push(c.array(lens[k % 4])?);
    }
    if c.at != bytes.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - c.at),
        });
    }
    let mut it = arrays.into_iter();
    let mut next = || it.next().expect("12 arrays");
    let params = ModelParams {
        universe: FeatureUniverse {
            w: Matrix::from_vec(d, n, next())?,
            bias: next(),
        },
        head: AttentionHead {
            w_q: Matrix::from_vec(h, d, next())?,
            w_k: Matrix::from_vec(h, d, next())?,
        },
    };
    let firsts = [next(), next(), next(), next()];
    let seconds = [next(), next(), next(), next()];
    let mut seconds = seconds.into_iter();
    let moments = firsts.map(|m| Moments {
        m,
        v: seconds.next().expect("4 blocks"),
    });
    Ok((
        TrainState {
            step,
            params,
            moments,
            rng: RngState { seed, stream, word_pos },
        },
        loss,
    ))
}

fn read_meta(dir: &Path) -> Result<RunMeta> {
    let meta: RunMeta = read_json(&dir.join("run.json"))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "run.json schema_version {} is not {SCHEMA_VERSION}",
            meta.schema_version
        )));
    }
    Ok(meta)
}

fn checkpoint_steps(dir: &Path) -> Result<Vec<usize>> {
    let mut steps: Vec<usize> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("ckpt_")?.strip_suffix(".bin")?.parse().ok()
        })
        .collect();
    steps.sort_unstable();
    Ok(steps)
}

pub fn latest_checkpoint_step(dir: &Path) -> Result<Option<usize>> {
    Ok(checkpoint_steps(dir)?.last().copied())
}

/// Full resumable state at `step`.
pub fn load_state(dir: &Path, step: usize) -> Result<TrainState> {
    let meta = read_meta(dir)?;
    let path = ckpt_path(dir, step);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(decode_checkpoint(&bytes, &meta.model, &path)?.0)
}

/// Reads every checkpoint of a run directory.
pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let meta = read_meta(dir)?;
    let checkpoints = checkpoint_steps(dir)?
        .into_iter()
        .map(|step| {
            let path = ckpt_path(dir, step);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (state, loss) = decode_checkpoint(&bytes, &meta.model, &path)?;
            Ok(Checkpoint {
                step: state.step,
                loss,
                params: state.params,
                rng: state.rng,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if checkpoints.is_empty() {
        return Err(Error::Config(format!("{} holds no checkpoints", dir.display())));
    }
    Ok(RunRecord {
        model: meta.model,
        train: meta.train,
        spec: meta.spec,
        checkpoints,
    })
}

/// Writes `run.json`, `losses.csv` and `final.json` (the last checkpoint's
/// parameters) for a run held in memory. Optimizer state is not kept, so
/// such a directory cannot be resumed.
pub fn write_run_summary(dir: &Path, run: &RunRecord) -> Result<()> {
    write_json(
        &dir.join("run.json"),
        &RunMeta {
            schema_version: SCHEMA_VERSION,
            model: run.model.clone(),
            train: run.train.clone(),
            spec: run.spec.clone(),
        },
    )?;
    let rows: Vec<LossRow> = run
        .checkpoints
        .iter()
        .map(|c| LossRow {
            step: c.step,
            recon: c.loss.recon,
            attn: c.loss.attn,
            total: c.loss.total,
        })
        .collect();
    write_csv(&dir.join("losses.csv"), &rows)?;
    write_json(&dir.join("final.json"), run.last())
}

/// Trains into `dir`, writing `run.json`, one `ckpt_<step>.bin` per
/// checkpoint and `losses.csv`. With `resume`, continues from the latest
/// checkpoint already present; the stored configs must then match.
pub fn train_to_dir(model: &ModelConfig, spec: &TargetSpec, train: &TrainConfig, dir: &Path, resume: bool) -> Result<RunRecord> {
    let meta = RunMeta {
        schema_version: SCHEMA_VERSION,
        model: model.clone(),
        train: train.clone(),
        spec: spec.clone(),
    };
    let mut start = None;
    let mut losses: Vec<LossRow> = Vec::new();
    if resume {
        let stored = read_meta(dir)?;
        if stored != meta {
            return Err(Error::Config("resume configuration differs from run.json".into()));
        }
        if let Some(step) = latest_checkpoint_step(dir)? {
            start = Some(load_state(dir, step)?);
            let loss_path = dir.join("losses.csv");
            if loss_path.exists() {
                losses = read_csv::<LossRow>(&loss_path)?.into_iter().filter(|r| r.step < step).collect();
            }
        }
    } else {
        write_json(&dir.join("run.json"), &meta)?;
    }
    let mut on_ckpt = |state: &TrainState, loss: &LossBreakdown| -> Result<()> {
        atomic_write(&ckpt_path(dir, state.step), &encode_checkpoint(state, loss))?;
        losses.push(LossRow {
            step: state.step,
            recon: loss.recon,
            attn: loss.attn,
            total: loss.total,
        });
        write_csv(&dir.join("losses.csv"), &losses)
    };
    train_with(model, spec, train, start, &mut on_ckpt)
}
