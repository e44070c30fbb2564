//! AdamW training loop with cosine learning-rate decay and checkpointing.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy_model::{
    loss_and_gradients, sample_batch, LossBreakdown, ModelConfig, ModelParams, TargetSpec,
    BLOCK_NAMES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub base_lr: f64,
    pub batch_keys: usize,
    pub checkpoint_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            base_lr: 1e-3,
            batch_keys: 1024,
            checkpoint_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_keys == 0 || self.batch_keys % model.context_len != 0 {
            return Err(Error::Config(format!(
                "batch_keys {} not divisible by context_len {}",
                self.batch_keys, model.context_len
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config("warmup_steps exceeds steps".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup, then cosine decay from `base_lr` to zero at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        TrainConfig::default().adamw()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update. `t` is the 1-based update count.
    pub fn step(&self, params: &mut [f64], grads: &[f64], moments: &mut Moments, t: usize, lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), moments.m.len());
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(moments.m.iter_mut())
            .zip(moments.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Serializable position of the batch-sampling generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training exactly: parameters after `step`
/// updates, optimizer moments, and the generator position before the batch
/// for `step` is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: ModelParams,
    pub moments: [Moments; 4],
    pub rng: RngState,
}

impl TrainState {
    pub fn fresh(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::init(cfg, &mut rng);
        let moments = params.blocks().map(|b| Moments::zeros(b.len()));
        Self {
            step: 0,
            params,
            moments,
            rng: RngState::capture(&rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub loss: LossBreakdown,
    pub params: ModelParams,
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub spec: TargetSpec,
    pub checkpoints: Vec<Checkpoint>,
}

impl RunRecord {
    pub fn first(&self) -> &Checkpoint {
        &self.checkpoints[0]
    }

    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("run has checkpoints")
    }

    pub fn at_step(&self, step: usize) -> Result<&Checkpoint> {
        self.checkpoints
            .iter()
            .find(|c| c.step == step)
            .ok_or(Error::MissingCheckpoint(step))
    }
}

pub fn train(model: &ModelConfig, spec: &TargetSpec, train_cfg: &TrainConfig) -> Result<RunRecord> {
    train_with(model, spec, train_cfg, None, &mut |_, _| Ok(()))
}

/// Runs (or resumes) training. `on_checkpoint` sees the full resumable
/// state at every recorded checkpoint.
pub fn train_with(
    model: &ModelConfig,
    spec: &TargetSpec,
    train_cfg: &TrainConfig,
    resume: Option<TrainState>,
    on_checkpoint: &mut dyn FnMut(&TrainState, &LossBreakdown) -> Result<()>,
) -> Result<RunRecord> {
    model.validate()?;
    spec.validate(model.n_features)?;
    train_cfg.validate(model)?;
    let adamw = train_cfg.adamw();

    let mut state = resume.unwrap_or_else(|| TrainState::fresh(model));
    let mut rng = state.rng.restore();
    let mut checkpoints = Vec::new();

    loop {
        let t = state.step;
        state.rng = RngState::capture(&rng);
        let batch = sample_batch(model, &state.params.universe, train_cfg.batch_keys, &mut rng)?;
        let (loss, grads) = loss_and_gradients(
            model,
            &state.params.universe,
            &state.params.head,
            spec,
            &batch,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step: t,
                block: "loss".into(),
            });
        }
        if t % train_cfg.checkpoint_every == 0 || t == train_cfg.steps {
            on_checkpoint(&state, &loss)?;
            checkpoints.push(Checkpoint {
                step: t,
                loss,
                params: state.params.clone(),
                rng: state.rng,
            });
        }
        if t >= train_cfg.steps {
            break;
        }

        let lr = lr_at(t, train_cfg);
        let grad_blocks = grads.blocks();
        let TrainState {
            params, moments, ..
        } = &mut state;
        for (((p, g), mom), name) in params
            .blocks_mut()
            .into_iter()
            .zip(grad_blocks)
            .zip(moments.iter_mut())
            .zip(BLOCK_NAMES)
        {
            adamw.step(p, g, mom, t + 1, lr);
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step: t,
                    block: name.into(),
                });
            }
        }
        state.step += 1;
    }

    Ok(RunRecord {
        model: model.clone(),
        train: train_cfg.clone(),
        spec: spec.clone(),
        checkpoints,
    })
}
