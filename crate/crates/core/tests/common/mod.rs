#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svf_core::toy_model::{loss, sample_batch, ContextBatch, ModelConfig, ModelParams, TargetSpec};

pub const FD_STEP: f64 = 1e-5;

pub fn fd_instance(seed: u64, n_keys: usize) -> (ModelConfig, ModelParams, TargetSpec, ContextBatch) {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, &mut rng);
    for b in params.universe.bias.iter_mut() {
        *b = rng.gen_range(-0.2..0.05);
    }
    let batch = sample_batch(&cfg, &params.universe, n_keys, &mut rng).unwrap();
    (cfg, params, TargetSpec::four_pair_default(), batch)
}

/// Central finite difference of the total loss in one coordinate. Tokens are
/// rebuilt from the perturbed `W`, so the attention path through the tokens
/// is included.
pub fn central_difference(
    cfg: &ModelConfig,
    params: &ModelParams,
    spec: &TargetSpec,
    batch: &ContextBatch,
    block: usize,
    index: usize,
) -> f64 {
    let eval = |delta: f64| {
        let mut p = params.clone();
        p.blocks_mut()[block][index] += delta;
        let b = ContextBatch::from_strengths(&p.universe, batch.strengths.clone(), batch.context_len).unwrap();
        loss(cfg, &p.universe, &p.head, spec, &b).unwrap().total
    };
    (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error over `n_coords` random coordinates per block.
pub fn worst_fd_error(seed: u64, n_coords: usize) -> [f64; 4] {
    let (cfg, params, spec, batch) = fd_instance(seed, 64);
    let grads = svf_core::toy_model::gradients(&cfg, &params.universe, &params.head, &spec, &batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut worst = [0.0f64; 4];
    for block in 0..4 {
        let len = grads.blocks()[block].len();
        for _ in 0..n_coords {
            let idx = rng.gen_range(0..len);
            let num = central_difference(&cfg, &params, &spec, &batch, block, idx);
            let err = relative_error(grads.blocks()[block][idx], num);
            worst[block] = worst[block].max(err);
        }
    }
    worst
}
