mod common;

use common::worst_fd_error;
use svf_core::toy_model::BLOCK_NAMES;

#[test]
fn gradients_match_central_differences() {
    for seed in 0..10 {
        let worst = worst_fd_error(seed, 25);
        for (name, err) in BLOCK_NAMES.iter().zip(worst) {
            assert!(err < 1e-5, "seed {seed} block {name}: relative error {err:e}");
        }
    }
}
