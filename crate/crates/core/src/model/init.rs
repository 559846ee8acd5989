use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::weights::{LayerWeights, WeightStore};
use crate::kernel::Tensor;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let std = 1.0 / (fan_in as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Deterministic seeded weights: zero-mean Gaussians with standard deviation
/// `1/sqrt(fan_in)` (unit variance for the embedding table), every γ set to 1.
///
/// The config is expected to be valid.
pub fn random_init(config: &ModelConfig, seed: u64) -> WeightStore {
    debug_assert!(config.validate().is_ok());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.hidden;
    let dh = config.head_dim;
    let embedding = gaussian(&mut rng, config.vocab, d, 1);
    let layers = config
        .layers
        .iter()
        .map(|lc| {
            let q = lc.query_heads * dh;
            let kv = lc.kv_groups * dh;
            LayerWeights {
                pre_attn_gamma: vec![1.0; d],
                post_attn_gamma: lc.attn_post_norm.then(|| vec![1.0; d]),
                pre_ffn_gamma: vec![1.0; d],
                post_ffn_gamma: lc.ffn_post_norm.then(|| vec![1.0; d]),
                wq: gaussian(&mut rng, d, q, d),
                wk: gaussian(&mut rng, d, kv, d),
                wv: gaussian(&mut rng, d, kv, d),
                wo: gaussian(&mut rng, q, d, q),
                w_gate: gaussian(&mut rng, d, lc.ffn_dim, d),
                w_up: gaussian(&mut rng, d, lc.ffn_dim, d),
                w_down: gaussian(&mut rng, lc.ffn_dim, d, lc.ffn_dim),
            }
        })
        .collect();
    let output_head = gaussian(&mut rng, d, config.vocab, d);
    WeightStore {
        config: config.clone(),
        embedding,
        layers,
        final_gamma: vec![1.0; d],
        output_head,
    }
}
