mod common;

use common::constant_norm_model;
use pgl_core::calibrate::{collect, ActivationStats, CalibrationSet};
use pgl_core::kernel::matmul;
use pgl_core::model::{logits, random_init, ModelConfig};
use pgl_core::normfuse::{absorb, fuse_scale, verify_absorption, SiteSelection};
use pgl_core::Tensor;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
    Tensor::new(rows, cols, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn fused_matrix_equals_elementwise_scaling(
        (n, k, m) in (1usize..6, 1usize..10, 1usize..10),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize, lo: f32, hi: f32| (0..len).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
        let x = tensor(n, k, draw(n * k, -3.0, 3.0));
        let w = tensor(k, m, draw(k * m, -1.0, 1.0));
        let gamma = draw(m, 0.01, 4.0);
        let mut scaled = matmul(&x, &w).unwrap();
        scaled.scale_cols(&gamma).unwrap();
        let fused = matmul(&x, &fuse_scale(&w, &gamma).unwrap()).unwrap();
        for r in 0..n {
            for c in 0..m {
                // Relative to the magnitude of the summed terms.
                let mass: f64 = (0..k)
                    .map(|j| (x.get(r, j) as f64 * w.get(j, c) as f64 * gamma[c] as f64).abs())
                    .sum();
                let diff = (scaled.get(r, c) - fused.get(r, c)).abs() as f64;
                prop_assert!(diff <= 1e-6 * mass, "{} vs {}", scaled.get(r, c), fused.get(r, c));
            }
        }
    }
}

#[test]
fn unit_gamma_unit_scale_equals_removing_post_norms() {
    let w = random_init(&ModelConfig::toy(), 5);
    let mut stats = ActivationStats::zeros(&w.config);
    for ls in &mut stats.layers {
        ls.token_count = 7;
        ls.attn_inv_scale_sum = 7.0;
        ls.ffn_inv_scale_sum = 7.0;
    }
    let (absorbed, report) = absorb(&w, &stats, &SiteSelection::All.resolve(&w)).unwrap();
    assert!(report.sites.iter().all(|s| s.inv_scale == 1.0));
    let mut removed = w.clone();
    for (lw, lc) in removed.layers.iter_mut().zip(&mut removed.config.layers) {
        lw.post_attn_gamma = None;
        lw.post_ffn_gamma = None;
        lc.attn_post_norm = false;
        lc.ffn_post_norm = false;
    }
    assert_eq!(absorbed, removed);
    let tokens = [0, 31, 7, 7, 12];
    assert_eq!(
        logits(&absorbed, &tokens).unwrap().data(),
        logits(&removed, &tokens).unwrap().data()
    );
}

#[test]
fn constant_norm_absorption_is_exact() {
    for seed in 0..4 {
        let w = constant_norm_model(seed);
        let calib = CalibrationSet::new((0..24).map(|t| vec![t]).collect(), "calib").unwrap();
        let probe = CalibrationSet::new((24..48).map(|t| vec![t]).collect(), "probe").unwrap();
        let stats = collect(&w, &calib).unwrap();
        let (absorbed, _) = absorb(&w, &stats, &SiteSelection::All.resolve(&w)).unwrap();
        let dev = verify_absorption(&w, &absorbed, &probe).unwrap();
        assert!(dev <= 1e-4, "seed {seed}: {dev}");
    }
}

#[test]
fn absorbing_twice_is_rejected() {
    let w = random_init(&ModelConfig::toy(), 6);
    let stats = collect(&w, &CalibrationSet::random(32, 2, 5, 0).unwrap()).unwrap();
    let sites = SiteSelection::AllAttn.resolve(&w);
    let (once, _) = absorb(&w, &stats, &sites).unwrap();
    assert!(absorb(&once, &stats, &sites).is_err());
    assert!(SiteSelection::AllAttn.resolve(&once).is_empty());
}
