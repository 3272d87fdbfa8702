mod common;

use common::trained_spiral;
use nettrim::model::DEFAULT_ZERO_TOL;
use nettrim::trim::{trim, TrimConfig, TrimMode};

// looser tolerances should never buy back weights, beyond solver noise
#[test]
fn nnz_shrinks_as_tolerance_grows() {
    for seed in [0u64, 1] {
        let (net, x, _) = trained_spiral(seed, &[2, 30, 30, 2], 100);
        let mut prev: Option<Vec<usize>> = None;
        for eps in [0.002, 0.005, 0.01, 0.02, 0.05] {
            let cfg = TrimConfig { mode: TrimMode::Parallel, epsilon_rel: eps, ..Default::default() };
            let res = trim(&net, &x, &cfg).unwrap();
            let nnz: Vec<usize> = res.pruned.layers().iter().map(|w| w.nnz(DEFAULT_ZERO_TOL)).collect();
            if let Some(p) = &prev {
                for (l, (&now, &before)) in nnz.iter().zip(p).enumerate() {
                    assert!(
                        now as f64 <= 1.05 * before as f64,
                        "seed {seed} layer {}: {before} -> {now} at eps_rel {eps}",
                        l + 1
                    );
                }
            }
            prev = Some(nnz);
        }
    }
}
