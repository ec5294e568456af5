//! Shape and degenerate-case checks of the dense restoration.

#![allow(dead_code)]

use preprune::backbone::BackboneConfig;
use preprune::pipeline::{Pipeline, PipelineConfig};
use preprune::restoration::{Restorer, RestorerConfig};
use preprune::scenes::generate_clip;
use preprune::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KEEP_RATIOS: [f64; 7] = [0.01, 0.05, 0.1, 0.25, 0.4, 0.75, 1.0];

/// Dense output shape of the pipeline at each keep ratio, expected
/// `[N·P, D′]`.
pub fn dense_shapes() -> Vec<(f64, Vec<usize>)> {
    let bcfg = BackboneConfig { layers: 2, ..BackboneConfig::default() };
    let clip = generate_clip(17, 3, bcfg.h, bcfg.w).unwrap();
    KEEP_RATIOS
        .iter()
        .map(|&r| {
            let p = Pipeline::<f64>::new(bcfg.clone(), PipelineConfig { keep_ratio: r, ..Default::default() }, 1, 1).unwrap();
            let grids = p.encode(&clip).unwrap();
            (r, p.infer(&grids).unwrap().dense.shape().to_vec())
        })
        .collect()
}

/// Largest deviation of any restored row from the projected value row when a
/// single token is kept, over several random draws.
pub fn single_key_deviation() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Restorer::<f64>::new(RestorerConfig::default(), seed).unwrap();
        let rand = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        };
        let f = rand(&mut rng, 64, 32);
        let gk = rand(&mut rng, 1, 48);
        let k = rng.gen_range(0..64);
        let out = r.restore_dense(&f, &[k], &f.select_rows(&[k]), &gk).unwrap();
        let pr = &r.params;
        let v: Vec<f64> = (0..32)
            .map(|j| pr.get("v.b").unwrap().data()[j] + (0..48).map(|i| gk.at(&[0, i]) * pr.get("v.w").unwrap().at(&[i, j])).sum::<f64>())
            .collect();
        let o: Vec<f64> = (0..48)
            .map(|j| pr.get("o.b").unwrap().data()[j] + (0..32).map(|i| v[i] * pr.get("o.w").unwrap().at(&[i, j])).sum::<f64>())
            .collect();
        for row in 0..64 {
            for (a, b) in out.row(row).iter().zip(&o) {
                worst = worst.max((a - b).abs());
            }
        }
        for head in r.attention_weights(&f, &f.select_rows(&[k]), &gk).unwrap() {
            for w in head.data() {
                worst = worst.max((w - 1.0).abs());
            }
        }
    }
    worst
}
