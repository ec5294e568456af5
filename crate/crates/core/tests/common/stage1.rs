//! Stage-1 distillation smoke run: 4 training clips, 4 held-out clips.

#![allow(dead_code)]

use preprune::backbone::BackboneConfig;
use preprune::graph::NormMode;
use preprune::pipeline::{Pipeline, PipelineConfig};
use preprune::scenes::generate_clip;
use preprune::train::{distill_floor, distill_value, evaluate, ClipCache, Trainer};
use preprune::objectives::LossWeights;

pub struct Stage1Run {
    pub initial: f64,
    pub last: f64,
    /// Mean entropy of the training targets, the loss floor.
    pub floor: f64,
    pub spearman: f64,
}

impl Stage1Run {
    pub fn drop(&self) -> f64 {
        1.0 - self.last / self.initial
    }

    /// Share of the reducible loss (above the floor) that was removed.
    pub fn excess_drop(&self) -> f64 {
        1.0 - (self.last - self.floor) / (self.initial - self.floor)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn stage1_run(seed: u64, steps: usize) -> Stage1Run {
    let mut p = Pipeline::<f64>::new(BackboneConfig::default(), PipelineConfig::default(), seed, seed).unwrap();
    let cache = |i: u64| ClipCache::build(&p, &generate_clip(i, 4, 8, 8).unwrap()).unwrap();
    let train: Vec<_> = (0..4).map(|i| cache(seed * 1000 + i)).collect();
    let held: Vec<_> = (0..4).map(|i| cache(seed * 1000 + 500 + i)).collect();
    let loss = |p: &Pipeline<f64>| mean(train.iter().map(|c| distill_value(p, c, NormMode::Train).unwrap()));
    let initial = loss(&p);
    let mut t = Trainer::new(1e-3, LossWeights::default()).unwrap();
    t.run_stage1(&mut p, &train, steps).unwrap();
    Stage1Run {
        initial,
        last: loss(&p),
        floor: mean(train.iter().map(|c| distill_floor(&c.target))),
        spearman: mean(held.iter().map(|c| evaluate(&p, c).unwrap().spearman)),
    }
}
