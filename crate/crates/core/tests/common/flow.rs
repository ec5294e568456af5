//! Task-loss gradient reaching the scorer through the pruned pipeline.

#![allow(dead_code)]

use preprune::backbone::BackboneConfig;
use preprune::graph::{Graph, NormMode};
use preprune::objectives::{camera_loss, depth_loss, pmap_loss, TaskTargets};
use preprune::pipeline::{Pipeline, PipelineConfig, SCORER_PREFIX};
use preprune::scenes::generate_clip;

pub fn small_backbone() -> BackboneConfig {
    BackboneConfig { h: 4, w: 4, d_in: 8, d_model: 12, layers: 2, heads: 2, registers: 2, mlp_ratio: 2, qk_gain: 0.5 }
}

pub struct Flow {
    /// Largest absolute task-loss gradient entry over scorer parameters.
    pub max_abs: f64,
    /// Number of scorer parameter tensors that received a gradient entry.
    pub tensors: usize,
    pub merges: usize,
}

/// Backpropagate only `L_camera + L_depth + L_pmap` of one clip.
pub fn task_gradient(seed: u64, gamma: f64) -> Flow {
    let cfg = PipelineConfig { merge_fraction: gamma, scorer_hidden: 8, restore_width: 8, restore_heads: 2, ..Default::default() };
    let p = Pipeline::<f64>::new(small_backbone(), cfg, seed, seed).unwrap();
    let clip = generate_clip(seed, 3, 4, 4).unwrap();
    let grids = p.encode(&clip).unwrap();
    let truth = TaskTargets::from_clip(&clip).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, true, true);
    let (pg, _) = p.pruned_on_graph(&mut g, &b, &grids, NormMode::Train, true).unwrap();
    let out = pg.heads.unwrap();
    let lc = camera_loss(&mut g, out.camera, &truth.camera, 1.0).unwrap();
    let lz = depth_loss(&mut g, &out, &truth, 0.1).unwrap();
    let lp = pmap_loss(&mut g, &out, &truth, 0.1).unwrap();
    let s = g.add(lc, lz).unwrap();
    let loss = g.add(s, lp).unwrap();
    let grads = g.backward(loss).unwrap().strip_prefix(SCORER_PREFIX);
    let max_abs = grads.map.values().flat_map(|t| t.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    Flow { max_abs, tensors: grads.map.len(), merges: pg.plan.merge_counts().iter().sum() }
}
