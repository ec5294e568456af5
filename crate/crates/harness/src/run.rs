//! Building pipelines and clips from a config, and the train-then-evaluate
//! unit shared by sweeps and the acceptance report.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use preprune::scenes::{generate_clip, ClipSample};
use preprune::train::{calibrate_heads, evaluate, run_schedule, ClipCache, EvalMetrics, LossRecord};
use preprune::Pipeline;

use crate::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

pub fn build_pipeline(cfg: &ExperimentConfig) -> Result<Pipeline> {
    Ok(Pipeline::new(cfg.backbone.clone(), cfg.pipeline.clone(), cfg.seeds.backbone, cfg.seeds.modules)?)
}

pub fn split_seeds(cfg: &ExperimentConfig, split: Split) -> Vec<u64> {
    let (train, eval) = cfg.clip_seeds();
    match split {
        Split::Train => train,
        Split::Eval => eval,
    }
}

pub fn clip_dir(out: &Path, split: Split, seed: u64) -> PathBuf {
    out.join("data").join(split.as_str()).join(format!("clip_{seed}"))
}

pub fn generate_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<ClipSample>> {
    split_seeds(cfg, split)
        .into_iter()
        .map(|s| Ok(generate_clip(s, cfg.data.frames, cfg.backbone.h, cfg.backbone.w)?))
        .collect()
}

/// Clips written by `gen`; fails if any is missing or has the wrong shape.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<ClipSample>> {
    let mut out = Vec::new();
    for seed in split_seeds(cfg, split) {
        let dir = clip_dir(&cfg.out, split, seed);
        if !dir.join("manifest.json").exists() {
            bail!("missing clip {} (run `gen` first)", dir.display());
        }
        let clip = ClipSample::load_dir(&dir).with_context(|| format!("loading {}", dir.display()))?;
        if clip.h != cfg.backbone.h || clip.w != cfg.backbone.w || clip.num_frames() != cfg.data.frames {
            bail!(
                "clip {} is {}x{} with {} frames, config expects {}x{} with {}",
                dir.display(),
                clip.h,
                clip.w,
                clip.num_frames(),
                cfg.backbone.h,
                cfg.backbone.w,
                cfg.data.frames
            );
        }
        out.push(clip);
    }
    Ok(out)
}

pub fn caches(p: &Pipeline, clips: &[ClipSample]) -> Result<Vec<ClipCache<f64>>> {
    clips.iter().map(|c| Ok(ClipCache::build(p, c)?)).collect()
}

pub fn mean_metrics(ms: &[EvalMetrics]) -> EvalMetrics {
    let n = ms.len().max(1) as f64;
    let avg = |f: fn(&EvalMetrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
    EvalMetrics {
        restore_mse: avg(|m| m.restore_mse),
        depth_mae: avg(|m| m.depth_mae),
        points_mae: avg(|m| m.points_mae),
        camera_mae: avg(|m| m.camera_mae),
        spearman: avg(|m| m.spearman),
    }
}

/// Mean of the last `window` records of one loss term.
pub fn final_loss(history: &[LossRecord], window: usize, term: fn(&LossRecord) -> f64) -> f64 {
    let tail = &history[history.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(term).sum::<f64>() / tail.len() as f64
}

/// Result of training one config from scratch and evaluating it.
#[derive(Clone, Debug)]
pub struct PointResult {
    pub pipeline: Pipeline,
    pub history: Vec<LossRecord>,
    pub per_clip: Vec<EvalMetrics>,
    pub mean: EvalMetrics,
    /// Restoration loss averaged over the last pass through the training
    /// clips.
    pub final_restore: f64,
    pub final_distill: f64,
}

/// Fit heads, train under the config's schedule, evaluate on held-out clips.
/// Clips are generated in memory from the config's data seed.
pub fn train_and_evaluate(cfg: &ExperimentConfig) -> Result<PointResult> {
    let mut p = build_pipeline(cfg)?;
    let train = caches(&p, &generate_split(cfg, Split::Train)?)?;
    let held = caches(&p, &generate_split(cfg, Split::Eval)?)?;
    calibrate_heads(&mut p, &train, cfg.calibration_steps)?;
    let history = run_schedule(&mut p, &train, cfg.schedule, &cfg.train)?;
    let per_clip = held.iter().map(|c| Ok(evaluate(&p, c)?)).collect::<Result<Vec<_>>>()?;
    let window = train.len();
    Ok(PointResult {
        pipeline: p,
        mean: mean_metrics(&per_clip),
        per_clip,
        final_restore: final_loss(&history, window, |r| r.restore),
        final_distill: final_loss(&history, window, |r| r.distill),
        history,
    })
}
