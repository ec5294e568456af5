//! Training loops: distillation (stage 1), task-aware fine-tuning (stage 2)
//! and the schedule variants built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::TokenGrid;
use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode};
use crate::objectives::{stage1_loss, stage2_loss, LossWeights, Stage2Inputs, TaskTargets};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{FullRun, Pipeline, RESTORER_PREFIX, SCORER_PREFIX};
use crate::saliency::{spearman, SaliencyMap};
use crate::scalar::Scalar;
use crate::scenes::ClipSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Distillation only, for all steps.
    Stage1Only,
    /// Task-aware objective without the distillation term, for all steps.
    Stage2Only,
    /// Full stage-2 objective from step 0, for all steps.
    Joint,
    /// Distillation, then the full stage-2 objective.
    TwoStage,
}

impl Schedule {
    pub const ALL: [Schedule; 4] = [Schedule::Stage1Only, Schedule::Stage2Only, Schedule::Joint, Schedule::TwoStage];

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Stage1Only => "stage1-only",
            Schedule::Stage2Only => "stage2-only",
            Schedule::Joint => "joint",
            Schedule::TwoStage => "two-stage",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Schedule::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown schedule {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 200,
            stage2_steps: 200,
            lr: 1e-3,
            weights: LossWeights::default(),
        }
    }
}

/// Per-clip quantities that do not depend on the trainable modules.
#[derive(Clone, Debug)]
pub struct ClipCache<T> {
    pub grids: Vec<TokenGrid<T>>,
    pub target: SaliencyMap<T>,
    /// Flattened target, `[N·P]`.
    pub target_flat: Tensor<T>,
    pub full: FullRun<T>,
    pub truth: TaskTargets<T>,
}

impl<T: Scalar> ClipCache<T> {
    /// One unpruned pass with attention capture per clip.
    pub fn build(p: &Pipeline<T>, clip: &ClipSample) -> Result<Self> {
        let grids = p.encode(clip)?;
        let mut full = p.full_run(&grids, true)?;
        let trace = full.trace.take().expect("captured");
        let target = crate::saliency::saliency_target(&trace, p.cfg.alpha)?;
        let flat = target.flat();
        Ok(ClipCache {
            grids,
            target_flat: Tensor::new(vec![flat.len()], flat)?,
            target,
            full,
            truth: TaskTargets::from_clip(clip)?,
        })
    }
}

/// One row of a loss curve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: String,
    pub total: f64,
    pub distill: f64,
    pub restore: f64,
    pub camera: f64,
    pub depth: f64,
    pub pmap: f64,
}

pub const LOSS_CSV_HEADER: [&str; 8] = ["step", "stage", "total", "distill", "restore", "camera", "depth", "pmap"];

/// Optimiser state for the trainable modules of one pipeline.
pub struct Trainer<T> {
    pub scorer_opt: Adam<T>,
    pub restorer_opt: Adam<T>,
    pub weights: LossWeights,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(lr: f64, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        Ok(Trainer {
            scorer_opt: Adam::new(cfg),
            restorer_opt: Adam::new(cfg),
            weights,
            step: 0,
            history: Vec::new(),
        })
    }

    /// One distillation step; only the scorer changes.
    pub fn stage1_step(&mut self, p: &mut Pipeline<T>, c: &ClipCache<T>) -> Result<LossRecord> {
        let mut g = Graph::new();
        let pv = p.scorer.params.bind_trainable(&mut g);
        let x = g.constant(crate::scorer::Scorer::stack_grids(&c.grids)?);
        let out = p.scorer.forward(&mut g, &pv, x, NormMode::Train)?;
        let loss = stage1_loss(&mut g, out.scores, &c.target_flat)?;
        let grads = g.backward(loss)?;
        self.scorer_opt.step(&mut p.scorer.params, &grads);
        if let Some(stats) = out.stats {
            p.scorer.update_running(&stats)?;
        }
        let v = g.value(loss).item().to_f64_exact();
        Ok(self.record("1", LossRecordValues { total: v, distill: v, ..Default::default() }))
    }

    /// One task-aware step updating scorer and restorer.
    pub fn stage2_step(&mut self, p: &mut Pipeline<T>, c: &ClipCache<T>, weights: &LossWeights, tag: &str) -> Result<LossRecord> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, true, true);
        let with_heads = weights.task > 0.0;
        let (pg, stats) = p.pruned_on_graph(&mut g, &b, &c.grids, NormMode::Train, with_heads)?;
        let (loss, bd) = stage2_loss(
            &mut g,
            Stage2Inputs {
                scores: pg.scores,
                target: &c.target_flat,
                dense: pg.dense,
                full: &c.full.dense,
                heads: pg.heads.map(|h| (h, &c.truth)),
            },
            weights,
        )?;
        let grads = g.backward(loss)?;
        self.scorer_opt.step(&mut p.scorer.params, &grads.strip_prefix(SCORER_PREFIX));
        self.restorer_opt.step(&mut p.restorer.params, &grads.strip_prefix(RESTORER_PREFIX));
        if let Some(stats) = stats {
            p.scorer.update_running(&stats)?;
        }
        Ok(self.record(
            tag,
            LossRecordValues {
                total: bd.total,
                distill: bd.distill,
                restore: bd.restore,
                camera: bd.camera,
                depth: bd.depth,
                pmap: bd.pmap,
            },
        ))
    }

    fn record(&mut self, stage: &str, v: LossRecordValues) -> LossRecord {
        let r = LossRecord {
            step: self.step,
            stage: stage.to_string(),
            total: v.total,
            distill: v.distill,
            restore: v.restore,
            camera: v.camera,
            depth: v.depth,
            pmap: v.pmap,
        };
        self.step += 1;
        self.history.push(r.clone());
        r
    }

    pub fn run_stage1(&mut self, p: &mut Pipeline<T>, clips: &[ClipCache<T>], steps: usize) -> Result<()> {
        if clips.is_empty() {
            return Err(Error::invalid("no training clips"));
        }
        for i in 0..steps {
            self.stage1_step(p, &clips[i % clips.len()])?;
        }
        Ok(())
    }

    pub fn run_stage2(&mut self, p: &mut Pipeline<T>, clips: &[ClipCache<T>], steps: usize, weights: &LossWeights, tag: &str) -> Result<()> {
        if clips.is_empty() {
            return Err(Error::invalid("no training clips"));
        }
        for i in 0..steps {
            self.stage2_step(p, &clips[i % clips.len()], weights, tag)?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct LossRecordValues {
    total: f64,
    distill: f64,
    restore: f64,
    camera: f64,
    depth: f64,
    pmap: f64,
}

/// Train `p` under `schedule` for `stage1_steps + stage2_steps` steps in
/// total, returning the loss curve.
pub fn run_schedule<T: Scalar>(
    p: &mut Pipeline<T>,
    clips: &[ClipCache<T>],
    schedule: Schedule,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    let mut t = Trainer::new(cfg.lr, cfg.weights)?;
    let total = cfg.stage1_steps + cfg.stage2_steps;
    match schedule {
        Schedule::Stage1Only => t.run_stage1(p, clips, total)?,
        Schedule::Stage2Only => {
            let w = LossWeights { distill: 0.0, ..cfg.weights };
            t.run_stage2(p, clips, total, &w, "2")?
        }
        Schedule::Joint => t.run_stage2(p, clips, total, &cfg.weights, "joint")?,
        Schedule::TwoStage => {
            t.run_stage1(p, clips, cfg.stage1_steps)?;
            t.run_stage2(p, clips, cfg.stage2_steps, &cfg.weights, "2")?
        }
    }
    Ok(t.history)
}

/// Distillation loss of the current scorer on one clip, without updating
/// anything. `mode` picks batch or running normalisation statistics.
pub fn distill_value<T: Scalar>(p: &Pipeline<T>, c: &ClipCache<T>, mode: NormMode) -> Result<f64> {
    let mut g = Graph::new();
    let pv = p.scorer.params.bind_frozen(&mut g);
    let x = g.constant(crate::scorer::Scorer::stack_grids(&c.grids)?);
    let out = p.scorer.forward(&mut g, &pv, x, mode)?;
    let loss = stage1_loss(&mut g, out.scores, &c.target_flat)?;
    Ok(g.value(loss).item().to_f64_exact())
}

/// Lowest value the distillation loss can take on a clip: the mean binary
/// entropy of its soft targets.
pub fn distill_floor<T: Scalar>(target: &SaliencyMap<T>) -> f64 {
    let v = target.flat();
    let h = |t: f64| {
        let part = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
        part(t) + part(1.0 - t)
    };
    v.iter().map(|t| h(t.to_f64_exact())).sum::<f64>() / v.len().max(1) as f64
}

/// Fit the frozen heads to the unpruned backbone outputs of `clips`.
pub fn calibrate_heads<T: Scalar>(p: &mut Pipeline<T>, clips: &[ClipCache<T>], steps: usize) -> Result<()> {
    let examples: Vec<_> = clips
        .iter()
        .map(|c| (c.full.camera_tokens.clone(), c.full.dense.clone(), c.truth.clone()))
        .collect();
    if examples.is_empty() {
        return Err(Error::invalid("no calibration clips"));
    }
    p.heads.calibrate(&examples, steps, 1e-2)
}

/// Held-out metrics of one clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// `MSE(G_dense, G_full)`.
    pub restore_mse: f64,
    /// Mean absolute depth error of the heads on the restored grid.
    pub depth_mae: f64,
    /// Mean Euclidean point error.
    pub points_mae: f64,
    /// Mean absolute camera-vector error.
    pub camera_mae: f64,
    /// Mean per-frame Spearman correlation of predicted and target scores.
    pub spearman: f64,
}

/// Rank agreement of predicted and target scores, averaged over frames.
pub fn mean_spearman<T: Scalar>(pred: &SaliencyMap<T>, target: &SaliencyMap<T>) -> f64 {
    let n = pred.num_frames().min(target.num_frames());
    if n == 0 {
        return 0.0;
    }
    (0..n)
        .map(|f| {
            let a: Vec<f64> = pred.frames[f].iter().map(|v| v.to_f64_exact()).collect();
            let b: Vec<f64> = target.frames[f].iter().map(|v| v.to_f64_exact()).collect();
            spearman(&a, &b)
        })
        .sum::<f64>()
        / n as f64
}

pub fn evaluate<T: Scalar>(p: &Pipeline<T>, c: &ClipCache<T>) -> Result<EvalMetrics> {
    let inf = p.infer(&c.grids)?;
    let n = c.grids.len();
    let (h, w) = (p.backbone.cfg.h, p.backbone.cfg.w);
    let mut g = Graph::new();
    let hv = p.heads.params.bind_frozen(&mut g);
    let cams = g.constant(inf.camera_tokens.clone());
    let dense = g.constant(inf.dense.clone());
    let out = p.heads.apply(&mut g, &hv, cams, dense, n, h, w)?;
    let mean_abs = |a: &[T], b: &[T]| {
        a.iter().zip(b).map(|(&x, &y)| (x - y).abs().to_f64_exact()).sum::<f64>() / a.len().max(1) as f64
    };
    let restore_mse = inf
        .dense
        .data()
        .iter()
        .zip(c.full.dense.data())
        .map(|(&a, &b)| ((a - b) * (a - b)).to_f64_exact())
        .sum::<f64>()
        / inf.dense.len().max(1) as f64;
    let pts = g.value(out.points).data();
    let points_mae = pts
        .chunks(3)
        .zip(c.truth.points.data().chunks(3))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| ((x - y) * (x - y)).to_f64_exact())
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / (pts.len() / 3).max(1) as f64;
    Ok(EvalMetrics {
        restore_mse,
        depth_mae: mean_abs(g.value(out.depth).data(), c.truth.depth.data()),
        points_mae,
        camera_mae: mean_abs(g.value(out.camera).data(), c.truth.camera.data()),
        spearman: mean_spearman(&inf.scores, &c.target),
    })
}
