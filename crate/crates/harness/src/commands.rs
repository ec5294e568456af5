//! The five subcommands. Each writes into `cfg.out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use preprune::objectives::LossWeights;
use preprune::train::{calibrate_heads, evaluate, LossRecord, Schedule, Trainer, LOSS_CSV_HEADER};
use preprune::{ParamStore, Pipeline};
use serde::{Deserialize, Serialize};

use crate::bench::{bench_mode, time_median, BenchMode, BenchRecord, BENCH_CSV_HEADER};
use crate::config::{Axis, ExperimentConfig};
use crate::run::{self, Split};
use crate::table::{num, Table};

/// Which part of training `train` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
            Stage::Joint => "joint",
        }
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "1" => Stage::One,
            "2" => Stage::Two,
            "joint" => Stage::Joint,
            _ => bail!("unknown stage {s:?} (expected 1, 2 or joint)"),
        })
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

// ----------------------------------------------------------------------
// gen
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipListing {
    pub split: String,
    pub seed: u64,
    /// Relative to the output directory.
    pub dir: String,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub fingerprint: String,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub clips: Vec<ClipListing>,
}

pub fn data_manifest_path(out: &Path) -> PathBuf {
    out.join("data").join("manifest.json")
}

/// Write the training and held-out clips and a manifest listing every file.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<DataManifest> {
    let mut clips = Vec::new();
    for split in [Split::Train, Split::Eval] {
        for clip in run::generate_split(cfg, split)? {
            let dir = run::clip_dir(&cfg.out, split, clip.seed);
            let m = clip.save_dir(&dir).with_context(|| format!("writing {}", dir.display()))?;
            let mut files = vec!["manifest.json".to_string()];
            for f in &m.frames {
                files.extend([f.image.file.clone(), f.depth.file.clone(), f.points.file.clone()]);
            }
            clips.push(ClipListing {
                split: split.as_str().into(),
                seed: clip.seed,
                dir: format!("data/{}/clip_{}", split.as_str(), clip.seed),
                files,
            });
        }
    }
    let manifest = DataManifest {
        fingerprint: cfg.fingerprint(),
        frames: cfg.data.frames,
        h: cfg.backbone.h,
        w: cfg.backbone.w,
        clips,
    };
    write_json(&data_manifest_path(&cfg.out), &manifest)?;
    Ok(manifest)
}

// ----------------------------------------------------------------------
// train
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: String,
    pub schedule: Schedule,
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub backbone_checksum: u64,
    pub params_checksum: u64,
    /// Last optimiser step, counted from the start of training.
    pub steps: usize,
    pub last: Option<LossRecord>,
}

pub fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join("checkpoints").join(format!("{}.json", stage.as_str()))
}

fn sidecar(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("manifest.json")
}

/// Load a checkpoint into a pipeline built from `cfg`, refusing one made
/// with a different backbone or module layout.
pub fn load_checkpoint(cfg: &ExperimentConfig, ckpt: &Path) -> Result<(Pipeline, CheckpointManifest)> {
    let side = sidecar(ckpt);
    let manifest: CheckpointManifest = serde_json::from_str(
        &fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?,
    )
    .with_context(|| format!("parsing {}", side.display()))?;
    let mut p = run::build_pipeline(cfg)?;
    let (a, b) = (&manifest.config, cfg);
    if a.backbone != b.backbone || a.seeds.backbone != b.seeds.backbone {
        bail!("checkpoint {} was trained on a different backbone", ckpt.display());
    }
    if p.backbone.params.checksum() != manifest.backbone_checksum {
        bail!("backbone weights differ from the ones checkpoint {} was trained with", ckpt.display());
    }
    let pa = &a.pipeline;
    let pb = &b.pipeline;
    if (pa.scorer_hidden, pa.restore_width, pa.restore_heads) != (pb.scorer_hidden, pb.restore_width, pb.restore_heads) {
        bail!("checkpoint {} has a different scorer or restorer layout", ckpt.display());
    }
    let store = ParamStore::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if store.checksum() != manifest.params_checksum {
        bail!("checkpoint {} does not match its manifest", ckpt.display());
    }
    p.load_store(&store)?;
    Ok((p, manifest))
}

fn save_checkpoint(
    cfg: &ExperimentConfig,
    p: &Pipeline,
    stage: Stage,
    steps: usize,
    last: Option<LossRecord>,
) -> Result<PathBuf> {
    let path = checkpoint_path(&cfg.out, stage);
    fs::create_dir_all(path.parent().expect("has parent"))?;
    let store = p.to_store();
    store.save(&path)?;
    write_json(
        &sidecar(&path),
        &CheckpointManifest {
            stage: stage.as_str().into(),
            schedule: cfg.schedule,
            fingerprint: cfg.fingerprint(),
            config: cfg.clone(),
            backbone_checksum: p.backbone.params.checksum(),
            params_checksum: store.checksum(),
            steps,
            last,
        },
    )?;
    Ok(path)
}

fn write_losses(path: &Path, fingerprint: &str, history: &[LossRecord]) -> Result<()> {
    let mut t = Table::create(path, fingerprint, &LOSS_CSV_HEADER)?;
    for r in history {
        t.row(&[
            r.step.to_string(),
            r.stage.clone(),
            num(r.total),
            num(r.distill),
            num(r.restore),
            num(r.camera),
            num(r.depth),
            num(r.pmap),
        ])?;
    }
    t.finish()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
    pub history: Vec<LossRecord>,
}

/// Stage 1 distils the scorer. Stage 2 continues from the stage-1
/// checkpoint under the `two-stage` schedule, or starts fresh without the
/// distillation term under `stage2-only`. Joint trains both modules with the
/// full objective from step 0. Fresh starts fit the heads first.
pub fn cmd_train(cfg: &ExperimentConfig, stage: Stage) -> Result<TrainOutcome> {
    let clips = run::load_split(cfg, Split::Train)?;
    let w = cfg.train.weights;
    let total = cfg.train.stage1_steps + cfg.train.stage2_steps;
    let (mut p, mut trainer, steps, weights, tag) = match (stage, cfg.schedule) {
        (Stage::One, _) => {
            let steps = match cfg.schedule {
                Schedule::Stage1Only => total,
                _ => cfg.train.stage1_steps,
            };
            (run::build_pipeline(cfg)?, Trainer::new(cfg.train.lr, w)?, steps, None, "1")
        }
        (Stage::Two, Schedule::TwoStage) => {
            let ckpt = checkpoint_path(&cfg.out, Stage::One);
            if !ckpt.exists() {
                bail!("two-stage training needs a stage-1 checkpoint at {} (run `train --stage 1` first)", ckpt.display());
            }
            let (p, m) = load_checkpoint(cfg, &ckpt)?;
            let mut t = Trainer::new(cfg.train.lr, w)?;
            t.step = m.steps;
            (p, t, cfg.train.stage2_steps, Some(w), "2")
        }
        (Stage::Two, Schedule::Stage2Only) => {
            let w2 = LossWeights { distill: 0.0, ..w };
            (run::build_pipeline(cfg)?, Trainer::new(cfg.train.lr, w2)?, total, Some(w2), "2")
        }
        (Stage::Two, s) => bail!("schedule {s} has no separate stage 2; use --stage 1 or --stage joint"),
        (Stage::Joint, _) => (run::build_pipeline(cfg)?, Trainer::new(cfg.train.lr, w)?, total, Some(w), "joint"),
    };
    let caches = run::caches(&p, &clips)?;
    if trainer.step == 0 {
        calibrate_heads(&mut p, &caches, cfg.calibration_steps)?;
    }
    match weights {
        None => trainer.run_stage1(&mut p, &caches, steps)?,
        Some(wt) => trainer.run_stage2(&mut p, &caches, steps, &wt, tag)?,
    }
    let history = trainer.history;
    let checkpoint = save_checkpoint(cfg, &p, stage, trainer.step, history.last().cloned())?;
    let losses = cfg.out.join(format!("loss_{}.csv", stage.as_str()));
    write_losses(&losses, &cfg.fingerprint(), &history)?;
    Ok(TrainOutcome { checkpoint, losses, history })
}

// ----------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------

pub const METRICS_CSV_HEADER: [&str; 11] = [
    "checkpoint",
    "clip_seed",
    "restore_mse",
    "depth_mae",
    "points_mae",
    "camera_mae",
    "spearman",
    "kept",
    "merged",
    "pruned",
    "global_attention_flops",
];

pub const SCORES_CSV_HEADER: [&str; 6] = ["checkpoint", "clip_seed", "frame", "token", "target", "score"];

/// Most advanced checkpoint present in `out`.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    [Stage::Two, Stage::Joint, Stage::One]
        .into_iter()
        .map(|s| checkpoint_path(out, s))
        .find(|p| p.exists())
}

/// One metrics row per held-out clip, plus per-token scores.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let ckpt = match checkpoint {
        Some(c) => c.to_path_buf(),
        None => latest_checkpoint(&cfg.out).context("no checkpoint found (run `train` first)")?,
    };
    let (p, _) = load_checkpoint(cfg, &ckpt)?;
    let clips = run::load_split(cfg, Split::Eval)?;
    let name = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
    let fp = cfg.fingerprint();
    let metrics_path = cfg.out.join(format!("eval_{name}.csv"));
    let mut metrics = Table::create(&metrics_path, &fp, &METRICS_CSV_HEADER)?;
    let mut scores = Table::create(&cfg.out.join(format!("scores_{name}.csv")), &fp, &SCORES_CSV_HEADER)?;
    for clip in &clips {
        let c = preprune::train::ClipCache::build(&p, clip)?;
        let m = evaluate(&p, &c)?;
        let inf = p.infer(&c.grids)?;
        let count = |f: fn(&preprune::router::FramePlan) -> usize| inf.plan.frames.iter().map(f).sum::<usize>();
        metrics.row(&[
            name.clone(),
            clip.seed.to_string(),
            num(m.restore_mse),
            num(m.depth_mae),
            num(m.points_mae),
            num(m.camera_mae),
            num(m.spearman),
            count(|f| f.keep.len()).to_string(),
            count(|f| f.merge.len()).to_string(),
            count(|f| f.prune.len()).to_string(),
            inf.flops.global_attention.to_string(),
        ])?;
        for (f, (pred, target)) in inf.scores.frames.iter().zip(&c.target.frames).enumerate() {
            for (i, (s, t)) in pred.iter().zip(target).enumerate() {
                scores.row(&[
                    name.clone(),
                    clip.seed.to_string(),
                    f.to_string(),
                    i.to_string(),
                    num(*t),
                    num(*s),
                ])?;
            }
        }
    }
    metrics.finish()?;
    scores.finish()?;
    Ok(metrics_path)
}

// ----------------------------------------------------------------------
// sweep
// ----------------------------------------------------------------------

pub const SWEEP_CSV_HEADER: [&str; 13] = [
    "axis",
    "value",
    "schedule",
    "restore_mse",
    "depth_mae",
    "points_mae",
    "camera_mae",
    "spearman",
    "final_restore",
    "final_distill",
    "global_attention_flops",
    "total_flops",
    "median_ms",
];

/// Train and evaluate one config per value. Rows carry the fingerprint of
/// their own config.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: Axis, values: &[String]) -> Result<PathBuf> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let points = values
        .iter()
        .map(|v| cfg.with_axis(axis, v).with_context(|| format!("sweep value {v:?}")))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(format!("sweep_{}.csv", axis.as_str()));
    let mut t = Table::create(&path, &cfg.fingerprint(), &SWEEP_CSV_HEADER)?;
    for (value, pc) in values.iter().zip(&points) {
        let res = run::train_and_evaluate(pc)?;
        let probe = run::generate_split(pc, Split::Eval)?;
        let grids = res.pipeline.encode(&probe[0])?;
        let (ms, inf) = time_median(|| Ok(res.pipeline.infer(&grids)?))?;
        let m = res.mean;
        t.row_with(
            &pc.fingerprint(),
            &[
                axis.as_str().into(),
                value.clone(),
                pc.schedule.to_string(),
                num(m.restore_mse),
                num(m.depth_mae),
                num(m.points_mae),
                num(m.camera_mae),
                num(m.spearman),
                num(res.final_restore),
                num(res.final_distill),
                inf.flops.global_attention.to_string(),
                inf.flops.total().to_string(),
                num(ms),
            ],
        )?;
    }
    t.finish()?;
    Ok(path)
}

// ----------------------------------------------------------------------
// bench
// ----------------------------------------------------------------------

/// Time the unpruned pass, the pre-backbone cut and the mid-backbone cut
/// for each clip length. Modules are freshly initialised; their values do
/// not affect cost.
pub fn cmd_bench(cfg: &ExperimentConfig, frames: &[usize]) -> Result<(PathBuf, Vec<BenchRecord>)> {
    if frames.is_empty() || frames.contains(&0) {
        bail!("bench needs a non-empty list of positive clip lengths");
    }
    let p = run::build_pipeline(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("bench.csv");
    let mut t = Table::create(&path, &cfg.fingerprint(), &BENCH_CSV_HEADER)?;
    let mut records = Vec::new();
    for &n in frames {
        let clip = preprune::scenes::generate_clip(cfg.seeds.data * 1000 + 900, n, cfg.backbone.h, cfg.backbone.w)?;
        let grids = p.encode(&clip)?;
        let full = bench_mode(&p, &grids, BenchMode::Full)?;
        let rows = [
            bench_mode(&p, &grids, BenchMode::PreCut)?,
            bench_mode(&p, &grids, BenchMode::InsideCut(cfg.cut_layer()))?,
        ];
        for r in std::iter::once(full.clone()).chain(rows) {
            let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            t.row(&[
                r.frames.to_string(),
                r.patches.to_string(),
                num(r.keep_ratio),
                r.mode.clone(),
                r.attention_flops().to_string(),
                r.flops.global_attention.to_string(),
                r.flops.global_attention_patch.to_string(),
                r.flops.total().to_string(),
                num(ratio(r.flops.global_attention, full.flops.global_attention)),
                num(ratio(r.flops.global_attention_patch, full.flops.global_attention_patch)),
                num(r.median_ms),
            ])?;
            records.push(r);
        }
    }
    t.finish()?;
    Ok((path, records))
}
