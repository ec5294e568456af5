//! Experiment configuration, JSON on disk, with CLI overrides.
//!
//! Every field has a default, so a config file only needs the keys it
//! changes:
//!
//! ```json
//! {
//!   "backbone": { "layers": 4, "qk_gain": 0.5 },
//!   "pipeline": { "keep_ratio": 0.4, "merge_fraction": 0.3, "route_mode": "three-way" },
//!   "schedule": "two-stage",
//!   "train": { "stage1_steps": 200, "stage2_steps": 200, "weights": { "task": 0.1 } },
//!   "data": { "train_clips": 4, "eval_clips": 4, "frames": 4 },
//!   "seeds": { "backbone": 0, "modules": 0, "data": 0 },
//!   "bench": { "frames": [8, 16, 32, 64] }
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use preprune::backbone::BackboneConfig;
use preprune::pipeline::PipelineConfig;
use preprune::restoration::RestoreMode;
use preprune::router::RouteMode;
use preprune::train::{Schedule, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Frames per clip.
    pub frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_clips: 4, eval_clips: 4, frames: 4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub backbone: u64,
    /// Scorer, restorer and head initialisation.
    pub modules: u64,
    pub data: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Clip lengths to time.
    pub frames: Vec<usize>,
    /// Block after which the in-backbone comparison drops tokens; `None`
    /// means half the depth.
    pub cut_layer: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { frames: vec![8, 16, 32, 64], cut_layer: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub pipeline: PipelineConfig,
    pub schedule: Schedule,
    pub train: TrainConfig,
    /// Adam steps used to fit the frozen heads before training.
    pub calibration_steps: usize,
    pub data: DataConfig,
    pub seeds: Seeds,
    pub bench: BenchConfig,
    /// Output directory; not part of the fingerprint.
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backbone: BackboneConfig::default(),
            pipeline: PipelineConfig::default(),
            schedule: Schedule::TwoStage,
            train: TrainConfig::default(),
            calibration_steps: 200,
            data: DataConfig::default(),
            seeds: Seeds::default(),
            bench: BenchConfig::default(),
            out: PathBuf::from("runs"),
        }
    }
}

/// Sweepable parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    KeepRatio,
    MergeFraction,
    Alpha,
    Mode,
    Restoration,
    Schedule,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::KeepRatio => "r",
            Axis::MergeFraction => "gamma",
            Axis::Alpha => "alpha",
            Axis::Mode => "mode",
            Axis::Restoration => "restoration",
            Axis::Schedule => "schedule",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "r" => Axis::KeepRatio,
            "gamma" | "γ" => Axis::MergeFraction,
            "alpha" | "α" => Axis::Alpha,
            "mode" => Axis::Mode,
            "restoration" => Axis::Restoration,
            "schedule" => Axis::Schedule,
            _ => bail!("unknown sweep axis {s:?} (expected r, gamma, alpha, mode, restoration or schedule)"),
        })
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.train.weights.validate()?;
        if self.backbone.h < 2 || self.backbone.w < 2 {
            bail!("patch grid must be at least 2x2");
        }
        if self.data.frames == 0 || self.data.train_clips == 0 || self.data.eval_clips == 0 {
            bail!("data config needs at least one frame, one training clip and one eval clip");
        }
        if self.data.eval_clips > 500 || self.data.train_clips > 500 {
            bail!("at most 500 clips per split");
        }
        if self.bench.frames.is_empty() || self.bench.frames.contains(&0) {
            bail!("bench frame list must be non-empty and positive");
        }
        if self.bench.cut_layer.is_some_and(|l| l > self.backbone.layers) {
            bail!("bench cut layer exceeds backbone depth");
        }
        Ok(())
    }

    /// Set every seed to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds { backbone: seed, modules: seed, data: seed };
        self
    }

    pub fn with_axis(&self, axis: Axis, value: &str) -> Result<Self> {
        let mut c = self.clone();
        let num = || -> Result<f64> { value.parse().with_context(|| format!("{value:?} is not a number")) };
        match axis {
            Axis::KeepRatio => c.pipeline.keep_ratio = num()?,
            Axis::MergeFraction => c.pipeline.merge_fraction = num()?,
            Axis::Alpha => c.pipeline.alpha = num()?,
            Axis::Mode => c.pipeline.route_mode = value.parse::<RouteMode>()?,
            Axis::Restoration => c.pipeline.restore_mode = value.parse::<RestoreMode>()?,
            Axis::Schedule => c.schedule = value.parse::<Schedule>()?,
        }
        c.validate()?;
        Ok(c)
    }

    pub fn cut_layer(&self) -> usize {
        self.bench.cut_layer.unwrap_or(self.backbone.layers / 2)
    }

    /// Seeds of the training and held-out clips.
    pub fn clip_seeds(&self) -> (Vec<u64>, Vec<u64>) {
        let base = self.seeds.data * 1000;
        let train = (0..self.data.train_clips as u64).map(|i| base + i).collect();
        let eval = (0..self.data.eval_clips as u64).map(|i| base + 500 + i).collect();
        (train, eval)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON, output
    /// directory excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.pipeline.keep_ratio, 0.40);
        assert_eq!(c.pipeline.merge_fraction, 0.30);
        assert_eq!(c.pipeline.alpha, 0.25);
        assert_eq!(c.data.train_clips, 4);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"pipeline": {"keep_ratio": 0.2}}"#).unwrap();
        assert_eq!(c.pipeline.keep_ratio, 0.2);
        assert_eq!(c.pipeline.merge_fraction, 0.30);
        assert_eq!(c.backbone, BackboneConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"pipelin": {}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"pipeline": {"keep": 1}}"#).is_err());
    }

    #[test]
    fn fingerprint_ignores_out_but_tracks_everything_else() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
        let c = a.with_axis(Axis::Alpha, "0.5").unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_ne!(a.fingerprint(), a.clone().with_seed(1).fingerprint());
    }

    #[test]
    fn axis_overrides() {
        let a = ExperimentConfig::default();
        assert_eq!(a.with_axis("r".parse().unwrap(), "0.1").unwrap().pipeline.keep_ratio, 0.1);
        assert_eq!(
            a.with_axis(Axis::Mode, "pure-prune").unwrap().pipeline.route_mode,
            RouteMode::PurePrune
        );
        assert_eq!(a.with_axis(Axis::Schedule, "joint").unwrap().schedule, Schedule::Joint);
        assert!(a.with_axis(Axis::KeepRatio, "0").is_err());
        assert!(a.with_axis(Axis::KeepRatio, "abc").is_err());
        assert!(a.with_axis(Axis::Restoration, "nearest").is_err());
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn clip_seeds_are_disjoint() {
        let (t, e) = ExperimentConfig::default().with_seed(3).clip_seeds();
        assert_eq!(t, vec![3000, 3001, 3002, 3003]);
        assert_eq!(e, vec![3500, 3501, 3502, 3503]);
    }
}
