//! Latency and FLOP comparison of the unpruned backbone, the pre-backbone
//! cut and a cut applied halfway through the backbone.

use std::time::Instant;

use anyhow::Result;
use preprune::flops::FlopCounter;
use preprune::{Pipeline, TokenGrid};
use serde::{Deserialize, Serialize};

pub const WARMUPS: usize = 2;
pub const RUNS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchMode {
    /// Every token through every block.
    Full,
    /// Scorer, router, backbone on the reduced sequence, restoration.
    PreCut,
    /// All tokens through the first `n` blocks, kept tokens only after.
    InsideCut(usize),
}

impl BenchMode {
    pub fn label(self) -> String {
        match self {
            BenchMode::Full => "full".into(),
            BenchMode::PreCut => "pre-aa".into(),
            BenchMode::InsideCut(l) => format!("in-aa-at-layer-{l}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub frames: usize,
    pub patches: usize,
    pub keep_ratio: f64,
    pub mode: String,
    /// Median wall-clock of [`RUNS`] runs after [`WARMUPS`] warmups.
    pub median_ms: f64,
    pub flops: FlopCounter,
}

impl BenchRecord {
    /// Attention FLOPs of every kind.
    pub fn attention_flops(&self) -> u64 {
        self.flops.total() - self.flops.dense
    }
}

pub const BENCH_CSV_HEADER: [&str; 11] = [
    "frames",
    "patches",
    "keep_ratio",
    "mode",
    "attention_flops",
    "global_attention_flops",
    "global_patch_flops",
    "total_flops",
    "global_ratio_to_full",
    "patch_ratio_to_full",
    "median_ms",
];

/// Median of `RUNS` timed calls after `WARMUPS` untimed ones. Returns the
/// median in milliseconds and the value of the last call.
pub fn time_median<R>(mut f: impl FnMut() -> Result<R>) -> Result<(f64, R)> {
    for _ in 0..WARMUPS {
        f()?;
    }
    let mut times = Vec::with_capacity(RUNS);
    let mut last = None;
    for _ in 0..RUNS {
        let t = Instant::now();
        let r = f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        last = Some(r);
    }
    times.sort_by(f64::total_cmp);
    Ok((times[RUNS / 2], last.expect("RUNS > 0")))
}

pub fn bench_mode(p: &Pipeline, grids: &[TokenGrid], mode: BenchMode) -> Result<BenchRecord> {
    let (ms, flops) = time_median(|| {
        Ok(match mode {
            BenchMode::Full => p.full_run(grids, false)?.flops,
            BenchMode::PreCut => p.infer(grids)?.flops,
            BenchMode::InsideCut(l) => p.infer_cut_inside(grids, l)?.flops,
        })
    })?;
    Ok(BenchRecord {
        frames: grids.len(),
        patches: p.patches(),
        keep_ratio: if mode == BenchMode::Full { 1.0 } else { p.cfg.keep_ratio },
        mode: mode.label(),
        median_ms: ms,
        flops,
    })
}
