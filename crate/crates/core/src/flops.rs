//! Floating-point operation accounting for the instrumented kernels.

use serde::{Deserialize, Serialize};

/// Which part of the pipeline an attention call belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttnKind {
    Frame,
    Global,
    Restoration,
    Other,
}

/// Multiply-add counts (2 FLOPs per MAC) accumulated by a graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub dense: u64,
    pub frame_attention: u64,
    pub global_attention: u64,
    /// Share of `global_attention` spent on patch-token/patch-token pairs.
    pub global_attention_patch: u64,
    pub restoration_attention: u64,
    pub other_attention: u64,
}

impl FlopCounter {
    /// Score and value products of one attention call: `2·T·S·d + 2·T·S·dv`.
    pub fn attention_cost(queries: usize, keys: usize, d_qk: usize, d_v: usize) -> u64 {
        2 * (queries * keys * d_qk) as u64 + 2 * (queries * keys * d_v) as u64
    }

    pub fn add_attention(&mut self, kind: AttnKind, flops: u64) {
        match kind {
            AttnKind::Frame => self.frame_attention += flops,
            AttnKind::Global => self.global_attention += flops,
            AttnKind::Restoration => self.restoration_attention += flops,
            AttnKind::Other => self.other_attention += flops,
        }
    }

    pub fn total(&self) -> u64 {
        self.dense
            + self.frame_attention
            + self.global_attention
            + self.restoration_attention
            + self.other_attention
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        self.dense += other.dense;
        self.frame_attention += other.frame_attention;
        self.global_attention += other.global_attention;
        self.global_attention_patch += other.global_attention_patch;
        self.restoration_attention += other.restoration_attention;
        self.other_attention += other.other_attention;
    }
}
