//! Supervision targets distilled from the unpruned backbone's global attention.
//!
//! Two per-patch signals are read off an [`AttentionTrace`]: how strongly the
//! frame's own camera token attends to the patch (camera anchoring), and the
//! largest averaged attention the patch pays to any other patch of the clip
//! (cross-view matching). Each is min-max normalised per frame and blended.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionTrace, TokenKind};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaliencyRole {
    Target,
    Predicted,
}

/// Per-frame scores over the patch grid, indexed by flat patch index.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T> {
    pub role: SaliencyRole,
    pub frames: Vec<Vec<T>>,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn new(role: SaliencyRole, frames: Vec<Vec<T>>) -> Result<Self> {
        let p = frames.first().map_or(0, |f| f.len());
        if frames.iter().any(|f| f.len() != p) {
            return Err(Error::shape("SaliencyMap", "frames differ in patch count"));
        }
        if frames.iter().flatten().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::invalid("saliency values must lie in [0, 1]"));
        }
        Ok(SaliencyMap { role, frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn patches(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }

    pub fn get(&self, frame: usize, patch: usize) -> T {
        self.frames[frame][patch]
    }

    /// All scores frame-major.
    pub fn flat(&self) -> Vec<T> {
        self.frames.iter().flatten().copied().collect()
    }
}

fn check_trace<T: Scalar>(trace: &AttentionTrace<T>) -> Result<()> {
    if trace.layers() == 0 || trace.heads() == 0 {
        return Err(Error::invalid("attention trace is empty"));
    }
    trace.validate()
}

/// Camera-anchoring score of every patch of `frame`: the layer/head-averaged
/// weight from the frame's camera token to the patch.
pub fn camera_anchoring<T: Scalar>(trace: &AttentionTrace<T>, frame: usize) -> Result<Vec<T>> {
    check_trace(trace)?;
    let cam = trace
        .camera_of(frame)
        .ok_or_else(|| Error::OutOfRange(format!("frame {frame} has no camera token in the trace")))?;
    let mut patches = trace.patches_of(frame);
    patches.sort_by_key(|&(_, i)| i);
    let count: T = lit((trace.layers() * trace.heads()) as f64);
    let mut out = vec![T::zero(); patches.len()];
    for layer in &trace.weights {
        for a in layer {
            let row = a.row(cam);
            for (o, &(pos, _)) in out.iter_mut().zip(&patches) {
                *o += row[pos];
            }
        }
    }
    Ok(out.into_iter().map(|v| v / count).collect())
}

/// Cross-view-matching score of every patch, grouped by frame: the maximum
/// over all other patch tokens `j` of the averaged weight `i → j`.
pub fn cross_view_matching<T: Scalar>(trace: &AttentionTrace<T>) -> Result<Vec<Vec<T>>> {
    check_trace(trace)?;
    let avg = trace.averaged();
    let patch_pos: Vec<usize> = trace
        .roles
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r.kind, TokenKind::Patch(_)))
        .map(|(p, _)| p)
        .collect();
    (0..trace.num_frames())
        .map(|f| {
            let mut patches = trace.patches_of(f);
            patches.sort_by_key(|&(_, i)| i);
            Ok(patches
                .iter()
                .map(|&(pos, _)| {
                    let row = avg.row(pos);
                    patch_pos
                        .iter()
                        .filter(|&&j| j != pos)
                        .map(|&j| row[j])
                        .fold(T::zero(), T::max)
                })
                .collect())
        })
        .collect()
}

/// Per-frame min-max normalisation; a constant frame maps to 0.5 everywhere.
pub fn min_max_normalize<T: Scalar>(xs: &[T]) -> Vec<T> {
    let lo = xs.iter().copied().fold(T::infinity(), T::min);
    let hi = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !(hi > lo) {
        return vec![lit(0.5); xs.len()];
    }
    xs.iter().map(|&x| ((x - lo) / (hi - lo)).max(T::zero()).min(T::one())).collect()
}

/// `S* = α·Norm(S_cam) + (1−α)·Norm(S_global)`, frame by frame.
pub fn blend_target<T: Scalar>(s_cam: &[Vec<T>], s_global: &[Vec<T>], alpha: f64) -> Result<SaliencyMap<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if s_cam.len() != s_global.len() || s_cam.iter().zip(s_global).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape("blend_target", "camera and matching scores are not aligned"));
    }
    let a: T = lit(alpha);
    let frames = s_cam
        .iter()
        .zip(s_global)
        .map(|(c, g)| {
            min_max_normalize(c)
                .into_iter()
                .zip(min_max_normalize(g))
                .map(|(nc, ng)| (a * nc + (T::one() - a) * ng).max(T::zero()).min(T::one()))
                .collect()
        })
        .collect();
    SaliencyMap::new(SaliencyRole::Target, frames)
}

/// Full target computation from a trace of the unpruned backbone.
pub fn saliency_target<T: Scalar>(trace: &AttentionTrace<T>, alpha: f64) -> Result<SaliencyMap<T>> {
    let s_cam = (0..trace.num_frames())
        .map(|f| camera_anchoring(trace, f))
        .collect::<Result<Vec<_>>>()?;
    let s_global = cross_view_matching(trace)?;
    blend_target(&s_cam, &s_global, alpha)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// CSV with header `frame,token,target,predicted`.
pub fn saliency_csv<T: Scalar>(target: &SaliencyMap<T>, predicted: &SaliencyMap<T>) -> Result<String> {
    if target.frames.len() != predicted.frames.len() || target.patches() != predicted.patches() {
        return Err(Error::shape("saliency_csv", "maps are not aligned"));
    }
    let mut s = String::from("frame,token,target,predicted\n");
    for (f, (t, p)) in target.frames.iter().zip(&predicted.frames).enumerate() {
        for (i, (a, b)) in t.iter().zip(p).enumerate() {
            writeln!(s, "{f},{i},{a},{b}").expect("write to string");
        }
    }
    Ok(s)
}
