//! Keep / merge / prune routing of patch tokens ahead of the backbone.
//!
//! Per frame the top `⌈P·r⌉` tokens by predicted score are kept. The remaining
//! tokens of frame `f` form its residual set `N_f`, summarised by the mean
//! residual score `φ_f`. A clip-level merge budget
//! `B_M = min(⌊γ·N·P⌋, Σ|N_f|)` is shared across frames in proportion to `φ`,
//! capped at `|N_f|`, and integerised by largest remainder. Within a frame the
//! best-scoring residual tokens are merged into their most cosine-similar kept
//! token; the rest are dropped.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, MergeGroups, Var};
use crate::saliency::SaliencyMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Slack applied before rounding `P·r` and `γ·N·P` so that decimal ratios
/// such as `0.07·100` do not round the wrong way.
const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteMode {
    /// Keep / merge / prune with importance-adaptive merge budgets.
    ThreeWay,
    /// No merge tier (`γ = 0`).
    PurePrune,
    /// No prune tier: every non-kept token is merged.
    FullMerge,
    /// Per-frame merge count `min(⌈γ·P⌉, |N_f|)` regardless of importance.
    UniformAlloc,
}

impl RouteMode {
    pub const ALL: [RouteMode; 4] = [
        RouteMode::ThreeWay,
        RouteMode::PurePrune,
        RouteMode::FullMerge,
        RouteMode::UniformAlloc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RouteMode::ThreeWay => "three-way",
            RouteMode::PurePrune => "pure-prune",
            RouteMode::FullMerge => "full-merge",
            RouteMode::UniformAlloc => "uniform-alloc",
        }
    }

    /// Whether `Σ M_f = B_M` is part of this mode's contract.
    pub fn conserves_budget(self) -> bool {
        matches!(self, RouteMode::ThreeWay | RouteMode::PurePrune)
    }
}

impl fmt::Display for RouteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RouteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouteMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown routing mode {s:?}")))
    }
}

/// Routing of one frame. All index lists hold flat patch indices in
/// ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub frame: usize,
    pub keep: Vec<usize>,
    pub merge: Vec<usize>,
    pub prune: Vec<usize>,
    /// Residual-saliency summary `φ_f`.
    pub phi: f64,
    /// `(merge token, destination keep token)` pairs, ordered by merge token.
    pub dst: Vec<(usize, usize)>,
}

impl FramePlan {
    pub fn merge_count(&self) -> usize {
        self.merge.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub mode: RouteMode,
    pub keep_ratio: f64,
    pub merge_fraction: f64,
    pub patches: usize,
    /// `min(⌊γ·N·P⌋, Σ|N_f|)` for the effective `γ` of the mode.
    pub budget: usize,
    pub frames: Vec<FramePlan>,
}

impl RoutingPlan {
    pub fn kept_per_frame(&self) -> usize {
        keep_count(self.patches, self.keep_ratio).unwrap_or(0)
    }

    pub fn total_kept(&self) -> usize {
        self.frames.iter().map(|f| f.keep.len()).sum()
    }

    pub fn merge_counts(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.merge.len()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Check every structural invariant of the plan.
    pub fn validate(&self) -> Result<()> {
        let p = self.patches;
        let k = keep_count(p, self.keep_ratio)?;
        let mut residual_total = 0;
        for fp in &self.frames {
            if fp.keep.len() != k {
                return Err(Error::invalid(format!("frame {} keeps {} not {k}", fp.frame, fp.keep.len())));
            }
            let mut seen = vec![0u8; p];
            for &i in fp.keep.iter().chain(&fp.merge).chain(&fp.prune) {
                if i >= p {
                    return Err(Error::OutOfRange(format!("token {i} of {p}")));
                }
                seen[i] += 1;
            }
            if seen.iter().any(|&c| c != 1) {
                return Err(Error::invalid(format!("frame {} sets are not a partition", fp.frame)));
            }
            if fp.dst.len() != fp.merge.len()
                || fp
                    .dst
                    .iter()
                    .zip(&fp.merge)
                    .any(|(&(m, d), &mm)| m != mm || fp.keep.binary_search(&d).is_err())
            {
                return Err(Error::invalid(format!("frame {} has an invalid destination map", fp.frame)));
            }
            residual_total += p - k;
            if self.mode == RouteMode::FullMerge && !fp.prune.is_empty() {
                return Err(Error::invalid("full-merge plan prunes tokens"));
            }
        }
        if self.mode.conserves_budget() {
            let total: usize = self.frames.iter().map(|f| f.merge.len()).sum();
            let gamma = if self.mode == RouteMode::PurePrune { 0.0 } else { self.merge_fraction };
            let expect = merge_budget(gamma, self.frames.len(), p, residual_total)?;
            if total != expect || self.budget != expect {
                return Err(Error::invalid(format!("merge total {total}, budget {}, expected {expect}", self.budget)));
            }
        }
        Ok(())
    }
}

/// `⌈P·r⌉`, requiring `r ∈ (0, 1]`.
pub fn keep_count(patches: usize, r: f64) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::invalid(format!("keep ratio {r} outside (0, 1]")));
    }
    let k = (patches as f64 * r - ROUNDING_SLACK).ceil().max(1.0) as usize;
    Ok(k.min(patches))
}

/// `min(⌊γ·N·P⌋, Σ|N_f|)`, requiring `γ ∈ [0, 1)`.
pub fn merge_budget(gamma: f64, frames: usize, patches: usize, residual_total: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("merge fraction {gamma} outside [0, 1)")));
    }
    let raw = (gamma * (frames * patches) as f64 + ROUNDING_SLACK).floor() as usize;
    Ok(raw.min(residual_total))
}

/// Indices sorted by descending score, lower index first on ties.
fn rank_desc<T: Scalar>(scores: &[T], candidates: &[usize]) -> Vec<usize> {
    let mut idx = candidates.to_vec();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx
}

/// Per-frame keep sets: the `⌈P·r⌉` highest-scoring patches, ascending.
pub fn select_keep<T: Scalar>(scores: &SaliencyMap<T>, r: f64) -> Result<Vec<Vec<usize>>> {
    let p = scores.patches();
    let k = keep_count(p, r)?;
    let all: Vec<usize> = (0..p).collect();
    Ok(scores
        .frames
        .iter()
        .map(|s| {
            let mut keep = rank_desc(s, &all);
            keep.truncate(k);
            keep.sort_unstable();
            keep
        })
        .collect())
}

/// Complement of a sorted keep set within `0..p`.
pub fn residual_of(keep: &[usize], p: usize) -> Vec<usize> {
    (0..p).filter(|i| keep.binary_search(i).is_err()).collect()
}

/// Mean predicted score over each frame's non-kept tokens (0 when empty).
pub fn frame_importance<T: Scalar>(scores: &SaliencyMap<T>, keep: &[Vec<usize>]) -> Result<Vec<T>> {
    if keep.len() != scores.num_frames() {
        return Err(Error::shape("frame_importance", "one keep set per frame"));
    }
    let p = scores.patches();
    Ok(scores
        .frames
        .iter()
        .zip(keep)
        .map(|(s, k)| {
            let residual = residual_of(k, p);
            if residual.is_empty() {
                T::zero()
            } else {
                residual.iter().map(|&i| s[i]).sum::<T>() / T::from_usize(residual.len()).expect("usize")
            }
        })
        .collect())
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite importance")
}

/// Capped proportional shares of `budget` in exact arithmetic.
///
/// Shares follow `weights`; any frame whose share exceeds its cap is pinned
/// to the cap and the freed budget is re-shared among the remaining frames,
/// until no cap is violated. When the remaining frames all carry zero weight
/// they share uniformly.
pub fn capped_quotas(weights: &[BigRational], caps: &[usize], budget: usize) -> Vec<BigRational> {
    let n = weights.len();
    let mut quota: Vec<Option<BigRational>> = vec![None; n];
    let mut remaining = BigRational::from_integer(BigInt::from(budget));
    loop {
        let open: Vec<usize> = (0..n).filter(|&f| quota[f].is_none()).collect();
        if open.is_empty() {
            break;
        }
        let wsum: BigRational = open.iter().map(|&f| weights[f].clone()).sum();
        let w = |f: usize| {
            if wsum.is_zero() {
                BigRational::from_integer(1.into())
            } else {
                weights[f].clone()
            }
        };
        let denom = if wsum.is_zero() {
            BigRational::from_integer(BigInt::from(open.len()))
        } else {
            wsum.clone()
        };
        let shares: Vec<(usize, BigRational)> = open
            .iter()
            .map(|&f| (f, &remaining * w(f) / &denom))
            .collect();
        let over: Vec<usize> = shares
            .iter()
            .filter(|(f, s)| *s > BigRational::from_integer(BigInt::from(caps[*f])))
            .map(|(f, _)| *f)
            .collect();
        if over.is_empty() {
            for (f, s) in shares {
                quota[f] = Some(s);
            }
            break;
        }
        for f in over {
            let cap = BigRational::from_integer(BigInt::from(caps[f]));
            remaining -= &cap;
            quota[f] = Some(cap);
        }
    }
    quota.into_iter().map(|q| q.expect("assigned")).collect()
}

/// Integerise quotas summing to an integer by largest remainder; ties go to
/// the lower index.
pub fn largest_remainder(quotas: &[BigRational]) -> Vec<usize> {
    let floors: Vec<BigInt> = quotas.iter().map(|q| q.floor().to_integer()).collect();
    let total: BigRational = quotas.iter().cloned().sum();
    let target = total.round().to_integer();
    let assigned: BigInt = floors.iter().sum();
    let leftover = (target - assigned).to_usize().unwrap_or(0);
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    let frac = |i: usize| &quotas[i] - BigRational::from_integer(floors[i].clone());
    order.sort_by(|&a, &b| frac(b).cmp(&frac(a)).then(a.cmp(&b)));
    let mut out: Vec<usize> = floors.iter().map(|f| f.to_usize().expect("non-negative")).collect();
    for &i in order.iter().take(leftover) {
        out[i] += 1;
    }
    out
}

/// Importance-adaptive merge counts `M_f` with `Σ M_f = B_M` and
/// `M_f ≤ |N_f|`.
pub fn allocate_merge_budget<T: Scalar>(
    phi: &[T],
    gamma: f64,
    residual_sizes: &[usize],
    patches: usize,
) -> Result<Vec<usize>> {
    if phi.len() != residual_sizes.len() {
        return Err(Error::shape("allocate_merge_budget", "one importance per frame"));
    }
    if phi.iter().any(|&v| !(v >= T::zero())) {
        return Err(Error::invalid("frame importance must be non-negative"));
    }
    let budget = merge_budget(gamma, phi.len(), patches, residual_sizes.iter().sum())?;
    let weights: Vec<BigRational> = phi.iter().map(|v| exact(v.to_f64_exact())).collect();
    let quotas = capped_quotas(&weights, residual_sizes, budget);
    Ok(largest_remainder(&quotas))
}

/// Cosine similarity; zero-norm vectors score 0 against everything.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot / (na * nb)
}

/// Most cosine-similar keep token for each merge token; ties go to the lowest
/// keep index.
pub fn assign_merge_destinations<T: Scalar>(
    features: &Tensor<T>,
    keep: &[usize],
    merge: &[usize],
) -> Result<Vec<(usize, usize)>> {
    if merge.is_empty() {
        return Ok(Vec::new());
    }
    if keep.is_empty() {
        return Err(Error::invalid("merge tokens without any keep token"));
    }
    let mut sorted_keep = keep.to_vec();
    sorted_keep.sort_unstable();
    Ok(merge
        .iter()
        .map(|&m| {
            let fm = features.row(m);
            let mut best = (sorted_keep[0], cosine(fm, features.row(sorted_keep[0])));
            for &k in &sorted_keep[1..] {
                let c = cosine(fm, features.row(k));
                if c > best.1 {
                    best = (k, c);
                }
            }
            (m, best.0)
        })
        .collect())
}

/// Build the full routing plan from predicted scores and per-frame features.
pub fn plan_routes<T: Scalar>(
    features: &[Tensor<T>],
    scores: &SaliencyMap<T>,
    r: f64,
    gamma: f64,
    mode: RouteMode,
) -> Result<RoutingPlan> {
    if features.len() != scores.num_frames() {
        return Err(Error::shape("route", "one feature grid per scored frame"));
    }
    let p = scores.patches();
    if features.iter().any(|f| f.rows() != p) {
        return Err(Error::shape("route", "feature grids and scores disagree on P"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("merge fraction {gamma} outside [0, 1)")));
    }
    let keep = select_keep(scores, r)?;
    let phi = frame_importance(scores, &keep)?;
    let residual: Vec<Vec<usize>> = keep.iter().map(|k| residual_of(k, p)).collect();
    let sizes: Vec<usize> = residual.iter().map(|r| r.len()).collect();
    let n = scores.num_frames();
    let (counts, budget) = match mode {
        RouteMode::ThreeWay => (
            allocate_merge_budget(&phi, gamma, &sizes, p)?,
            merge_budget(gamma, n, p, sizes.iter().sum())?,
        ),
        RouteMode::PurePrune => (vec![0; n], 0),
        RouteMode::FullMerge => (sizes.clone(), merge_budget(gamma, n, p, sizes.iter().sum())?),
        RouteMode::UniformAlloc => {
            let per = (gamma * p as f64 - ROUNDING_SLACK).ceil().max(0.0) as usize;
            (
                sizes.iter().map(|&s| per.min(s)).collect(),
                merge_budget(gamma, n, p, sizes.iter().sum())?,
            )
        }
    };
    let frames = (0..n)
        .map(|f| {
            let ranked = rank_desc(&scores.frames[f], &residual[f]);
            let mut merge = ranked[..counts[f]].to_vec();
            let mut prune = ranked[counts[f]..].to_vec();
            merge.sort_unstable();
            prune.sort_unstable();
            let dst = assign_merge_destinations(&features[f], &keep[f], &merge)?;
            Ok(FramePlan {
                frame: f,
                keep: keep[f].clone(),
                merge,
                prune,
                phi: phi[f].to_f64_exact(),
                dst,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoutingPlan {
        mode,
        keep_ratio: r,
        merge_fraction: gamma,
        patches: p,
        budget,
        frames,
    })
}

/// Merge groups over clip-level row indices `frame·P + patch`, one group per
/// keep token in `(frame, keep index)` order.
pub fn merge_groups(plan: &RoutingPlan) -> MergeGroups {
    let p = plan.patches;
    let mut groups = MergeGroups::default();
    for fp in &plan.frames {
        let base = fp.frame * p;
        for &k in &fp.keep {
            groups.anchors.push(base + k);
            groups.members.push(
                fp.dst
                    .iter()
                    .filter(|&&(_, d)| d == k)
                    .map(|&(m, _)| base + m)
                    .collect(),
            );
        }
    }
    groups
}

/// Differentiable score-weighted scatter-add on a graph. `features` holds
/// all frames' patches stacked (`N·P × D`), `scores` the matching `N·P`
/// predicted scores. Returns `|K| × D` rows in `(frame, keep index)` order.
pub fn merge_on_graph<T: Scalar>(g: &mut Graph<T>, features: Var, scores: Var, plan: &RoutingPlan) -> Result<Var> {
    g.merge_scatter(features, scores, merge_groups(plan))
}

/// Score-weighted scatter-add evaluated eagerly; one `K_f × D` tensor per
/// frame.
pub fn merge_scatter_add<T: Scalar>(
    features: &[Tensor<T>],
    scores: &SaliencyMap<T>,
    plan: &RoutingPlan,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let d = features.first().map_or(0, |f| f.cols());
    let mut stacked = Vec::new();
    for f in features {
        stacked.extend_from_slice(f.data());
    }
    let fv = g.constant(Tensor::new(vec![stacked.len() / d.max(1), d], stacked)?);
    let sv = g.constant(Tensor::new(vec![scores.num_frames() * scores.patches()], scores.flat())?);
    let out = merge_on_graph(&mut g, fv, sv, plan)?;
    let t = g.value(out);
    let mut frames = Vec::with_capacity(plan.frames.len());
    let mut row = 0;
    for fp in &plan.frames {
        let idx: Vec<usize> = (row..row + fp.keep.len()).collect();
        frames.push(t.select_rows(&idx));
        row += fp.keep.len();
    }
    Ok(frames)
}

/// Plan and merge in one step.
pub fn route<T: Scalar>(
    features: &[Tensor<T>],
    scores: &SaliencyMap<T>,
    r: f64,
    gamma: f64,
    mode: RouteMode,
) -> Result<(RoutingPlan, Vec<Tensor<T>>)> {
    let plan = plan_routes(features, scores, r, gamma, mode)?;
    let merged = merge_scatter_add(features, scores, &plan)?;
    Ok((plan, merged))
}
