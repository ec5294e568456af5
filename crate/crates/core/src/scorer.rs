//! Lightweight per-token importance predictor.
//!
//! `1×1 conv → BN → GELU → depthwise 3×3 → BN → GELU → 1×1 conv → sigmoid`
//! over the encoder feature grid of every frame. Batch statistics are taken
//! over all patches of the clip in train mode; eval mode uses running
//! averages.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::TokenGrid;
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, NormMode, Var};
use crate::params::ParamStore;
use crate::saliency::{SaliencyMap, SaliencyRole};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Probability clamp used inside the distillation BCE.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    /// Input feature width `D`.
    pub d_in: usize,
    /// Hidden width `D_h`.
    pub hidden: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            d_in: 32,
            hidden: 64,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scorer<T> {
    pub cfg: ScorerConfig,
    /// Trainable weights, names without prefix.
    pub params: ParamStore<T>,
    /// Running batch-norm statistics: `bn1.mean`, `bn1.var`, `bn2.mean`, `bn2.var`.
    pub buffers: ParamStore<T>,
}

/// Result of a graph-level scorer pass.
pub struct ScorerForward<T> {
    /// `[N·P]` scores in `(frame, flat index)` order.
    pub scores: Var,
    /// Batch statistics of both norms in train mode.
    pub stats: Option<[BatchStats<T>; 2]>,
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| lit(d.sample(rng))).collect()).expect("shape")
}

impl<T: Scalar> Scorer<T> {
    pub fn new(cfg: ScorerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7363_6f72_6572);
        let (d, h) = (cfg.d_in, cfg.hidden);
        let mut p = ParamStore::new();
        p.insert("in.w", normal(&mut rng, &[d, h], (2.0 / d as f64).sqrt()));
        p.insert("in.b", Tensor::zeros(&[h]));
        p.insert("bn1.g", Tensor::full(&[h], T::one()));
        p.insert("bn1.b", Tensor::zeros(&[h]));
        p.insert("dw.w", normal(&mut rng, &[h, 9], (2.0 / 9.0f64).sqrt()));
        p.insert("dw.b", Tensor::zeros(&[h]));
        p.insert("bn2.g", Tensor::full(&[h], T::one()));
        p.insert("bn2.b", Tensor::zeros(&[h]));
        p.insert("out.w", normal(&mut rng, &[h, 1], (1.0 / h as f64).sqrt()));
        p.insert("out.b", Tensor::zeros(&[1]));
        let mut b = ParamStore::new();
        for bn in ["bn1", "bn2"] {
            b.insert(format!("{bn}.mean"), Tensor::zeros(&[h]));
            b.insert(format!("{bn}.var"), Tensor::full(&[h], T::one()));
        }
        Scorer {
            cfg,
            params: p,
            buffers: b,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Score stacked grids `x` of shape `[N, h, w, D]` using parameter nodes
    /// `pv` (keys as in [`Scorer::params`]).
    pub fn forward(&self, g: &mut Graph<T>, pv: &BTreeMap<String, Var>, x: Var, mode: NormMode) -> Result<ScorerForward<T>> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.d_in {
            return Err(Error::shape(
                "score_tokens",
                format!("input {:?} but scorer expects [N, h, w, {}]", shape, self.cfg.d_in),
            ));
        }
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let hid = self.cfg.hidden;
        let eps: T = lit(self.cfg.bn_eps);
        let get = |k: &str| pv.get(k).copied().ok_or_else(|| Error::invalid(format!("missing scorer parameter {k}")));
        let running = |bn: &str| -> Result<(&[T], &[T])> {
            Ok((
                self.buffers.get(&format!("{bn}.mean"))?.data(),
                self.buffers.get(&format!("{bn}.var"))?.data(),
            ))
        };
        let rows = g.reshape(x, &[n * h * w, self.cfg.d_in])?;
        let y = g.matmul(rows, get("in.w")?)?;
        let y = g.add_row(y, get("in.b")?)?;
        let (y, s1) = g.batch_norm(y, get("bn1.g")?, get("bn1.b")?, mode, Some(running("bn1")?), eps)?;
        let y = g.gelu(y)?;
        let y = g.reshape(y, &[n, h, w, hid])?;
        let y = g.depthwise_conv3x3(y, get("dw.w")?, get("dw.b")?)?;
        let y = g.reshape(y, &[n * h * w, hid])?;
        let (y, s2) = g.batch_norm(y, get("bn2.g")?, get("bn2.b")?, mode, Some(running("bn2")?), eps)?;
        let y = g.gelu(y)?;
        let y = g.matmul(y, get("out.w")?)?;
        let y = g.add_row(y, get("out.b")?)?;
        let y = g.sigmoid(y)?;
        let scores = g.reshape(y, &[n * h * w])?;
        let stats = match (s1, s2) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        };
        Ok(ScorerForward { scores, stats })
    }

    /// Fold batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats<T>; 2]) -> Result<()> {
        let m: T = lit(self.cfg.bn_momentum);
        for (bn, s) in ["bn1", "bn2"].iter().zip(stats) {
            for (key, fresh) in [("mean", &s.mean), ("var", &s.var_unbiased)] {
                let buf = self
                    .buffers
                    .get_mut(&format!("{bn}.{key}"))
                    .ok_or_else(|| Error::invalid("missing batch-norm buffer"))?;
                for (r, &v) in buf.data_mut().iter_mut().zip(fresh.iter()) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }

    /// Stack patch features of every grid as `[N, h, w, D]`.
    pub fn stack_grids(grids: &[TokenGrid<T>]) -> Result<Tensor<T>> {
        let first = grids.first().ok_or_else(|| Error::invalid("no frames to score"))?;
        let mut data = Vec::with_capacity(grids.len() * first.patches.len());
        for gr in grids {
            if gr.h != first.h || gr.w != first.w || gr.patches.cols() != first.patches.cols() {
                return Err(Error::shape("stack_grids", "frames disagree on grid or width"));
            }
            data.extend_from_slice(gr.patches.data());
        }
        Tensor::new(vec![grids.len(), first.h, first.w, first.patches.cols()], data)
    }

    /// Scores as a predicted [`SaliencyMap`] without recording gradients.
    pub fn score_tokens(&self, grids: &[TokenGrid<T>], mode: NormMode) -> Result<SaliencyMap<T>> {
        let mut g = Graph::new();
        let pv = self.params.bind_frozen(&mut g);
        let x = g.constant(Self::stack_grids(grids)?);
        let out = self.forward(&mut g, &pv, x, mode)?;
        let p = grids[0].num_patches();
        let flat = g.value(out.scores).data();
        SaliencyMap::new(SaliencyRole::Predicted, flat.chunks(p).map(|c| c.to_vec()).collect())
    }

    /// Trainable weights and running statistics in one store, for checkpoints.
    pub fn to_store(&self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.extend_prefixed("scorer.", &self.params);
        s.extend_prefixed("scorer_bn.", &self.buffers);
        s
    }

    pub fn from_store(cfg: ScorerConfig, store: &ParamStore<T>) -> Result<Self> {
        let fresh = Scorer::<T>::new(cfg.clone(), 0);
        let params = store.strip_prefix("scorer.");
        let buffers = store.strip_prefix("scorer_bn.");
        for (want, got) in [(&fresh.params, &params), (&fresh.buffers, &buffers)] {
            for (k, t) in want.iter() {
                let have = got.get(k).map_err(|_| Error::Checkpoint(format!("missing scorer tensor {k}")))?;
                if have.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("scorer tensor {k} has shape {:?}", have.shape())));
                }
            }
        }
        Ok(Scorer { cfg, params, buffers })
    }
}

/// Mean binary cross-entropy of predictions `s` against soft labels `target`,
/// with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn distill_loss<T: Scalar>(g: &mut Graph<T>, s: Var, target: &Tensor<T>) -> Result<Var> {
    if g.value(s).len() != target.len() {
        return Err(Error::shape(
            "distill_loss",
            format!("{} predictions for {} targets", g.value(s).len(), target.len()),
        ));
    }
    let shape = g.shape(s).to_vec();
    let y = g.constant(target.clone().reshape(&shape)?);
    let one_minus_y = g.constant(target.map(|v| T::one() - v).reshape(&shape)?);
    let p = g.clamp(s, lit(BCE_CLAMP), lit(1.0 - BCE_CLAMP))?;
    let lp = g.log(p)?;
    let q = g.scale(p, -T::one())?;
    let q = g.add_scalar(q, T::one())?;
    let lq = g.log(q)?;
    let a = g.mul(y, lp)?;
    let b = g.mul(one_minus_y, lq)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll)?;
    g.scale(m, -T::one())
}

/// Plain-value distillation loss on two saliency maps.
pub fn distill_loss_value<T: Scalar>(s: &SaliencyMap<T>, target: &SaliencyMap<T>) -> Result<T> {
    let mut g = Graph::new();
    let sv = s.flat();
    let n = sv.len();
    let sv = g.constant(Tensor::new(vec![n], sv)?);
    let l = distill_loss(&mut g, sv, &Tensor::new(vec![target.flat().len()], target.flat())?)?;
    Ok(g.value(l).item())
}
