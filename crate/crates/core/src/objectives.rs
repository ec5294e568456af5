//! Prediction heads and training losses.
//!
//! A camera head maps each frame's camera-token output to an 8-value camera
//! vector; a dense head maps each restored patch token to depth, a 3-D point
//! and two log-uncertainties. The heads stand in for pretrained decoders: they
//! are fitted once to the unpruned backbone and then frozen.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::scenes::ClipSample;
use crate::scorer::distill_loss;
use crate::tensor::Tensor;

/// Values per camera vector.
pub const CAMERA_DIM: usize = 8;
/// Dense head outputs per patch: depth, point (3), log Σ^D, log Σ^P.
pub const DENSE_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub distill: f64,
    pub restore: f64,
    pub task: f64,
    pub beta_unc: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            distill: 1.0,
            restore: 1.0,
            task: 0.1,
            beta_unc: 0.1,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_unc > 0.0) || !(self.huber_delta > 0.0) {
            return Err(Error::invalid("beta_unc and huber_delta must be positive"));
        }
        if [self.distill, self.restore, self.task].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Ground truth of one clip stacked for the losses.
#[derive(Clone, Debug)]
pub struct TaskTargets<T> {
    /// `[N, 8]`
    pub camera: Tensor<T>,
    /// `[N, h, w, 1]`
    pub depth: Tensor<T>,
    /// `[N, h, w, 3]`
    pub points: Tensor<T>,
}

impl<T: Scalar> TaskTargets<T> {
    pub fn from_clip(clip: &ClipSample) -> Result<Self> {
        let n = clip.num_frames();
        let (h, w) = (clip.h, clip.w);
        let mut cam = Vec::with_capacity(n * CAMERA_DIM);
        let mut depth = Vec::with_capacity(n * h * w);
        let mut points = Vec::with_capacity(n * h * w * 3);
        for f in &clip.frames {
            cam.extend(f.camera.0.iter().map(|&v| lit::<T>(v)));
            depth.extend(f.depth.data().iter().map(|&v| lit::<T>(v)));
            points.extend(f.points.data().iter().map(|&v| lit::<T>(v)));
        }
        Ok(TaskTargets {
            camera: Tensor::new(vec![n, CAMERA_DIM], cam)?,
            depth: Tensor::new(vec![n, h, w, 1], depth)?,
            points: Tensor::new(vec![n, h, w, 3], points)?,
        })
    }
}

/// Graph nodes produced by [`Heads::apply`].
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[N, 8]`
    pub camera: Var,
    /// `[N, h, w, 1]`
    pub depth: Var,
    /// `[N, h, w, 3]`
    pub points: Var,
    /// `[N, h, w, 1]`, positive.
    pub sigma_depth: Var,
    /// `[N, h, w, 1]`, positive.
    pub sigma_points: Var,
}

/// Frozen linear camera and dense heads.
#[derive(Clone, Debug)]
pub struct Heads<T> {
    pub params: ParamStore<T>,
}

impl<T: Scalar> Heads<T> {
    /// Random camera/depth/point weights; uncertainty outputs start at
    /// `Σ = 1`.
    pub fn new(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164_73);
        let std = 1.0 / (d_model as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut p = ParamStore::new();
        let cam: Vec<T> = (0..d_model * CAMERA_DIM).map(|_| lit(dist.sample(&mut rng))).collect();
        p.insert("cam.w", Tensor::new(vec![d_model, CAMERA_DIM], cam).expect("shape"));
        p.insert("cam.b", Tensor::zeros(&[CAMERA_DIM]));
        let mut dense = Tensor::zeros(&[d_model, DENSE_DIM]);
        for r in 0..d_model {
            for c in 0..4 {
                dense.row_mut(r)[c] = lit(dist.sample(&mut rng));
            }
        }
        p.insert("dense.w", dense);
        p.insert("dense.b", Tensor::zeros(&[DENSE_DIM]));
        Heads { params: p }
    }

    pub fn d_model(&self) -> usize {
        self.params.get("cam.w").map(|t| t.rows()).unwrap_or(0)
    }

    /// Apply both heads. `camera_tokens: [N, D′]`; `dense: [N·h·w, D′]`.
    pub fn apply(
        &self,
        g: &mut Graph<T>,
        pv: &BTreeMap<String, Var>,
        camera_tokens: Var,
        dense: Var,
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<HeadOutputs> {
        let get = |k: &str| pv.get(k).copied().ok_or_else(|| Error::invalid(format!("missing head parameter {k}")));
        let c = g.matmul(camera_tokens, get("cam.w")?)?;
        let camera = g.add_row(c, get("cam.b")?)?;
        let d = g.matmul(dense, get("dense.w")?)?;
        let d = g.add_row(d, get("dense.b")?)?;
        let grid = |g: &mut Graph<T>, v: Var, c: usize| g.reshape(v, &[n, h, w, c]);
        let depth = g.slice_cols(d, 0, 1)?;
        let depth = grid(g, depth, 1)?;
        let points = g.slice_cols(d, 1, 3)?;
        let points = grid(g, points, 3)?;
        let sd = g.slice_cols(d, 4, 1)?;
        let sd = g.exp(sd)?;
        let sigma_depth = grid(g, sd, 1)?;
        let sp = g.slice_cols(d, 5, 1)?;
        let sp = g.exp(sp)?;
        let sigma_points = grid(g, sp, 1)?;
        Ok(HeadOutputs {
            camera,
            depth,
            points,
            sigma_depth,
            sigma_points,
        })
    }

    /// Fit camera, depth and point weights to ground truth by least squares
    /// on unpruned backbone outputs. Each example is
    /// `(camera tokens [N, D′], dense tokens [N·P, D′], targets)`.
    /// Uncertainty outputs are left untouched.
    pub fn calibrate(&mut self, examples: &[(Tensor<T>, Tensor<T>, TaskTargets<T>)], steps: usize, lr: f64) -> Result<()> {
        let mut trainable = ParamStore::new();
        for k in ["cam.w", "cam.b", "dense.w", "dense.b"] {
            trainable.insert(k, self.params.get(k)?.clone());
        }
        let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
        for step in 0..steps {
            let (cam_tok, dense_tok, tgt) = &examples[step % examples.len()];
            let mut g = Graph::new();
            let pv = trainable.bind_trainable(&mut g);
            let ct = g.constant(cam_tok.clone());
            let dt = g.constant(dense_tok.clone());
            let c = g.matmul(ct, pv["cam.w"])?;
            let c = g.add_row(c, pv["cam.b"])?;
            let d = g.matmul(dt, pv["dense.w"])?;
            let d = g.add_row(d, pv["dense.b"])?;
            let d = g.slice_cols(d, 0, 4)?;
            let mut want = Vec::with_capacity(tgt.depth.len() * 4);
            for (z, p) in tgt.depth.data().iter().zip(tgt.points.data().chunks(3)) {
                want.push(*z);
                want.extend_from_slice(p);
            }
            let want = Tensor::new(vec![tgt.depth.len(), 4], want)?;
            let lc = mse(&mut g, c, &tgt.camera)?;
            let ld = mse(&mut g, d, &want)?;
            let loss = g.add(lc, ld)?;
            let grads = g.backward(loss)?;
            // uncertainty columns stay fixed
            let mut grads = grads;
            if let Some(t) = grads.map.get_mut("dense.w") {
                for r in 0..t.rows() {
                    t.row_mut(r)[4] = T::zero();
                    t.row_mut(r)[5] = T::zero();
                }
            }
            if let Some(t) = grads.map.get_mut("dense.b") {
                t.data_mut()[4] = T::zero();
                t.data_mut()[5] = T::zero();
            }
            adam.step(&mut trainable, &grads);
        }
        for (k, t) in trainable.iter() {
            self.params.insert(k.clone(), t.clone());
        }
        Ok(())
    }

    pub fn to_store(&self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.extend_prefixed("heads.", &self.params);
        s
    }

    pub fn from_store(store: &ParamStore<T>) -> Result<Self> {
        let params = store.strip_prefix("heads.");
        for k in ["cam.w", "cam.b", "dense.w", "dense.b"] {
            params.get(k).map_err(|_| Error::Checkpoint(format!("missing head tensor {k}")))?;
        }
        Ok(Heads { params })
    }
}

/// Mean squared error against a constant target.
pub fn mse<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if g.value(pred).len() != target.len() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", g.shape(pred), target.shape())));
    }
    let t = g.constant(target.clone().reshape(g.shape(pred))?);
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// `MSE(G_dense, G_full)`.
pub fn restore_loss<T: Scalar>(g: &mut Graph<T>, dense: Var, full: &Tensor<T>) -> Result<Var> {
    mse(g, dense, full)
}

/// Elementwise Huber penalty of `pred − gt` summed over all frames.
pub fn camera_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>, delta: f64) -> Result<Var> {
    if g.shape(pred) != gt.shape() {
        return Err(Error::shape("camera_loss", format!("{:?} vs {:?}", g.shape(pred), gt.shape())));
    }
    let t = g.constant(gt.clone());
    let d = g.sub(pred, t)?;
    let hub = g.huber(d, lit(delta))?;
    g.sum(hub)
}

/// Horizontal and vertical forward differences of an `[h, w]` or `[h, w, c]`
/// field; the last column (row) of the horizontal (vertical) part is zero.
pub fn spatial_gradient<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    let (h, w, c) = match s.len() {
        2 => (s[0], s[1], 1),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::shape("spatial_gradient", format!("{:?}", s))),
    };
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("grid {h}x{w} too small for a gradient")));
    }
    let mut g = Graph::new();
    let v = g.constant(x.clone().reshape(&[1, h, w, c])?);
    let gx = g.forward_diff(v, true)?;
    let gy = g.forward_diff(v, false)?;
    Ok((g.value(gx).clone().reshape(s)?, g.value(gy).clone().reshape(s)?))
}

/// Confidence-weighted value + gradient L1 loss with log-uncertainty
/// regulariser over `[N, h, w, c]` maps; `sigma` is `[N, h, w, 1]` and is
/// broadcast across channels.
pub fn dense_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, sigma: Var, gt: &Tensor<T>, beta_unc: f64) -> Result<Var> {
    let ps = g.shape(pred).to_vec();
    if ps.len() != 4 || ps.as_slice() != gt.shape() {
        return Err(Error::shape("dense_loss", format!("{:?} vs {:?}", ps, gt.shape())));
    }
    let (n, h, w, c) = (ps[0], ps[1], ps[2], ps[3]);
    if g.shape(sigma) != [n, h, w, 1] {
        return Err(Error::shape("dense_loss", format!("uncertainty {:?}", g.shape(sigma))));
    }
    if g.value(sigma).data().iter().any(|&s| !(s > T::zero())) {
        return Err(Error::invalid("uncertainty must be strictly positive"));
    }
    let t = g.constant(gt.clone());
    let err = g.sub(pred, t)?;
    let flat_sigma = g.reshape(sigma, &[n * h * w, 1])?;
    let ones = g.constant(Tensor::full(&[1, c], T::one()));
    let wide = g.matmul(flat_sigma, ones)?;
    let wide = g.reshape(wide, &[n, h, w, c])?;
    let mut terms = Vec::with_capacity(3);
    let ex = g.forward_diff(err, true)?;
    let ey = g.forward_diff(err, false)?;
    for e in [err, ex, ey] {
        let weighted = g.mul(wide, e)?;
        let a = g.abs(weighted)?;
        terms.push(g.sum(a)?);
    }
    let ls = g.log(sigma)?;
    let ls = g.sum(ls)?;
    let reg = g.scale(ls, lit(-beta_unc))?;
    let a = g.add(terms[0], terms[1])?;
    let b = g.add(a, terms[2])?;
    g.add(b, reg)
}

/// Depth loss on `[N, h, w, 1]` maps.
pub fn depth_loss<T: Scalar>(g: &mut Graph<T>, out: &HeadOutputs, gt: &TaskTargets<T>, beta_unc: f64) -> Result<Var> {
    dense_loss(g, out.depth, out.sigma_depth, &gt.depth, beta_unc)
}

/// Point-map loss on `[N, h, w, 3]` maps.
pub fn pmap_loss<T: Scalar>(g: &mut Graph<T>, out: &HeadOutputs, gt: &TaskTargets<T>, beta_unc: f64) -> Result<Var> {
    dense_loss(g, out.points, out.sigma_points, &gt.points, beta_unc)
}

/// Stage 1 objective: the distillation BCE.
pub fn stage1_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, target: &Tensor<T>) -> Result<Var> {
    distill_loss(g, scores, target)
}

/// Per-term values of a stage-2 objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub distill: f64,
    pub restore: f64,
    pub camera: f64,
    pub depth: f64,
    pub pmap: f64,
}

/// Inputs to [`stage2_loss`]. `heads` is `None` when task terms are off.
pub struct Stage2Inputs<'a, T> {
    pub scores: Var,
    pub target: &'a Tensor<T>,
    /// `[N·P, D′]`
    pub dense: Var,
    /// `[N·P, D′]`
    pub full: &'a Tensor<T>,
    pub heads: Option<(HeadOutputs, &'a TaskTargets<T>)>,
}

/// `λ_d·L_distill + λ_r·L_restore + λ_t·(L_camera + L_depth + L_pmap)`.
/// Task terms are left out of the graph entirely when `λ_t = 0` or no heads
/// are given.
pub fn stage2_loss<T: Scalar>(g: &mut Graph<T>, inp: Stage2Inputs<'_, T>, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let mut bd = LossBreakdown::default();
    let ld = distill_loss(g, inp.scores, inp.target)?;
    let lr = restore_loss(g, inp.dense, inp.full)?;
    bd.distill = g.value(ld).item().to_f64_exact();
    bd.restore = g.value(lr).item().to_f64_exact();
    let a = g.scale(ld, lit(w.distill))?;
    let b = g.scale(lr, lit(w.restore))?;
    let mut total = g.add(a, b)?;
    if let (true, Some((out, gt))) = (w.task > 0.0, inp.heads) {
        let lc = camera_loss(g, out.camera, &gt.camera, w.huber_delta)?;
        let lz = depth_loss(g, &out, gt, w.beta_unc)?;
        let lp = pmap_loss(g, &out, gt, w.beta_unc)?;
        bd.camera = g.value(lc).item().to_f64_exact();
        bd.depth = g.value(lz).item().to_f64_exact();
        bd.pmap = g.value(lp).item().to_f64_exact();
        let s = g.add(lc, lz)?;
        let s = g.add(s, lp)?;
        let s = g.scale(s, lit(w.task))?;
        total = g.add(total, s)?;
    }
    bd.total = g.value(total).item().to_f64_exact();
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(f: impl Fn(&mut Graph<f64>) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn huber_branches() {
        let gt = Tensor::zeros(&[1, 1]);
        let quad = scalar_loss(|g| {
            let p = g.constant(Tensor::full(&[1, 1], 0.5));
            camera_loss(g, p, &gt, 1.0)
        });
        assert!((quad - 0.125).abs() < 1e-15);
        let lin = scalar_loss(|g| {
            let p = g.constant(Tensor::full(&[1, 1], 2.0));
            camera_loss(g, p, &gt, 1.0)
        });
        assert!((lin - 1.5).abs() < 1e-15);
        let same = scalar_loss(|g| {
            let p = g.constant(gt.clone());
            camera_loss(g, p, &gt, 1.0)
        });
        assert_eq!(same, 0.0);
    }

    #[test]
    fn gradient_of_ramp_and_constant() {
        let ramp = Tensor::<f64>::new(vec![3, 4], (0..12).map(|i| (i % 4) as f64).collect()).unwrap();
        let (gx, gy) = spatial_gradient(&ramp).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(gx.at(&[r, c]), 1.0);
            }
            assert_eq!(gx.at(&[r, 3]), 0.0);
        }
        assert!(gy.data().iter().all(|&v| v == 0.0));
        let flat = Tensor::<f64>::full(&[2, 2, 3], 4.0);
        let (gx, gy) = spatial_gradient(&flat).unwrap();
        assert_eq!(gx.max_abs() + gy.max_abs(), 0.0);
        assert!(spatial_gradient(&Tensor::<f64>::zeros(&[1, 4])).is_err());
    }

    fn depth_case(err_at: usize, sigma: f64) -> f64 {
        let gt = Tensor::zeros(&[1, 2, 2, 1]);
        let mut pred = Tensor::zeros(&[1, 2, 2, 1]);
        pred.data_mut()[err_at] = 1.0;
        scalar_loss(|g| {
            let p = g.constant(pred.clone());
            let s = g.constant(Tensor::full(&[1, 2, 2, 1], sigma));
            dense_loss(g, p, s, &gt, 0.1)
        })
    }

    #[test]
    fn depth_hand_expansion() {
        // value 1, one horizontal and one vertical difference of magnitude 1
        assert!((depth_case(0, 1.0) - 3.0).abs() < 1e-15);
        assert!((depth_case(3, 1.0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_with_unit_sigma_is_zero() {
        let gt = Tensor::full(&[2, 2, 3, 3], 0.7);
        let v = scalar_loss(|g| {
            let p = g.constant(gt.clone());
            let s = g.constant(Tensor::full(&[2, 2, 3, 1], 1.0));
            dense_loss(g, p, s, &gt, 0.1)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn larger_sigma_on_exact_pixels_lowers_loss() {
        let gt = Tensor::zeros(&[1, 2, 2, 1]);
        let at = |s: f64| {
            scalar_loss(|g| {
                let p = g.constant(gt.clone());
                let mut sig = Tensor::full(&[1, 2, 2, 1], 1.0);
                sig.data_mut()[2] = s;
                let s = g.constant(sig);
                dense_loss(g, p, s, &gt, 0.1)
            })
        };
        assert!((at(2.0) - at(1.0) + 0.1 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let gt = Tensor::<f64>::zeros(&[1, 2, 2, 1]);
        let mut g = Graph::new();
        let p = g.constant(gt.clone());
        let s = g.constant(Tensor::zeros(&[1, 2, 2, 1]));
        assert!(dense_loss(&mut g, p, s, &gt, 0.1).is_err());
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { beta_unc: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { task: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn stage2_zero_at_perfect_fit() {
        let mut g = Graph::new();
        let target = Tensor::new(vec![4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let s = g.constant(target.clone());
        let full = Tensor::full(&[4, 3], 0.2);
        let dense = g.constant(full.clone());
        let (_, bd) = stage2_loss(
            &mut g,
            Stage2Inputs {
                scores: s,
                target: &target,
                dense,
                full: &full,
                heads: None,
            },
            &LossWeights::default(),
        )
        .unwrap();
        assert!(bd.total < 1e-6);
        assert_eq!(bd.restore, 0.0);
    }
}
