//! Dense-grid restoration from the backbone outputs of kept tokens.
//!
//! Per frame, one multi-head cross-attention layer: queries come from the
//! full-resolution encoder features, keys from the kept tokens' encoder
//! features and values from their backbone outputs, followed by an output
//! projection to the backbone width. Two parameter-free baselines place the
//! kept outputs on the grid and either leave the gaps at zero or fill them by
//! inverse-distance weighting over the nearest kept positions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::AttnKind;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Scale of the tied query/key projections at initialisation.
pub const QK_INIT_GAIN: f64 = 2.0;

/// Number of nearest kept positions blended by the interpolating baseline.
pub const IDW_NEIGHBOURS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestoreMode {
    CrossAttn,
    ZeroFill,
    Bilinear,
}

impl RestoreMode {
    pub const ALL: [RestoreMode; 3] = [RestoreMode::CrossAttn, RestoreMode::ZeroFill, RestoreMode::Bilinear];

    pub fn as_str(self) -> &'static str {
        match self {
            RestoreMode::CrossAttn => "cross-attn",
            RestoreMode::ZeroFill => "zero-fill",
            RestoreMode::Bilinear => "bilinear",
        }
    }
}

impl fmt::Display for RestoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RestoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RestoreMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown restoration mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorerConfig {
    /// Encoder feature width `D`.
    pub d_in: usize,
    /// Backbone width `D′`.
    pub d_model: usize,
    /// Shared attention width `d`.
    pub d_attn: usize,
    pub heads: usize,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        RestorerConfig {
            d_in: 32,
            d_model: 48,
            d_attn: 32,
            heads: 4,
        }
    }
}

impl RestorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_attn % self.heads != 0 {
            return Err(Error::invalid(format!(
                "attention width {} not divisible by {} heads",
                self.d_attn, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Restorer<T> {
    pub cfg: RestorerConfig,
    pub params: ParamStore<T>,
}

/// `rows × cols` matrix whose columns (or rows, if wider than tall) are
/// orthonormal, by Gram-Schmidt on a Gaussian draw.
fn semi_orthogonal<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let (n, m) = (rows.max(cols), rows.min(cols));
    let d = Normal::new(0.0, 1.0).expect("positive std");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| d.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            if rows >= cols {
                out.set(&[i, j], lit(x));
            } else {
                out.set(&[j, i], lit(x));
            }
        }
    }
    out
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| lit(d.sample(rng))).collect()).expect("shape")
}

/// `[P, K]` matrix mapping kept outputs onto the full grid for the
/// parameter-free variants. `keep` holds ascending flat indices on an
/// `h × w` grid.
pub fn placement_matrix<T: Scalar>(mode: RestoreMode, h: usize, w: usize, keep: &[usize]) -> Result<Tensor<T>> {
    let p = h * w;
    if keep.is_empty() || keep.iter().any(|&k| k >= p) || keep.windows(2).any(|x| x[0] >= x[1]) {
        return Err(Error::invalid("keep indices must be non-empty, ascending and on the grid"));
    }
    let mut m = Tensor::zeros(&[p, keep.len()]);
    match mode {
        RestoreMode::CrossAttn => return Err(Error::invalid("cross-attention has no fixed placement")),
        RestoreMode::ZeroFill => {
            for (j, &k) in keep.iter().enumerate() {
                m.row_mut(k)[j] = T::one();
            }
        }
        RestoreMode::Bilinear => {
            for i in 0..p {
                let (ri, ci) = ((i / w) as f64, (i % w) as f64);
                let mut near: Vec<(f64, usize)> = keep
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| {
                        let (rk, ck) = ((k / w) as f64, (k % w) as f64);
                        (((ri - rk).powi(2) + (ci - ck).powi(2)).sqrt(), j)
                    })
                    .collect();
                near.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
                if near[0].0 == 0.0 {
                    m.row_mut(i)[near[0].1] = T::one();
                    continue;
                }
                near.truncate(IDW_NEIGHBOURS);
                let total: f64 = near.iter().map(|(d, _)| 1.0 / d).sum();
                for (d, j) in near {
                    m.row_mut(i)[j] = lit(1.0 / d / total);
                }
            }
        }
    }
    Ok(m)
}

impl<T: Scalar> Restorer<T> {
    pub fn new(cfg: RestorerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_7374_6f72);
        let (d, dm, da) = (cfg.d_in, cfg.d_model, cfg.d_attn);
        let mut p = ParamStore::new();
        // Queries and keys start tied so that attention follows feature
        // similarity; value and output projections start as a transposed
        // pair, passing kept outputs through a subspace unchanged.
        let qk: Tensor<T> = normal(&mut rng, &[d, da], QK_INIT_GAIN / (d as f64).sqrt());
        p.insert("q.w", qk.clone());
        p.insert("q.b", Tensor::zeros(&[da]));
        p.insert("k.w", qk);
        p.insert("k.b", Tensor::zeros(&[da]));
        let v: Tensor<T> = semi_orthogonal(&mut rng, dm, da);
        p.insert("o.w", v.transpose2());
        p.insert("v.w", v);
        p.insert("v.b", Tensor::zeros(&[da]));
        p.insert("o.b", Tensor::zeros(&[dm]));
        Ok(Restorer { cfg, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Cross-attention restoration of one frame on a graph.
    ///
    /// `f_full: [P, D]`, `f_keep: [K, D]`, `g_keep: [K, D′]`; returns
    /// `[P, D′]`. With `capture`, each head's `P × K` weights are recorded.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pv: &BTreeMap<String, Var>,
        f_full: Var,
        f_keep: Var,
        g_keep: Var,
        capture: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let c = &self.cfg;
        if g.value(f_full).cols() != c.d_in || g.value(f_keep).cols() != c.d_in || g.value(g_keep).cols() != c.d_model {
            return Err(Error::shape("restore_dense", "feature widths do not match the restorer"));
        }
        if g.value(f_keep).rows() != g.value(g_keep).rows() {
            return Err(Error::shape("restore_dense", "keys and values disagree on the kept count"));
        }
        let get = |k: &str| pv.get(k).copied().ok_or_else(|| Error::invalid(format!("missing restorer parameter {k}")));
        let q = g.matmul(f_full, get("q.w")?)?;
        let q = g.add_row(q, get("q.b")?)?;
        let k = g.matmul(f_keep, get("k.w")?)?;
        let k = g.add_row(k, get("k.b")?)?;
        let v = g.matmul(g_keep, get("v.w")?)?;
        let v = g.add_row(v, get("v.b")?)?;
        let scale: T = lit(1.0 / ((c.d_attn / c.heads) as f64).sqrt());
        let a = g.attention(q, k, v, c.heads, scale, AttnKind::Restoration, capture)?;
        let o = g.matmul(a, get("o.w")?)?;
        g.add_row(o, get("o.b")?)
    }

    /// Restore one frame with any variant. `f_full` is the frame's `[P, D]`
    /// encoder grid (`h × w`), `keep` its ascending kept indices and `g_keep`
    /// their `[K, D′]` backbone outputs.
    #[allow(clippy::too_many_arguments)]
    pub fn restore_on_graph(
        &self,
        g: &mut Graph<T>,
        pv: &BTreeMap<String, Var>,
        mode: RestoreMode,
        h: usize,
        w: usize,
        keep: &[usize],
        f_full: Var,
        g_keep: Var,
    ) -> Result<Var> {
        if g.value(f_full).rows() != h * w || g.value(g_keep).rows() != keep.len() {
            return Err(Error::shape("restore", "grid, keep set and kept outputs disagree"));
        }
        match mode {
            RestoreMode::CrossAttn => {
                let f_keep = g.gather_rows(f_full, keep)?;
                self.forward(g, pv, f_full, f_keep, g_keep, None)
            }
            _ => {
                let m = g.constant(placement_matrix(mode, h, w, keep)?);
                g.matmul(m, g_keep)
            }
        }
    }

    /// Eager cross-attention restoration that checks `f_keep` is exactly the
    /// `keep` rows of `f_full` in order.
    pub fn restore_dense(&self, f_full: &Tensor<T>, keep: &[usize], f_keep: &Tensor<T>, g_keep: &Tensor<T>) -> Result<Tensor<T>> {
        check_alignment(f_full, keep, f_keep)?;
        let mut g = Graph::new();
        let pv = self.params.bind_frozen(&mut g);
        let (a, b, c) = (g.constant(f_full.clone()), g.constant(f_keep.clone()), g.constant(g_keep.clone()));
        let out = self.forward(&mut g, &pv, a, b, c, None)?;
        Ok(g.value(out).clone())
    }

    /// Eager restoration with any variant.
    pub fn restore_variant(
        &self,
        mode: RestoreMode,
        h: usize,
        w: usize,
        keep: &[usize],
        f_full: &Tensor<T>,
        g_keep: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pv = self.params.bind_frozen(&mut g);
        let (a, b) = (g.constant(f_full.clone()), g.constant(g_keep.clone()));
        let out = self.restore_on_graph(&mut g, &pv, mode, h, w, keep, a, b)?;
        Ok(g.value(out).clone())
    }

    /// Per-head `P × K` cross-attention weights for one frame.
    pub fn attention_weights(&self, f_full: &Tensor<T>, f_keep: &Tensor<T>, g_keep: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let pv = self.params.bind_frozen(&mut g);
        let (a, b, c) = (g.constant(f_full.clone()), g.constant(f_keep.clone()), g.constant(g_keep.clone()));
        let mut cap = Vec::new();
        self.forward(&mut g, &pv, a, b, c, Some(&mut cap))?;
        Ok(cap)
    }

    pub fn to_store(&self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.extend_prefixed("restorer.", &self.params);
        s
    }

    pub fn from_store(cfg: RestorerConfig, store: &ParamStore<T>) -> Result<Self> {
        let fresh = Restorer::<T>::new(cfg.clone(), 0)?;
        let params = store.strip_prefix("restorer.");
        for (k, t) in fresh.params.iter() {
            let have = params
                .get(k)
                .map_err(|_| Error::Checkpoint(format!("missing restorer tensor {k}")))?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("restorer tensor {k} has shape {:?}", have.shape())));
            }
        }
        Ok(Restorer { cfg, params })
    }
}

fn check_alignment<T: Scalar>(f_full: &Tensor<T>, keep: &[usize], f_keep: &Tensor<T>) -> Result<()> {
    if keep.windows(2).any(|x| x[0] >= x[1]) || keep.iter().any(|&k| k >= f_full.rows()) {
        return Err(Error::invalid("keep indices must be ascending and within the grid"));
    }
    if f_keep.rows() != keep.len() || keep.iter().enumerate().any(|(j, &k)| f_keep.row(j) != f_full.row(k)) {
        return Err(Error::invalid("kept features are not the keep rows of the full grid in plan order"));
    }
    Ok(())
}
