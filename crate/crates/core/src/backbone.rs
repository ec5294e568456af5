//! Frozen miniature alternating-attention backbone.
//!
//! A fixed random linear patch encoder with sinusoidal position embeddings
//! stands in for the image feature extractor. Each frame contributes one
//! camera token, `R` register tokens and its patch tokens; the backbone embeds
//! them to width `D′` and applies `L` blocks, each a frame-local attention
//! sub-block followed by a global attention sub-block over every token of the
//! clip. Parameters are drawn once from a seed and never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{AttnKind, FlopCounter};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::scenes::{ClipSample, INPUT_CHANNELS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Patch grid height.
    pub h: usize,
    /// Patch grid width.
    pub w: usize,
    /// Encoder feature width `D`.
    pub d_in: usize,
    /// Backbone width `D′`.
    pub d_model: usize,
    /// Number of alternating-attention blocks `L`.
    pub layers: usize,
    pub heads: usize,
    /// Register tokens per frame `R`.
    pub registers: usize,
    /// Hidden width of each MLP as a multiple of `D′`.
    pub mlp_ratio: usize,
    /// Multiplier on the query/key projection init; larger values sharpen
    /// attention.
    pub qk_gain: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            h: 8,
            w: 8,
            d_in: 32,
            d_model: 48,
            layers: 4,
            heads: 4,
            registers: 4,
            mlp_ratio: 4,
            qk_gain: 0.5,
        }
    }
}

impl BackboneConfig {
    pub fn patches(&self) -> usize {
        self.h * self.w
    }

    /// Camera plus register tokens per frame.
    pub fn special_tokens(&self) -> usize {
        1 + self.registers
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::invalid("patch grid must be non-empty"));
        }
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::invalid("need at least one layer and one head"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_in == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("widths must be positive"));
        }
        Ok(())
    }
}

/// One frame of encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub frame: usize,
    pub h: usize,
    pub w: usize,
    /// `[P, D]`, patch `(row, col)` at flat index `row·w + col`.
    pub patches: Tensor<T>,
    /// `[1, D]`
    pub camera: Tensor<T>,
    /// `[R, D]`
    pub registers: Tensor<T>,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn flat_index(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }

    pub fn grid_pos(&self, flat: usize) -> (usize, usize) {
        (flat / self.w, flat % self.w)
    }

    pub fn num_patches(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Camera,
    Register(usize),
    /// Flat patch index within the frame's full grid.
    Patch(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRole {
    pub frame: usize,
    pub kind: TokenKind,
}

/// Token-level input of one frame to [`Backbone::aa_forward`].
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub frame: usize,
    /// `[1, D]`
    pub camera: Var,
    /// `[R, D]`
    pub registers: Var,
    /// `[n, D]`; `n` is `P` for the full grid or the kept count after routing.
    pub patches: Var,
    /// Flat grid index of each patch row.
    pub patch_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSpan {
    pub frame: usize,
    pub start: usize,
    pub patches: usize,
}

/// Position of every token in the backbone sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub registers: usize,
    pub spans: Vec<FrameSpan>,
    pub roles: Vec<TokenRole>,
}

impl SeqLayout {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn span_len(&self, s: &FrameSpan) -> usize {
        1 + self.registers + s.patches
    }

    pub fn camera_pos(&self, span: usize) -> usize {
        self.spans[span].start
    }

    pub fn patch_start(&self, span: usize) -> usize {
        self.spans[span].start + 1 + self.registers
    }
}

/// Global-attention weights of every layer and head of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<T> {
    /// `weights[layer][head]` is a `T×T` row-stochastic matrix.
    pub weights: Vec<Vec<Tensor<T>>>,
    pub roles: Vec<TokenRole>,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn heads(&self) -> usize {
        self.weights.first().map_or(0, |l| l.len())
    }

    pub fn tokens(&self) -> usize {
        self.roles.len()
    }

    pub fn num_frames(&self) -> usize {
        self.roles.iter().map(|r| r.frame + 1).max().unwrap_or(0)
    }

    /// Sequence position of the camera token of `frame`.
    pub fn camera_of(&self, frame: usize) -> Option<usize> {
        self.roles
            .iter()
            .position(|r| r.frame == frame && r.kind == TokenKind::Camera)
    }

    /// `(sequence position, flat patch index)` of the patches of `frame`.
    pub fn patches_of(&self, frame: usize) -> Vec<(usize, usize)> {
        self.roles
            .iter()
            .enumerate()
            .filter_map(|(pos, r)| match r.kind {
                TokenKind::Patch(i) if r.frame == frame => Some((pos, i)),
                _ => None,
            })
            .collect()
    }

    /// Layer- and head-averaged weight matrix.
    pub fn averaged(&self) -> Tensor<T> {
        let n = self.tokens();
        let mut acc = Tensor::zeros(&[n, n]);
        let mut count = 0usize;
        for layer in &self.weights {
            for a in layer {
                acc.add_assign(a);
                count += 1;
            }
        }
        let c: T = lit(count.max(1) as f64);
        acc.map(|v| v / c)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens();
        for layer in &self.weights {
            if layer.len() != self.heads() {
                return Err(Error::shape("AttentionTrace", "head count differs across layers"));
            }
            for a in layer {
                if a.shape() != [n, n] {
                    return Err(Error::shape("AttentionTrace", format!("{:?} for {} tokens", a.shape(), n)));
                }
            }
        }
        Ok(())
    }
}

pub struct BackboneOutput<T> {
    /// `[T, D′]` in the layout order.
    pub tokens: Var,
    pub layout: SeqLayout,
    pub trace: Option<AttentionTrace<T>>,
}

/// The frozen backbone: encoder, special tokens and attention stack.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    pub params: ParamStore<T>,
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| lit(dist.sample(rng))).collect()).expect("shape")
}

fn const_tensor<T: Scalar>(shape: &[usize], v: f64) -> Tensor<T> {
    Tensor::full(shape, lit(v))
}

/// 2-D sinusoidal position embedding of width `d`: the first half encodes the
/// row, the second half the column.
pub fn position_embedding<T: Scalar>(h: usize, w: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut out = Tensor::zeros(&[h * w, d]);
    for r in 0..h {
        for c in 0..w {
            let row = out.row_mut(r * w + c);
            for (offset, pos, width) in [(0, r, half), (half, c, d - half)] {
                for k in 0..width {
                    let freq = 1.0 / 16f64.powf((k / 2 * 2) as f64 / width as f64);
                    let v = if k % 2 == 0 {
                        (pos as f64 * freq).sin()
                    } else {
                        (pos as f64 * freq).cos()
                    };
                    row[offset + k] = lit(v);
                }
            }
        }
    }
    out
}

/// Rows to keep and the resulting layout when only the patch ids in
/// `keep[span]` survive; special tokens always survive.
fn reduce_layout(layout: &SeqLayout, keep: &[Vec<usize>]) -> Result<(Vec<usize>, SeqLayout)> {
    let mut rows = Vec::new();
    let mut spans = Vec::with_capacity(layout.spans.len());
    let mut roles = Vec::new();
    for (si, span) in layout.spans.iter().enumerate() {
        let start = rows.len();
        let mut kept = 0;
        for pos in span.start..span.start + layout.span_len(span) {
            let role = layout.roles[pos];
            let survive = match role.kind {
                TokenKind::Patch(id) => keep[si].contains(&id),
                _ => true,
            };
            if survive {
                rows.push(pos);
                roles.push(role);
                if matches!(role.kind, TokenKind::Patch(_)) {
                    kept += 1;
                }
            }
        }
        if kept != keep[si].len() {
            return Err(Error::invalid(format!("keep set of frame {} names absent patches", span.frame)));
        }
        spans.push(FrameSpan {
            frame: span.frame,
            start,
            patches: kept,
        });
    }
    Ok((
        rows,
        SeqLayout {
            registers: layout.registers,
            spans,
            roles,
        },
    ))
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_626f_6e65);
        let mut p = ParamStore::new();
        let (d, dm) = (cfg.d_in, cfg.d_model);
        let hidden = dm * cfg.mlp_ratio;
        p.insert(
            "encoder.w",
            normal_tensor(&mut rng, &[INPUT_CHANNELS, d], 1.0 / (INPUT_CHANNELS as f64).sqrt()),
        );
        p.insert("camera.first", normal_tensor(&mut rng, &[1, d], 1.0));
        p.insert("camera.rest", normal_tensor(&mut rng, &[1, d], 1.0));
        p.insert("registers", normal_tensor(&mut rng, &[cfg.registers, d], 1.0));
        p.insert("embed.w", normal_tensor(&mut rng, &[d, dm], 1.0 / (d as f64).sqrt()));
        p.insert("embed.b", const_tensor(&[dm], 0.0));
        for l in 0..cfg.layers {
            for kind in ["frame", "global"] {
                let pre = format!("block{l}.{kind}.");
                let qk_std = cfg.qk_gain / (dm as f64).sqrt();
                let v_std = 1.0 / (dm as f64).sqrt();
                let mut qkv = normal_tensor::<T>(&mut rng, &[dm, 3 * dm], v_std);
                let ratio: T = lit(qk_std / v_std);
                for r in 0..dm {
                    for c in 0..2 * dm {
                        qkv.row_mut(r)[c] *= ratio;
                    }
                }
                p.insert(format!("{pre}ln1.g"), const_tensor(&[dm], 1.0));
                p.insert(format!("{pre}ln1.b"), const_tensor(&[dm], 0.0));
                p.insert(format!("{pre}qkv.w"), qkv);
                p.insert(format!("{pre}qkv.b"), const_tensor(&[3 * dm], 0.0));
                p.insert(format!("{pre}proj.w"), normal_tensor(&mut rng, &[dm, dm], 0.5 / (dm as f64).sqrt()));
                p.insert(format!("{pre}proj.b"), const_tensor(&[dm], 0.0));
                p.insert(format!("{pre}ln2.g"), const_tensor(&[dm], 1.0));
                p.insert(format!("{pre}ln2.b"), const_tensor(&[dm], 0.0));
                p.insert(format!("{pre}fc1.w"), normal_tensor(&mut rng, &[dm, hidden], 1.0 / (dm as f64).sqrt()));
                p.insert(format!("{pre}fc1.b"), const_tensor(&[hidden], 0.0));
                p.insert(format!("{pre}fc2.w"), normal_tensor(&mut rng, &[hidden, dm], 0.5 / (hidden as f64).sqrt()));
                p.insert(format!("{pre}fc2.b"), const_tensor(&[dm], 0.0));
            }
        }
        p.insert("out_ln.g", const_tensor(&[dm], 1.0));
        p.insert("out_ln.b", const_tensor(&[dm], 0.0));
        Ok(Backbone { cfg, params: p })
    }

    /// Parameters of the attention stack (encoder excluded).
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| !k.starts_with("encoder."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Encode every frame of `clip` into a [`TokenGrid`].
    pub fn encode_frames(&self, clip: &ClipSample) -> Result<Vec<TokenGrid<T>>> {
        if clip.h != self.cfg.h || clip.w != self.cfg.w {
            return Err(Error::shape(
                "encode_frames",
                format!(
                    "clip grid {}x{} but backbone expects {}x{}",
                    clip.h, clip.w, self.cfg.h, self.cfg.w
                ),
            ));
        }
        let enc = self.params.get("encoder.w")?;
        let pe = position_embedding::<T>(self.cfg.h, self.cfg.w, self.cfg.d_in);
        clip.frames
            .iter()
            .enumerate()
            .map(|(f, frame)| {
                let img: Tensor<T> = frame
                    .image
                    .cast::<T>()
                    .reshape(&[self.cfg.patches(), INPUT_CHANNELS])?;
                let mut patches = img.matmul(enc)?;
                patches.add_assign(&pe);
                let camera = if f == 0 {
                    self.params.get("camera.first")?
                } else {
                    self.params.get("camera.rest")?
                };
                Ok(TokenGrid {
                    frame: f,
                    h: self.cfg.h,
                    w: self.cfg.w,
                    patches,
                    camera: camera.clone(),
                    registers: self.params.get("registers")?.clone(),
                })
            })
            .collect()
    }

    /// Bind full grids as constant inputs.
    pub fn full_inputs(&self, g: &mut Graph<T>, grids: &[TokenGrid<T>]) -> Vec<FrameInput> {
        grids
            .iter()
            .map(|grid| FrameInput {
                frame: grid.frame,
                camera: g.constant(grid.camera.clone()),
                registers: g.constant(grid.registers.clone()),
                patches: g.constant(grid.patches.clone()),
                patch_ids: (0..grid.num_patches()).collect(),
            })
            .collect()
    }

    /// Run the alternating-attention stack on `frames`.
    ///
    /// Frames must carry distinct tags in increasing order below the clip
    /// length. With `capture`, the weights of every global-attention head are
    /// recorded.
    pub fn aa_forward(&self, g: &mut Graph<T>, frames: &[FrameInput], capture: bool) -> Result<BackboneOutput<T>> {
        self.forward_impl(g, frames, capture, None)
    }

    /// Run the stack on full frames and drop patch tokens only after
    /// `after_blocks` blocks, keeping the flat patch ids in `keep[i]` for the
    /// `i`-th frame. Used to compare a cut inside the stack with a cut before
    /// it.
    pub fn aa_forward_cut_inside(
        &self,
        g: &mut Graph<T>,
        frames: &[FrameInput],
        after_blocks: usize,
        keep: &[Vec<usize>],
    ) -> Result<BackboneOutput<T>> {
        if keep.len() != frames.len() || after_blocks > self.cfg.layers {
            return Err(Error::invalid("cut needs one keep set per frame and a layer inside the stack"));
        }
        self.forward_impl(g, frames, false, Some((after_blocks, keep)))
    }

    fn forward_impl(
        &self,
        g: &mut Graph<T>,
        frames: &[FrameInput],
        capture: bool,
        cut: Option<(usize, &[Vec<usize>])>,
    ) -> Result<BackboneOutput<T>> {
        let cfg = &self.cfg;
        if frames.is_empty() {
            return Err(Error::invalid("aa_forward needs at least one frame"));
        }
        for pair in frames.windows(2) {
            if pair[1].frame <= pair[0].frame {
                return Err(Error::invalid(format!(
                    "inconsistent frame tags: {} follows {}",
                    pair[1].frame, pair[0].frame
                )));
            }
        }
        let mut rows = Vec::with_capacity(frames.len() * 3);
        let mut spans = Vec::with_capacity(frames.len());
        let mut roles = Vec::new();
        let mut start = 0;
        for fi in frames {
            let n = g.value(fi.patches).rows();
            if g.value(fi.patches).cols() != cfg.d_in
                || g.shape(fi.camera) != [1, cfg.d_in]
                || g.shape(fi.registers) != [cfg.registers, cfg.d_in]
                || fi.patch_ids.len() != n
            {
                return Err(Error::shape(
                    "aa_forward",
                    format!("frame {} token shapes do not match the backbone", fi.frame),
                ));
            }
            rows.extend([fi.camera, fi.registers, fi.patches]);
            spans.push(FrameSpan {
                frame: fi.frame,
                start,
                patches: n,
            });
            roles.push(TokenRole {
                frame: fi.frame,
                kind: TokenKind::Camera,
            });
            roles.extend((0..cfg.registers).map(|r| TokenRole {
                frame: fi.frame,
                kind: TokenKind::Register(r),
            }));
            roles.extend(fi.patch_ids.iter().map(|&i| TokenRole {
                frame: fi.frame,
                kind: TokenKind::Patch(i),
            }));
            start += 1 + cfg.registers + n;
        }
        let mut layout = SeqLayout {
            registers: cfg.registers,
            spans,
            roles,
        };
        let pv = self.params.bind_frozen(g);
        let x = g.concat_rows(&rows)?;
        let x = g.matmul(x, pv["embed.w"])?;
        let mut x = g.add_row(x, pv["embed.b"])?;
        let mut trace_weights = Vec::new();
        let mut n_patch: usize = layout.spans.iter().map(|s| s.patches).sum();
        for l in 0..cfg.layers {
            if let Some((at, keep)) = cut {
                if l == at {
                    let (rows, reduced) = reduce_layout(&layout, keep)?;
                    x = g.gather_rows(x, &rows)?;
                    layout = reduced;
                    n_patch = layout.spans.iter().map(|s| s.patches).sum();
                }
            }
            x = self.sub_block(g, &pv, &format!("block{l}.frame."), x, &layout, None)?;
            let mut cap = Vec::new();
            x = self.sub_block(
                g,
                &pv,
                &format!("block{l}.global."),
                x,
                &layout,
                Some(if capture { Some(&mut cap) } else { None }),
            )?;
            g.flops.global_attention_patch +=
                FlopCounter::attention_cost(n_patch, n_patch, cfg.d_model, cfg.d_model);
            if capture {
                trace_weights.push(cap);
            }
        }
        let eps: T = lit(1e-6);
        let out = g.layer_norm(x, pv["out_ln.g"], pv["out_ln.b"], eps)?;
        let trace = capture.then(|| AttentionTrace {
            weights: trace_weights,
            roles: layout.roles.clone(),
        });
        Ok(BackboneOutput {
            tokens: out,
            layout,
            trace,
        })
    }

    /// Pre-norm attention + MLP sub-block. `global` is `None` for the
    /// frame-local variant and carries the optional capture buffer otherwise.
    fn sub_block(
        &self,
        g: &mut Graph<T>,
        pv: &std::collections::BTreeMap<String, Var>,
        pre: &str,
        x: Var,
        layout: &SeqLayout,
        global: Option<Option<&mut Vec<Tensor<T>>>>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let dm = cfg.d_model;
        let eps: T = lit(1e-6);
        let scale: T = lit(1.0 / ((dm / cfg.heads) as f64).sqrt());
        let p = |k: &str| pv[&format!("{pre}{k}")];
        let h = g.layer_norm(x, p("ln1.g"), p("ln1.b"), eps)?;
        let qkv = g.matmul(h, p("qkv.w"))?;
        let qkv = g.add_row(qkv, p("qkv.b"))?;
        let attn = match global {
            Some(capture) => {
                let q = g.slice_cols(qkv, 0, dm)?;
                let k = g.slice_cols(qkv, dm, dm)?;
                let v = g.slice_cols(qkv, 2 * dm, dm)?;
                g.attention(q, k, v, cfg.heads, scale, AttnKind::Global, capture)?
            }
            None => {
                let mut parts = Vec::with_capacity(layout.spans.len());
                for s in &layout.spans {
                    let rows = g.slice_rows(qkv, s.start, layout.span_len(s))?;
                    let q = g.slice_cols(rows, 0, dm)?;
                    let k = g.slice_cols(rows, dm, dm)?;
                    let v = g.slice_cols(rows, 2 * dm, dm)?;
                    parts.push(g.attention(q, k, v, cfg.heads, scale, AttnKind::Frame, None)?);
                }
                g.concat_rows(&parts)?
            }
        };
        let o = g.matmul(attn, p("proj.w"))?;
        let o = g.add_row(o, p("proj.b"))?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, p("ln2.g"), p("ln2.b"), eps)?;
        let h = g.matmul(h, p("fc1.w"))?;
        let h = g.add_row(h, p("fc1.b"))?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, p("fc2.w"))?;
        let h = g.add_row(h, p("fc2.b"))?;
        g.add(x, h)
    }
}
