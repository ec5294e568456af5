//! End-to-end composition: score → route → backbone → restore → heads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, FrameInput, TokenGrid};
use crate::error::{Error, Result};
use crate::flops::FlopCounter;
use crate::graph::{Graph, NormMode, Var};
use crate::objectives::{HeadOutputs, Heads};
use crate::params::ParamStore;
use crate::restoration::{RestoreMode, Restorer, RestorerConfig};
use crate::router::{keep_count, merge_on_graph, plan_routes, RouteMode, RoutingPlan};
use crate::saliency::{saliency_target, SaliencyMap, SaliencyRole};
use crate::scalar::Scalar;
use crate::scenes::ClipSample;
use crate::scorer::{Scorer, ScorerConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub keep_ratio: f64,
    pub merge_fraction: f64,
    pub alpha: f64,
    pub route_mode: RouteMode,
    pub restore_mode: RestoreMode,
    pub scorer_hidden: usize,
    pub restore_width: usize,
    pub restore_heads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            keep_ratio: 0.40,
            merge_fraction: 0.30,
            alpha: 0.25,
            route_mode: RouteMode::ThreeWay,
            restore_mode: RestoreMode::CrossAttn,
            scorer_hidden: 64,
            restore_width: 32,
            restore_heads: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        keep_count(1, self.keep_ratio)?;
        if !(0.0..1.0).contains(&self.merge_fraction) {
            return Err(Error::invalid(format!("merge fraction {} outside [0, 1)", self.merge_fraction)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Unpruned backbone pass over a clip.
#[derive(Clone, Debug)]
pub struct FullRun<T> {
    /// `[N·P, D′]` patch outputs in `(frame, flat index)` order.
    pub dense: Tensor<T>,
    /// `[N, D′]`
    pub camera_tokens: Tensor<T>,
    pub trace: Option<crate::backbone::AttentionTrace<T>>,
    pub flops: FlopCounter,
}

/// Parameter nodes of the trainable modules on one graph.
pub struct Bindings {
    pub scorer: BTreeMap<String, Var>,
    pub restorer: BTreeMap<String, Var>,
    pub heads: BTreeMap<String, Var>,
}

pub const SCORER_PREFIX: &str = "scorer.";
pub const RESTORER_PREFIX: &str = "restorer.";
pub const HEADS_PREFIX: &str = "heads.";

/// Graph nodes of a pruned pass.
pub struct PrunedGraph {
    /// `[N·P]`
    pub scores: Var,
    pub plan: RoutingPlan,
    /// `[N·P, D′]`
    pub dense: Var,
    /// `[N, D′]`
    pub camera_tokens: Var,
    pub heads: Option<HeadOutputs>,
}

/// Result of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub scores: SaliencyMap<T>,
    pub plan: RoutingPlan,
    pub dense: Tensor<T>,
    pub camera_tokens: Tensor<T>,
    pub flops: FlopCounter,
}

#[derive(Clone, Debug)]
pub struct Pipeline<T> {
    pub cfg: PipelineConfig,
    pub backbone: Backbone<T>,
    pub scorer: Scorer<T>,
    pub restorer: Restorer<T>,
    pub heads: Heads<T>,
}

fn scores_to_map<T: Scalar>(flat: &[T], p: usize) -> Result<SaliencyMap<T>> {
    SaliencyMap::new(SaliencyRole::Predicted, flat.chunks(p).map(|c| c.to_vec()).collect())
}

impl<T: Scalar> Pipeline<T> {
    /// Backbone from `backbone_seed`, trainable modules from `seed`.
    pub fn new(bcfg: BackboneConfig, cfg: PipelineConfig, backbone_seed: u64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(bcfg.clone(), backbone_seed)?;
        let scorer = Scorer::new(
            ScorerConfig {
                d_in: bcfg.d_in,
                hidden: cfg.scorer_hidden,
                ..ScorerConfig::default()
            },
            seed,
        );
        let restorer = Restorer::new(
            RestorerConfig {
                d_in: bcfg.d_in,
                d_model: bcfg.d_model,
                d_attn: cfg.restore_width,
                heads: cfg.restore_heads,
            },
            seed,
        )?;
        let heads = Heads::new(bcfg.d_model, backbone_seed);
        Ok(Pipeline {
            cfg,
            backbone,
            scorer,
            restorer,
            heads,
        })
    }

    pub fn patches(&self) -> usize {
        self.backbone.cfg.patches()
    }

    pub fn encode(&self, clip: &ClipSample) -> Result<Vec<TokenGrid<T>>> {
        self.backbone.encode_frames(clip)
    }

    /// Trainable modules and heads in one checkpoint store.
    pub fn to_store(&self) -> ParamStore<T> {
        let mut s = self.scorer.to_store();
        for (k, v) in self.restorer.to_store().iter() {
            s.insert(k.clone(), v.clone());
        }
        for (k, v) in self.heads.to_store().iter() {
            s.insert(k.clone(), v.clone());
        }
        s
    }

    pub fn load_store(&mut self, store: &ParamStore<T>) -> Result<()> {
        self.scorer = Scorer::from_store(self.scorer.cfg.clone(), store)?;
        self.restorer = Restorer::from_store(self.restorer.cfg.clone(), store)?;
        self.heads = Heads::from_store(store)?;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, train_scorer: bool, train_restorer: bool) -> Bindings {
        Bindings {
            scorer: self.scorer.params.bind_prefixed(g, SCORER_PREFIX, train_scorer),
            restorer: self.restorer.params.bind_prefixed(g, RESTORER_PREFIX, train_restorer),
            heads: self.heads.params.bind_prefixed(g, HEADS_PREFIX, false),
        }
    }

    fn split_outputs(&self, g: &mut Graph<T>, out: &BackboneOutput<T>) -> Result<(Vec<Var>, Var)> {
        let mut patches = Vec::with_capacity(out.layout.spans.len());
        let mut cams = Vec::with_capacity(out.layout.spans.len());
        for (i, span) in out.layout.spans.iter().enumerate() {
            patches.push(g.slice_rows(out.tokens, out.layout.patch_start(i), span.patches)?);
            cams.push(g.slice_rows(out.tokens, out.layout.camera_pos(i), 1)?);
        }
        let cams = g.concat_rows(&cams)?;
        Ok((patches, cams))
    }

    /// Unpruned backbone pass; with `capture`, the global-attention trace is
    /// recorded.
    pub fn full_run(&self, grids: &[TokenGrid<T>], capture: bool) -> Result<FullRun<T>> {
        let mut g = Graph::new();
        let inputs = self.backbone.full_inputs(&mut g, grids);
        let out = self.backbone.aa_forward(&mut g, &inputs, capture)?;
        let (patches, cams) = self.split_outputs(&mut g, &out)?;
        let dense = g.concat_rows(&patches)?;
        Ok(FullRun {
            dense: g.value(dense).clone(),
            camera_tokens: g.value(cams).clone(),
            trace: out.trace,
            flops: g.flops.clone(),
        })
    }

    /// Attention-derived supervision target of a clip.
    pub fn saliency_target(&self, grids: &[TokenGrid<T>]) -> Result<SaliencyMap<T>> {
        let run = self.full_run(grids, true)?;
        saliency_target(run.trace.as_ref().expect("captured"), self.cfg.alpha)
    }

    /// Pruned pass on a graph. Scores are computed by the scorer in `mode`;
    /// the routing plan is derived from their values and treated as constant.
    pub fn pruned_on_graph(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        grids: &[TokenGrid<T>],
        mode: NormMode,
        with_heads: bool,
    ) -> Result<(PrunedGraph, Option<[crate::graph::BatchStats<T>; 2]>)> {
        let cfg = &self.cfg;
        let (n, p) = (grids.len(), self.patches());
        let (h, w) = (self.backbone.cfg.h, self.backbone.cfg.w);
        let x = g.constant(Scorer::stack_grids(grids)?);
        let sf = self.scorer.forward(g, &b.scorer, x, mode)?;
        let scores = sf.scores;
        let smap = scores_to_map(g.value(scores).data(), p)?;
        let feats: Vec<Tensor<T>> = grids.iter().map(|gr| gr.patches.clone()).collect();
        let plan = plan_routes(&feats, &smap, cfg.keep_ratio, cfg.merge_fraction, cfg.route_mode)?;
        let d = self.backbone.cfg.d_in;
        let stacked = g.reshape(x, &[n * p, d])?;
        let merged = merge_on_graph(g, stacked, scores, &plan)?;
        let mut inputs = Vec::with_capacity(n);
        let mut row = 0;
        for (fp, grid) in plan.frames.iter().zip(grids) {
            let k = fp.keep.len();
            inputs.push(FrameInput {
                frame: grid.frame,
                camera: g.constant(grid.camera.clone()),
                registers: g.constant(grid.registers.clone()),
                patches: g.slice_rows(merged, row, k)?,
                patch_ids: fp.keep.clone(),
            });
            row += k;
        }
        let out = self.backbone.aa_forward(g, &inputs, false)?;
        let (kept_out, cams) = self.split_outputs(g, &out)?;
        let mut dense_frames = Vec::with_capacity(n);
        for ((fp, grid), gk) in plan.frames.iter().zip(grids).zip(kept_out) {
            if fp.keep.len() == p {
                dense_frames.push(gk);
                continue;
            }
            let f_full = g.constant(grid.patches.clone());
            dense_frames.push(
                self.restorer
                    .restore_on_graph(g, &b.restorer, cfg.restore_mode, h, w, &fp.keep, f_full, gk)?,
            );
        }
        let dense = g.concat_rows(&dense_frames)?;
        let heads = if with_heads {
            Some(self.heads.apply(g, &b.heads, cams, dense, n, h, w)?)
        } else {
            None
        };
        Ok((
            PrunedGraph {
                scores,
                plan,
                dense,
                camera_tokens: cams,
                heads,
            },
            sf.stats,
        ))
    }

    /// Inference with frozen modules and running batch-norm statistics.
    pub fn infer(&self, grids: &[TokenGrid<T>]) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false);
        let (pg, _) = self.pruned_on_graph(&mut g, &b, grids, NormMode::Eval, false)?;
        Ok(Inference {
            scores: scores_to_map(g.value(pg.scores).data(), self.patches())?,
            plan: pg.plan,
            dense: g.value(pg.dense).clone(),
            camera_tokens: g.value(pg.camera_tokens).clone(),
            flops: g.flops.clone(),
        })
    }

    /// Comparison pass that runs the first `after_blocks` blocks on every
    /// token and drops the non-kept patches only then. No merging; the
    /// kept outputs are restored as in [`Pipeline::infer`].
    pub fn infer_cut_inside(&self, grids: &[TokenGrid<T>], after_blocks: usize) -> Result<Inference<T>> {
        let cfg = &self.cfg;
        let p = self.patches();
        let (h, w) = (self.backbone.cfg.h, self.backbone.cfg.w);
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false);
        let x = g.constant(Scorer::stack_grids(grids)?);
        let sf = self.scorer.forward(&mut g, &b.scorer, x, NormMode::Eval)?;
        let smap = scores_to_map(g.value(sf.scores).data(), p)?;
        let feats: Vec<Tensor<T>> = grids.iter().map(|gr| gr.patches.clone()).collect();
        let plan = plan_routes(&feats, &smap, cfg.keep_ratio, 0.0, RouteMode::PurePrune)?;
        let keep: Vec<Vec<usize>> = plan.frames.iter().map(|f| f.keep.clone()).collect();
        let inputs = self.backbone.full_inputs(&mut g, grids);
        let out = self.backbone.aa_forward_cut_inside(&mut g, &inputs, after_blocks, &keep)?;
        let (kept_out, cams) = self.split_outputs(&mut g, &out)?;
        let mut dense_frames = Vec::with_capacity(grids.len());
        for ((fp, grid), gk) in plan.frames.iter().zip(grids).zip(kept_out) {
            if fp.keep.len() == p {
                dense_frames.push(gk);
                continue;
            }
            let f_full = g.constant(grid.patches.clone());
            dense_frames.push(
                self.restorer
                    .restore_on_graph(&mut g, &b.restorer, cfg.restore_mode, h, w, &fp.keep, f_full, gk)?,
            );
        }
        let dense = g.concat_rows(&dense_frames)?;
        Ok(Inference {
            scores: smap,
            plan,
            dense: g.value(dense).clone(),
            camera_tokens: g.value(cams).clone(),
            flops: g.flops.clone(),
        })
    }
}
