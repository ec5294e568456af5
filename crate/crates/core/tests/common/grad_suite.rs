//! Finite-difference checks of every trainable module and loss, one seed at
//! a time. Shared by the gradient test and the acceptance run.

#![allow(dead_code)]

use std::collections::BTreeMap;

use preprune::gradcheck::{check_gradients, GradReport};
use preprune::graph::{Graph, NormMode, Var};
use preprune::objectives::*;
use preprune::params::ParamStore;
use preprune::restoration::{RestoreMode, Restorer, RestorerConfig};
use preprune::scorer::{distill_loss, Scorer, ScorerConfig};
use preprune::tensor::Tensor;
use preprune::graph::MergeGroups;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, store: &mut ParamStore<f64>, scale: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += scale * rng.gen_range(-1.0..1.0);
        }
    }
}

type Build<'a> = Box<dyn Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> preprune::Result<Var> + 'a>;

fn run(params: &ParamStore<f64>, build: Build<'_>) -> GradReport {
    check_gradients(params, build, STEP, TOL).unwrap()
}

pub fn scorer_check(seed: u64, mode: NormMode) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ScorerConfig { d_in: 5, hidden: 6, ..ScorerConfig::default() };
    let mut scorer = Scorer::<f64>::new(cfg, seed);
    jitter(&mut rng, &mut scorer.params, 0.1);
    for (name, t) in scorer.buffers.iter_mut() {
        for v in t.data_mut() {
            *v = if name.ends_with("var") { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.5..0.5) };
        }
    }
    let x = rand_tensor(&mut rng, &[2, 3, 3, 5], -1.0, 1.0);
    let target = rand_tensor(&mut rng, &[18], 0.0, 1.0);
    let params = scorer.params.clone();
    run(
        &params,
        Box::new(move |g, pv| {
            let xv = g.constant(x.clone());
            let out = scorer.forward(g, pv, xv, mode)?;
            distill_loss(g, out.scores, &target)
        }),
    )
}

pub fn restorer_check(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let r = {
        let mut r = Restorer::<f64>::new(RestorerConfig { d_in: 6, d_model: 5, d_attn: 4, heads: 2 }, seed).unwrap();
        jitter(&mut rng, &mut r.params, 0.2);
        r
    };
    let f_full = rand_tensor(&mut rng, &[9, 6], -1.0, 1.0);
    let mut keep: Vec<usize> = (0..9).filter(|_| rng.gen_bool(0.4)).collect();
    if keep.is_empty() {
        keep.push(rng.gen_range(0..9));
    }
    let g_keep = rand_tensor(&mut rng, &[keep.len(), 5], -1.0, 1.0);
    let full = rand_tensor(&mut rng, &[9, 5], -1.0, 1.0);
    let params = r.params.clone();
    run(
        &params,
        Box::new(move |g, pv| {
            let f = g.constant(f_full.clone());
            let gk = g.constant(g_keep.clone());
            let out = r.restore_on_graph(g, pv, RestoreMode::CrossAttn, 3, 3, &keep, f, gk)?;
            restore_loss(g, out, &full)
        }),
    )
}

/// Losses checked with respect to their prediction inputs.
pub fn loss_checks(seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let (n, h, w) = (2, 3, 3);
    let mut out = Vec::new();

    let mut p = ParamStore::new();
    p.insert("pred", rand_tensor(&mut rng, &[n, CAMERA_DIM], -2.0, 2.0));
    let gt = rand_tensor(&mut rng, &[n, CAMERA_DIM], -2.0, 2.0);
    out.push(("camera", run(&p, Box::new(move |g, pv| camera_loss(g, pv["pred"], &gt, 1.0)))));

    for c in [1usize, 3] {
        let mut p = ParamStore::new();
        p.insert("pred", rand_tensor(&mut rng, &[n, h, w, c], -1.0, 1.0));
        p.insert("sigma", rand_tensor(&mut rng, &[n, h, w, 1], 0.5, 2.0));
        let gt = rand_tensor(&mut rng, &[n, h, w, c], -1.0, 1.0);
        let name = if c == 1 { "depth" } else { "pmap" };
        out.push((name, run(&p, Box::new(move |g, pv| dense_loss(g, pv["pred"], pv["sigma"], &gt, 0.1)))));
    }

    let mut p = ParamStore::new();
    p.insert("dense", rand_tensor(&mut rng, &[n * h * w, 4], -1.0, 1.0));
    let full = rand_tensor(&mut rng, &[n * h * w, 4], -1.0, 1.0);
    out.push(("restore", run(&p, Box::new(move |g, pv| restore_loss(g, pv["dense"], &full)))));

    let mut p = ParamStore::new();
    p.insert("s", rand_tensor(&mut rng, &[n * h * w], 0.05, 0.95));
    let target = rand_tensor(&mut rng, &[n * h * w], 0.0, 1.0);
    out.push(("distill", run(&p, Box::new(move |g, pv| distill_loss(g, pv["s"], &target)))));

    // full stage-2 objective through the frozen heads
    let heads = {
        let mut hd = Heads::<f64>::new(4, seed);
        let t = hd.params.get_mut("dense.w").unwrap();
        for v in t.data_mut() {
            *v += 0.1 * rng.gen_range(-1.0..1.0);
        }
        hd
    };
    let mut p = ParamStore::new();
    p.insert("logits", rand_tensor(&mut rng, &[n * h * w], -2.0, 2.0));
    p.insert("dense", rand_tensor(&mut rng, &[n * h * w, 4], -1.0, 1.0));
    p.insert("cams", rand_tensor(&mut rng, &[n, 4], -1.0, 1.0));
    let target = rand_tensor(&mut rng, &[n * h * w], 0.0, 1.0);
    let full = rand_tensor(&mut rng, &[n * h * w, 4], -1.0, 1.0);
    let truth = TaskTargets {
        camera: rand_tensor(&mut rng, &[n, CAMERA_DIM], -1.0, 1.0),
        depth: rand_tensor(&mut rng, &[n, h, w, 1], 1.0, 3.0),
        points: rand_tensor(&mut rng, &[n, h, w, 3], -1.0, 1.0),
    };
    let weights = LossWeights::default();
    out.push((
        "stage2",
        run(
            &p,
            Box::new(move |g, pv| {
                let hv = heads.params.bind_frozen(g);
                let s = g.sigmoid(pv["logits"])?;
                let ho = heads.apply(g, &hv, pv["cams"], pv["dense"], n, h, w)?;
                let inp = Stage2Inputs { scores: s, target: &target, dense: pv["dense"], full: &full, heads: Some((ho, &truth)) };
                Ok(stage2_loss(g, inp, &weights)?.0)
            }),
        ),
    ));

    // score-weighted merge, through which task gradients reach the scorer
    let mut p = ParamStore::new();
    p.insert("f", rand_tensor(&mut rng, &[8, 3], -1.0, 1.0));
    p.insert("s", rand_tensor(&mut rng, &[8], 0.0, 1.0));
    let probe = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    out.push((
        "merge",
        run(
            &p,
            Box::new(move |g, pv| {
                let groups = MergeGroups { anchors: vec![0, 3, 6], members: vec![vec![1, 2], vec![], vec![4, 5, 7]] };
                let m = g.merge_scatter(pv["f"], pv["s"], groups)?;
                let c = g.constant(probe.clone());
                let prod = g.mul(m, c)?;
                g.sum(prod)
            }),
        ),
    ));
    out
}

/// Every check for one seed, labelled.
pub fn all_checks(seed: u64) -> Vec<(String, GradReport)> {
    let mut out = vec![
        ("scorer/train".to_string(), scorer_check(seed, NormMode::Train)),
        ("scorer/eval".to_string(), scorer_check(seed, NormMode::Eval)),
        ("restorer".to_string(), restorer_check(seed)),
    ];
    out.extend(loss_checks(seed).into_iter().map(|(n, r)| (n.to_string(), r)));
    out
}
