//! Random routing draws and the oracle checks applied to them.

#![allow(dead_code)]

use super::oracles::*;
use preprune::router::*;
use preprune::saliency::{SaliencyMap, SaliencyRole};
use preprune::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MODES: [RouteMode; 4] = [RouteMode::ThreeWay, RouteMode::PurePrune, RouteMode::FullMerge, RouteMode::UniformAlloc];

pub fn smap(frames: Vec<Vec<f64>>) -> SaliencyMap<f64> {
    SaliencyMap::new(SaliencyRole::Predicted, frames).unwrap()
}

pub struct Draw {
    pub feats: Vec<Tensor<f64>>,
    pub scores: Vec<Vec<f64>>,
    pub k_pct: usize,
    pub g_pct: usize,
    pub mode: RouteMode,
}

pub fn draw(rng: &mut ChaCha8Rng) -> Draw {
    let n = rng.gen_range(1..=6);
    let p = rng.gen_range(1..=24);
    let d = 4;
    // a third of the draws use coarse scores so ties are common
    let coarse = rng.gen_bool(0.33);
    let scores = (0..n)
        .map(|_| {
            (0..p)
                .map(|_| if coarse { rng.gen_range(0..4) as f64 / 4.0 } else { rng.gen::<f64>() })
                .collect()
        })
        .collect();
    let feats = (0..n)
        .map(|_| Tensor::new(vec![p, d], (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    Draw {
        feats,
        scores,
        k_pct: rng.gen_range(1..=100),
        g_pct: rng.gen_range(0..100),
        mode: MODES[rng.gen_range(0..4)],
    }
}

/// Checks every structural property of one routed draw against the oracles.
pub fn check_draw(dw: &Draw) {
    let n = dw.scores.len();
    let p = dw.scores[0].len();
    let r = dw.k_pct as f64 / 100.0;
    let gamma = dw.g_pct as f64 / 100.0;
    let s = smap(dw.scores.clone());
    let plan = plan_routes(&dw.feats, &s, r, gamma, dw.mode).unwrap();
    plan.validate().unwrap();

    let k = keep_count_pct(p, dw.k_pct);
    assert_eq!(plan.total_kept(), n * k);
    let residual_total = n * (p - k);
    let mut phis = Vec::new();
    for (f, fp) in plan.frames.iter().enumerate() {
        assert_eq!(fp.keep, top_k(&dw.scores[f], k));
        let mut all: Vec<usize> = fp.keep.iter().chain(&fp.merge).chain(&fp.prune).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..p).collect::<Vec<_>>());
        assert!(fp.merge.len() <= p - k);

        let resid: Vec<usize> = (0..p).filter(|i| !fp.keep.contains(i)).collect();
        let phi = if resid.is_empty() {
            0.0
        } else {
            resid.iter().map(|&i| dw.scores[f][i]).sum::<f64>() / resid.len() as f64
        };
        assert_eq!(fp.phi, phi);
        phis.push(phi);

        // merged tokens are the best-scoring residual tokens
        let resid_scores: Vec<f64> = resid.iter().map(|&i| dw.scores[f][i]).collect();
        let want: Vec<usize> = top_k(&resid_scores, fp.merge.len()).into_iter().map(|j| resid[j]).collect();
        let mut want = want;
        want.sort_unstable();
        assert_eq!(fp.merge, want);

        let cands: Vec<(usize, Vec<f64>)> = fp.keep.iter().map(|&i| (i, dw.feats[f].row(i).to_vec())).collect();
        for &(m, d) in &fp.dst {
            assert_eq!(d, argmax_cosine(dw.feats[f].row(m), &cands));
        }
    }
    let counts = plan.merge_counts();
    match dw.mode {
        RouteMode::ThreeWay => {
            let b = budget_pct(dw.g_pct, n, p, residual_total);
            assert_eq!(counts.iter().sum::<usize>(), b);
            assert_eq!(counts, allocate_oracle(&phis, &vec![p - k; n], b));
        }
        RouteMode::PurePrune => assert!(counts.iter().all(|&c| c == 0)),
        RouteMode::FullMerge => assert!(counts.iter().all(|&c| c == p - k)),
        RouteMode::UniformAlloc => {
            let per = (p * dw.g_pct).div_ceil(100);
            assert!(counts.iter().all(|&c| c == per.min(p - k)));
        }
    }
}

/// Checks `count` draws from `seed`.
pub fn check_random_draws(seed: u64, count: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..count {
        check_draw(&draw(&mut rng));
    }
}

/// Every `(N ≤ 4, P ≤ 12, K, γ)` with per-frame scores from a small grid;
/// returns the number of instances checked.
pub fn score_grid_instances() -> usize {
    let grid = [0.0, 0.25, 0.5, 1.0];
    let gammas = [0, 10, 25, 30, 50, 75, 95];
    let mut checked = 0usize;
    for n in 1..=4usize {
        for p in 1..=12usize {
            for k in 1..=p {
                let k_pct = 100 * k / p;
                assert_eq!(keep_count_pct(p, k_pct), k);
                for &g in &gammas {
                    for code in 0..grid.len().pow(n as u32) {
                        let phi: Vec<f64> = (0..n).map(|f| grid[(code / grid.len().pow(f as u32)) % grid.len()]).collect();
                        let scores: Vec<Vec<f64>> = phi.iter().map(|&v| vec![v; p]).collect();
                        let feats: Vec<Tensor<f64>> = (0..n).map(|_| Tensor::full(&[p, 2], 1.0)).collect();
                        let plan = plan_routes(&feats, &smap(scores), k_pct as f64 / 100.0, g as f64 / 100.0, RouteMode::ThreeWay).unwrap();
                        let b = budget_pct(g, n, p, n * (p - k));
                        assert_eq!(plan.budget, b);
                        assert_eq!(plan.merge_counts(), allocate_oracle(&phi, &vec![p - k; n], b), "n={n} p={p} k={k} g={g} phi={phi:?}");
                        checked += 1;
                    }
                }
            }
        }
    }
    checked
}

/// Merged keep row of the documented one-frame example, with the oracle
/// value of the same row.
pub fn hand_example() -> ([f64; 2], Vec<f64>) {
    let feats = vec![Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap()];
    let scores = smap(vec![vec![0.9, 0.5, 0.25]]);
    let plan = RoutingPlan {
        mode: RouteMode::FullMerge,
        keep_ratio: 0.3,
        merge_fraction: 0.0,
        patches: 3,
        budget: 0,
        frames: vec![FramePlan { frame: 0, keep: vec![0], merge: vec![1, 2], prune: vec![], phi: 0.375, dst: vec![(1, 0), (2, 0)] }],
    };
    let out = merge_scatter_add(&feats, &scores, &plan).unwrap();
    let want = merged_row(&[1.0, 0.0], &[(&[3.0, 0.0], 0.5), (&[0.0, 4.0], 0.25)]);
    ([out[0].at(&[0, 0]), out[0].at(&[0, 1])], want)
}

/// Keep rows without incoming merges are bit-identical to their input; rows
/// with merges match the weighted-mean oracle.
pub fn check_untouched_rows(seed: u64, count: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..count {
        let dw = draw(&mut rng);
        let s = smap(dw.scores.clone());
        let (plan, merged) = route(&dw.feats, &s, dw.k_pct as f64 / 100.0, dw.g_pct as f64 / 100.0, dw.mode).unwrap();
        for (f, fp) in plan.frames.iter().enumerate() {
            for (row, &k) in fp.keep.iter().enumerate() {
                let incoming: Vec<usize> = fp.dst.iter().filter(|d| d.1 == k).map(|d| d.0).collect();
                let got = merged[f].row(row);
                if incoming.is_empty() {
                    assert_eq!(got, dw.feats[f].row(k));
                } else {
                    let ms: Vec<(&[f64], f64)> = incoming.iter().map(|&m| (dw.feats[f].row(m), dw.scores[f][m])).collect();
                    let want = merged_row(dw.feats[f].row(k), &ms);
                    for (a, b) in got.iter().zip(&want) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
