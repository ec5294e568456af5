mod common;

use common::oracles::*;
use common::routing::*;
use preprune::router::*;
use preprune::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_draws_match_oracles() {
    check_random_draws(20, 2000);
}

#[test]
fn allocation_matches_oracle_on_score_grid() {
    assert!(score_grid_instances() > 100_000);
}

#[test]
fn allocation_with_unequal_caps_matches_oracle() {
    let grid = [0.0, 0.1, 0.45, 0.9];
    for n in 1..=3usize {
        let combos = (7 * grid.len()).pow(n as u32);
        for code in 0..combos {
            let mut c = code;
            let mut phi = Vec::new();
            let mut caps = Vec::new();
            for _ in 0..n {
                phi.push(grid[c % grid.len()]);
                c /= grid.len();
                caps.push(c % 7);
                c /= 7;
            }
            for g in [0usize, 20, 30, 55, 90] {
                let got = allocate_merge_budget(&phi, g as f64 / 100.0, &caps, 12).unwrap();
                let b = budget_pct(g, n, 12, caps.iter().sum());
                assert_eq!(got, allocate_oracle(&phi, &caps, b), "phi={phi:?} caps={caps:?} g={g}");
            }
        }
    }
}

#[test]
fn documented_allocations() {
    assert_eq!(allocate_merge_budget(&[0.2, 0.6], 0.3, &[6, 6], 10).unwrap(), vec![2, 4]);
    assert_eq!(allocate_merge_budget(&[0.0, 0.0], 0.3, &[6, 6], 10).unwrap(), vec![3, 3]);
    assert_eq!(allocate_merge_budget(&[0.9, 0.1], 0.3, &[2, 6], 10).unwrap(), vec![2, 4]);
}

#[test]
fn weighted_merge_hand_example() {
    let (got, want) = hand_example();
    assert!((got[0] - 1.428571).abs() < 1e-6);
    assert!((got[1] - 0.571429).abs() < 1e-6);
    for j in 0..2 {
        assert!((got[j] - want[j]).abs() < 1e-12);
    }
}

#[test]
fn untouched_keep_rows_are_bit_identical() {
    check_untouched_rows(3, 300);
}

#[test]
fn plan_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dw = draw(&mut rng);
    let plan = plan_routes(&dw.feats, &smap(dw.scores.clone()), 0.5, 0.3, RouteMode::ThreeWay).unwrap();
    assert_eq!(RoutingPlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
}

#[test]
fn invalid_ratios_are_rejected() {
    let feats = vec![Tensor::full(&[4, 2], 1.0)];
    let s = smap(vec![vec![0.1, 0.2, 0.3, 0.4]]);
    assert!(plan_routes(&feats, &s, 0.0, 0.3, RouteMode::ThreeWay).is_err());
    assert!(plan_routes(&feats, &s, 1.5, 0.3, RouteMode::ThreeWay).is_err());
    assert!(plan_routes(&feats, &s, 0.5, 1.0, RouteMode::ThreeWay).is_err());
    assert!(plan_routes(&feats, &s, 0.5, -0.1, RouteMode::ThreeWay).is_err());
    assert!(plan_routes(&[], &s, 0.5, 0.3, RouteMode::ThreeWay).is_err());
}

fn frames_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..5, 2usize..12).prop_flat_map(|(n, p)| {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, p), n),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, p * 3), n),
        )
    })
}

fn to_feats(raw: &[Vec<f64>]) -> Vec<Tensor<f64>> {
    raw.iter().map(|r| Tensor::new(vec![r.len() / 3, 3], r.clone()).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn frame_permutation_permutes_the_plan((scores, raw) in frames_strategy(), r in 0.1f64..1.0, g in 0.0f64..0.9, rot in 0usize..4) {
        let n = scores.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let a = plan_routes(&to_feats(&raw), &smap(scores.clone()), r, g, RouteMode::ThreeWay).unwrap();
        let ps: Vec<Vec<f64>> = perm.iter().map(|&i| scores[i].clone()).collect();
        let pr: Vec<Vec<f64>> = perm.iter().map(|&i| raw[i].clone()).collect();
        let b = plan_routes(&to_feats(&pr), &smap(ps), r, g, RouteMode::ThreeWay).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&a.frames[i].keep, &b.frames[j].keep);
            prop_assert_eq!(&a.frames[i].merge, &b.frames[j].merge);
            prop_assert_eq!(&a.frames[i].dst, &b.frames[j].dst);
        }
    }

    #[test]
    fn patch_permutation_permutes_the_plan((scores, raw) in frames_strategy(), r in 0.1f64..1.0, g in 0.0f64..0.9, seed in 0u64..1000) {
        let p = scores[0].len();
        let mut perm: Vec<usize> = (0..p).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..p).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        // new index j holds old token perm[j]
        let ps: Vec<Vec<f64>> = scores.iter().map(|s| perm.iter().map(|&i| s[i]).collect()).collect();
        let pr: Vec<Vec<f64>> = raw.iter().map(|r| perm.iter().flat_map(|&i| r[i * 3..i * 3 + 3].to_vec()).collect()).collect();
        let a = plan_routes(&to_feats(&raw), &smap(scores), r, g, RouteMode::ThreeWay).unwrap();
        let b = plan_routes(&to_feats(&pr), &smap(ps), r, g, RouteMode::ThreeWay).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            let mut keep: Vec<usize> = fb.keep.iter().map(|&j| perm[j]).collect();
            keep.sort_unstable();
            prop_assert_eq!(&fa.keep, &keep);
            let mut merge: Vec<usize> = fb.merge.iter().map(|&j| perm[j]).collect();
            merge.sort_unstable();
            prop_assert_eq!(&fa.merge, &merge);
            let mut dst: Vec<(usize, usize)> = fb.dst.iter().map(|&(m, d)| (perm[m], perm[d])).collect();
            dst.sort_unstable();
            prop_assert_eq!(&fa.dst, &dst);
        }
    }

    #[test]
    fn raising_a_kept_score_keeps_the_keep_set((scores, raw) in frames_strategy(), r in 0.1f64..1.0, bump in 0.0f64..1.0, pick in 0usize..64) {
        let a = plan_routes(&to_feats(&raw), &smap(scores.clone()), r, 0.3, RouteMode::ThreeWay).unwrap();
        let f = pick % scores.len();
        let k = a.frames[f].keep[pick % a.frames[f].keep.len()];
        let mut raised = scores.clone();
        raised[f][k] = (raised[f][k] + bump).min(1.0);
        let b = plan_routes(&to_feats(&raw), &smap(raised), r, 0.3, RouteMode::ThreeWay).unwrap();
        prop_assert_eq!(&a.frames[f].keep, &b.frames[f].keep);
    }

    #[test]
    fn raising_an_outside_score_above_the_cut_admits_it((scores, raw) in frames_strategy(), r in 0.1f64..0.9, pick in 0usize..64) {
        let a = plan_routes(&to_feats(&raw), &smap(scores.clone()), r, 0.3, RouteMode::ThreeWay).unwrap();
        let f = pick % scores.len();
        let outside: Vec<usize> = (0..scores[f].len()).filter(|i| !a.frames[f].keep.contains(i)).collect();
        prop_assume!(!outside.is_empty());
        let m = outside[pick % outside.len()];
        let mut raised = scores.clone();
        let top = a.frames[f].keep.iter().map(|&i| scores[f][i]).fold(0.0, f64::max);
        prop_assume!(top < 1.0);
        raised[f][m] = 1.0;
        let b = plan_routes(&to_feats(&raw), &smap(raised), r, 0.3, RouteMode::ThreeWay).unwrap();
        prop_assert!(b.frames[f].keep.contains(&m));
    }

    #[test]
    fn own_quota_grows_with_own_weight(w in prop::collection::vec(0.0f64..1.0, 2..5), caps in prop::collection::vec(0usize..8, 4), bump in 0.0f64..1.0, b in 0usize..20) {
        let n = w.len();
        let caps = &caps[..n];
        let b = b.min(caps.iter().sum());
        let rw: Vec<_> = w.iter().map(|&x| num_rational::BigRational::from_float(x).unwrap()).collect();
        let mut raised = rw.clone();
        raised[0] += num_rational::BigRational::from_float(bump).unwrap();
        let before = capped_quotas(&rw, caps, b);
        let after = capped_quotas(&raised, caps, b);
        prop_assert!(after[0] >= before[0]);
        prop_assert_eq!(before.clone(), water_fill(&rw, caps, b));
    }
}
