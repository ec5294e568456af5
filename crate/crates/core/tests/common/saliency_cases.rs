//! Enumerated small attention traces for the saliency target.

#![allow(dead_code)]

use super::oracles::*;
use preprune::backbone::{AttentionTrace, TokenKind, TokenRole};
use preprune::saliency::*;
use preprune::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn stochastic(rng: &mut ChaCha8Rng, t: usize, sharp: f64) -> Tensor<f64> {
    let mut data = Vec::with_capacity(t * t);
    for _ in 0..t {
        let logits: Vec<f64> = (0..t).map(|_| sharp * rng.gen_range(-1.0..1.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(vec![t, t], data).unwrap()
}

/// Every layout of at most 8 tokens: 1 or 2 frames, each with a camera
/// token, 0 or 1 register and at least one patch.
pub fn layouts() -> Vec<Vec<TokenRole>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for frames in 1..=2usize {
        for regs in 0..=1usize {
            let special = 1 + regs;
            for patches in 1..=8usize {
                if frames * (special + patches) > 8 {
                    continue;
                }
                let mut roles = Vec::new();
                for f in 0..frames {
                    roles.push(TokenRole { frame: f, kind: TokenKind::Camera });
                    for r in 0..regs {
                        roles.push(TokenRole { frame: f, kind: TokenKind::Register(r) });
                    }
                    // kept patches need not be contiguous or ordered
                    let mut ids: Vec<usize> = (0..patches + 2).collect();
                    ids.shuffle(&mut rng);
                    ids.truncate(patches);
                    roles.extend(ids.into_iter().map(|i| TokenRole { frame: f, kind: TokenKind::Patch(i) }));
                }
                out.push(roles);
            }
        }
    }
    out
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Camera, global and blended scores of every small trace against the
/// brute-force oracles; returns the number of cases.
pub fn all_small_traces() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for roles in layouts() {
        let t = roles.len();
        for layers in 1..=2 {
            for heads in 1..=2 {
                for sharp in [0.5, 3.0, 12.0] {
                    let trace = AttentionTrace {
                        weights: (0..layers).map(|_| (0..heads).map(|_| stochastic(&mut rng, t, sharp)).collect()).collect(),
                        roles: roles.clone(),
                    };
                    for alpha in [0.0, 0.25, 1.0] {
                        let target = saliency_target(&trace, alpha).unwrap();
                        let want = target_oracle(&trace, alpha);
                        for f in 0..target.num_frames() {
                            assert!(close(&camera_anchoring(&trace, f).unwrap(), &camera_oracle(&trace, f), 1e-12));
                            assert!(close(&cross_view_matching(&trace).unwrap()[f], &global_oracle(&trace, f), 1e-12));
                            assert!(close(&target.frames[f], &want[f], 1e-12));
                            assert!(target.frames[f].iter().all(|&v| (0.0..=1.0).contains(&v)));
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    cases
}

/// Constant attention leaves every frame degenerate.
pub fn check_uniform_attention() {
    for roles in layouts() {
        let t = roles.len();
        let trace = AttentionTrace { weights: vec![vec![Tensor::full(&[t, t], 1.0 / t as f64)]], roles };
        let target = saliency_target(&trace, 0.25).unwrap();
        assert!(target.frames.iter().flatten().all(|&v| v == 0.5));
    }
}

pub fn check_single_patch_frames() {
    let roles = vec![
        TokenRole { frame: 0, kind: TokenKind::Camera },
        TokenRole { frame: 0, kind: TokenKind::Patch(0) },
        TokenRole { frame: 1, kind: TokenKind::Camera },
        TokenRole { frame: 1, kind: TokenKind::Patch(0) },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trace = AttentionTrace { weights: vec![vec![stochastic(&mut rng, 4, 3.0)]], roles };
    let target = saliency_target(&trace, 0.25).unwrap();
    assert_eq!(target.frames, vec![vec![0.5], vec![0.5]]);
}
