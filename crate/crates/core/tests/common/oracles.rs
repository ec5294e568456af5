//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Each one is written from the definition, not from the
//! library code it checks.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use preprune::backbone::{AttentionTrace, TokenKind};

pub fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

pub fn int(n: usize) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// `⌈P·k/100⌉` for a keep ratio given in hundredths.
pub fn keep_count_pct(p: usize, k_pct: usize) -> usize {
    (p * k_pct).div_ceil(100).max(1).min(p)
}

/// `min(⌊N·P·j/100⌋, residual)` for a merge fraction given in hundredths.
pub fn budget_pct(j_pct: usize, n: usize, p: usize, residual: usize) -> usize {
    (n * p * j_pct / 100).min(residual)
}

/// Capped proportional shares by water filling: `q_f = min(cap_f, t·w_f)`
/// with the level `t` solved exactly. Frames with zero weight only receive
/// budget once every weighted frame is full, and then share it evenly
/// (again under their caps).
pub fn water_fill(weights: &[BigRational], caps: &[usize], budget: usize) -> Vec<BigRational> {
    let n = weights.len();
    let mut q = vec![BigRational::zero(); n];
    let positive: Vec<usize> = (0..n).filter(|&f| weights[f].is_positive()).collect();
    let zero: Vec<usize> = (0..n).filter(|&f| !weights[f].is_positive()).collect();
    let pos_caps: usize = positive.iter().map(|&f| caps[f]).sum();
    let b = int(budget);
    if !positive.is_empty() {
        let w: Vec<BigRational> = positive.iter().map(|&f| weights[f].clone()).collect();
        let c: Vec<BigRational> = positive.iter().map(|&f| int(caps[f])).collect();
        let target = if budget >= pos_caps { int(pos_caps) } else { b.clone() };
        for (i, v) in level_fill(&w, &c, &target).into_iter().enumerate() {
            q[positive[i]] = v;
        }
    }
    if budget > pos_caps && !zero.is_empty() {
        let w = vec![int(1); zero.len()];
        let c: Vec<BigRational> = zero.iter().map(|&f| int(caps[f])).collect();
        for (i, v) in level_fill(&w, &c, &int(budget - pos_caps)).into_iter().enumerate() {
            q[zero[i]] = v;
        }
    }
    q
}

/// Solve `Σ min(c_i, t·w_i) = target` for `t` by scanning the sorted
/// breakpoints `c_i / w_i` (all `w_i > 0`, `target ≤ Σ c_i`).
fn level_fill(w: &[BigRational], c: &[BigRational], target: &BigRational) -> Vec<BigRational> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| (&c[a] / &w[a]).cmp(&(&c[b] / &w[b])));
    for split in 0..=order.len() {
        let capped: BigRational = order[..split].iter().map(|&i| c[i].clone()).sum();
        let free_w: BigRational = order[split..].iter().map(|&i| w[i].clone()).sum();
        if free_w.is_zero() {
            break;
        }
        let t = (target - capped) / free_w;
        let lo_ok = split == 0 || t >= &c[order[split - 1]] / &w[order[split - 1]];
        let hi_ok = split == order.len() || t <= &c[order[split]] / &w[order[split]];
        if lo_ok && hi_ok {
            return (0..w.len())
                .map(|i| {
                    let s = &t * &w[i];
                    if s > c[i] {
                        c[i].clone()
                    } else {
                        s
                    }
                })
                .collect();
        }
    }
    c.to_vec()
}

/// The integer vector with the same (integral) total as `quotas` that
/// minimises `Σ (M_f − q_f)²`, searched over every floor/ceiling choice;
/// among equally close vectors the lexicographically largest wins.
pub fn nearest_apportionment(quotas: &[BigRational]) -> Vec<usize> {
    let total: BigRational = quotas.iter().cloned().sum();
    assert!(total.is_integer(), "quotas must sum to an integer");
    let total = total.to_integer();
    let floors: Vec<BigInt> = quotas.iter().map(|q| q.floor().to_integer()).collect();
    let n = quotas.len();
    let mut best: Option<(BigRational, Vec<BigInt>)> = None;
    for mask in 0u32..(1 << n) {
        let cand: Vec<BigInt> = (0..n)
            .map(|i| {
                let up = mask & (1 << i) != 0 && !quotas[i].is_integer();
                &floors[i] + BigInt::from(up as u8)
            })
            .collect();
        if cand.iter().sum::<BigInt>() != total {
            continue;
        }
        let err: BigRational = cand
            .iter()
            .zip(quotas)
            .map(|(m, q)| {
                let d = BigRational::from_integer(m.clone()) - q;
                &d * &d
            })
            .sum();
        let better = match &best {
            None => true,
            Some((e, v)) => err < *e || (err == *e && cand > *v),
        };
        if better {
            best = Some((err, cand));
        }
    }
    best.expect("some candidate hits the total")
        .1
        .into_iter()
        .map(|m| m.to_usize().unwrap())
        .collect()
}

/// Full allocation oracle.
pub fn allocate_oracle(phi: &[f64], caps: &[usize], budget: usize) -> Vec<usize> {
    let w: Vec<BigRational> = phi.iter().map(|&x| BigRational::from_float(x).unwrap()).collect();
    nearest_apportionment(&water_fill(&w, caps, budget))
}

/// Top-`k` indices by descending score (lower index first among equals),
/// returned ascending, by full sort of `(score, index)` pairs.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    out.sort_unstable();
    out
}

/// Index of the candidate with the greatest cosine similarity to `x`,
/// scanning every candidate; equal similarities keep the earliest.
pub fn argmax_cosine(x: &[f64], candidates: &[(usize, Vec<f64>)]) -> usize {
    let cos = |a: &[f64], b: &[f64]| {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (na * nb)
        }
    };
    let mut best = candidates[0].0;
    let mut best_c = f64::NEG_INFINITY;
    for (i, v) in candidates {
        let c = cos(x, v);
        if c > best_c {
            best_c = c;
            best = *i;
        }
    }
    best
}

/// Weighted merge of one keep row.
pub fn merged_row(keep: &[f64], merges: &[(&[f64], f64)]) -> Vec<f64> {
    let denom = 1.0 + merges.iter().map(|m| m.1).sum::<f64>();
    (0..keep.len())
        .map(|j| (keep[j] + merges.iter().map(|(f, s)| s * f[j]).sum::<f64>()) / denom)
        .collect()
}

/// Camera-anchoring scores by explicit loops over layers and heads.
pub fn camera_oracle(trace: &AttentionTrace<f64>, frame: usize) -> Vec<f64> {
    let cam = trace
        .roles
        .iter()
        .position(|r| r.frame == frame && r.kind == TokenKind::Camera)
        .unwrap();
    let mut patches: Vec<(usize, usize)> = Vec::new();
    for (pos, r) in trace.roles.iter().enumerate() {
        if let TokenKind::Patch(i) = r.kind {
            if r.frame == frame {
                patches.push((i, pos));
            }
        }
    }
    patches.sort();
    let lh = (trace.weights.len() * trace.weights[0].len()) as f64;
    patches
        .iter()
        .map(|&(_, pos)| {
            let mut s = 0.0;
            for layer in &trace.weights {
                for a in layer {
                    s += a.at(&[cam, pos]);
                }
            }
            s / lh
        })
        .collect()
}

/// Cross-view scores: max over other patch tokens of the layer/head mean.
pub fn global_oracle(trace: &AttentionTrace<f64>, frame: usize) -> Vec<f64> {
    let t = trace.roles.len();
    let lh = (trace.weights.len() * trace.weights[0].len()) as f64;
    let avg = |i: usize, j: usize| {
        let mut s = 0.0;
        for layer in &trace.weights {
            for a in layer {
                s += a.at(&[i, j]);
            }
        }
        s / lh
    };
    let mut patches: Vec<(usize, usize)> = Vec::new();
    for (pos, r) in trace.roles.iter().enumerate() {
        if let TokenKind::Patch(i) = r.kind {
            if r.frame == frame {
                patches.push((i, pos));
            }
        }
    }
    patches.sort();
    patches
        .iter()
        .map(|&(_, i)| {
            let mut best = 0.0f64;
            for j in 0..t {
                if j != i && matches!(trace.roles[j].kind, TokenKind::Patch(_)) {
                    best = best.max(avg(i, j));
                }
            }
            best
        })
        .collect()
}

pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.5; xs.len()];
    }
    xs.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

pub fn target_oracle(trace: &AttentionTrace<f64>, alpha: f64) -> Vec<Vec<f64>> {
    let frames = trace.roles.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    (0..frames)
        .map(|f| {
            let c = normalize(&camera_oracle(trace, f));
            let g = normalize(&global_oracle(trace, f));
            c.iter().zip(&g).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect()
        })
        .collect()
}
