//! Brute-force oracles shared by the oracle tests and the acceptance suite.
#![allow(dead_code)]

use gridood::scenes::{SceneObject, ShapeKind};
use rand::RngExt;
use rand_xoshiro::SplitMix64;

pub fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn random_object(rng: &mut SplitMix64, class_id: i32) -> SceneObject {
    SceneObject {
        class_id,
        shape: ShapeKind::Circle,
        center: (rng.random::<f64>(), rng.random::<f64>()),
        size: (rng.random_range(0.01..=1.0), rng.random_range(0.01..=1.0)),
        color: [0.5; 3],
    }
}

/// Every cell of the grid tested against the four interval conditions.
pub fn cells_by_enumeration(obj: &SceneObject, w: usize, h: usize, p: f64) -> Vec<(usize, usize)> {
    let xc = ((obj.center.0 * w as f64) as usize).min(w - 1) as f64;
    let yc = ((obj.center.1 * h as f64) as usize).min(h - 1) as f64;
    let wr = obj.size.0 * w as f64;
    let hr = obj.size.1 * h as f64;
    let mut out = Vec::new();
    for i in 0..w {
        for j in 0..h {
            let (x, y) = (i as f64, j as f64);
            if xc - p * wr / 2.0 <= x && x <= xc + p * wr / 2.0 && yc - p * hr / 2.0 <= y && y <= yc + p * hr / 2.0 {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn random_scores(rng: &mut SplitMix64, n: usize, shift: f64, coarse: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random::<f64>() + shift;
            if coarse {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        })
        .collect()
}

pub fn auroc_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut c = 0.0;
    for &i in id {
        for &o in ood {
            if i > o {
                c += 1.0;
            } else if i == o {
                c += 0.5;
            }
        }
    }
    c / (id.len() * ood.len()) as f64
}

pub fn ap_sweep(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64;
        let r = tp / pos.len() as f64;
        if tp > 0.0 {
            ap += (r - prev_r) * tp / (tp + fp);
        }
        prev_r = r;
    }
    ap
}

pub fn fpr_scan(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let tau = id
        .iter()
        .copied()
        .filter(|&t| id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64 >= target)
        .fold(f64::NEG_INFINITY, f64::max);
    ood.iter().filter(|&&s| s >= tau).count() as f64 / ood.len() as f64
}
