//! Brute-force oracles for target assignment, scoring and metrics.

use diffcore::Tensor;
use gridood::assign::{build_targets, center_cell, responsible_cells, ResponsibilityConfig};
use gridood::metrics::{auroc, aupr, fpr_at_tpr, macro_ap};
use gridood::net::{CandidateGrids, NetworkConfig};
use gridood::scenes::{Scene, SceneObject, ShapeKind};
use gridood::score::{
    calibrate_tau, class_probabilities, decide, heatmap, joint_energy_flat, msp, score_agg, score_cls_only,
    score_obj_only, yolood_joint_energy, yolood_score, AggregationChoice, ClassAgg, Decision, HeadAgg,
};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_xoshiro::SplitMix64;

mod common;
use common::{ap_sweep, auroc_pairs, cells_by_enumeration, fpr_scan, random_object, random_scores, sig};

#[test]
fn responsible_cells_match_enumeration() {
    let mut rng = SplitMix64::seed_from_u64(11);
    let mut mismatches = 0;
    for n in 0..1000 {
        let obj = random_object(&mut rng, 0);
        let p = match n % 10 {
            0 => 0.0,
            1 => 1.0,
            2 => 0.5,
            _ => rng.random::<f64>(),
        };
        for side in [5, 10, 20] {
            if responsible_cells(&obj, side, side, p) != cells_by_enumeration(&obj, side, side, p) {
                mismatches += 1;
            }
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn build_targets_match_union_of_enumerations() {
    let cfg = NetworkConfig::new(160, 4);
    let mut rng = SplitMix64::seed_from_u64(12);
    for _ in 0..200 {
        let n = rng.random_range(0..6usize);
        let objects: Vec<SceneObject> = (0..n)
            .map(|_| {
                let class = if rng.random_bool(0.2) { -1 } else { rng.random_range(0..4) };
                random_object(&mut rng, class)
            })
            .collect();
        let scene = Scene {
            image: Tensor::zeros(&[3, 160, 160]),
            is_ood: objects.iter().all(|o| o.class_id < 0),
            objects,
        };
        let p = ResponsibilityConfig::new([rng.random(), rng.random(), rng.random()]).unwrap();
        let t = build_targets(&scene, &cfg, &p);
        for (k, side) in [5usize, 10, 20].into_iter().enumerate() {
            let mut obj = vec![0.0; side * side];
            let mut cls = vec![0.0; side * side * 4];
            for o in scene.objects.iter().filter(|o| o.class_id >= 0) {
                for (i, j) in cells_by_enumeration(o, side, side, p.p[k]) {
                    obj[i * side + j] = 1.0;
                    cls[(i * side + j) * 4 + o.class_id as usize] = 1.0;
                }
            }
            assert_eq!(t.heads[k].obj.data(), obj.as_slice());
            assert_eq!(t.heads[k].cls.data(), cls.as_slice());
        }
    }
}

proptest! {
    #[test]
    fn responsible_cells_grow_with_p(cx in 0.0..1.0f64, cy in 0.0..1.0f64, w in 0.01..1.0f64, h in 0.01..1.0f64,
                                      p1 in 0.0..=1.0f64, p2 in 0.0..=1.0f64) {
        let obj = SceneObject { class_id: 0, shape: ShapeKind::Square, center: (cx, cy), size: (w, h), color: [0.0; 3] };
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        for side in [5, 10, 20] {
            let small = responsible_cells(&obj, side, side, lo);
            let large = responsible_cells(&obj, side, side, hi);
            prop_assert!(small.iter().all(|c| large.contains(c)));
            prop_assert!(small.contains(&center_cell(&obj, side, side)));
        }
    }
}

fn random_grids(rng: &mut SplitMix64, nc: usize, scale: f64) -> CandidateGrids {
    CandidateGrids::new(
        [5usize, 10, 20]
            .iter()
            .map(|&n| Tensor::from_fn(&[n, n, 1 + nc], |_| scale * (2.0 * rng.random::<f64>() - 1.0)).unwrap())
            .collect(),
    )
    .unwrap()
}

/// `[k][n]` best joint score by direct indexing.
fn joint_table(g: &CandidateGrids) -> Vec<Vec<f64>> {
    let nc = g.num_classes();
    g.heads
        .iter()
        .map(|t| {
            let (w, h) = (t.shape()[0], t.shape()[1]);
            (0..nc)
                .map(|n| {
                    let mut best = f64::NEG_INFINITY;
                    for i in 0..w {
                        for j in 0..h {
                            best = best.max(sig(t.at(&[i, j, 0])) * sig(t.at(&[i, j, 1 + n])));
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

#[test]
fn scores_match_loop_oracles() {
    let mut rng = SplitMix64::seed_from_u64(13);
    for trial in 0..50 {
        let nc = 1 + trial % 4;
        let g = random_grids(&mut rng, nc, 6.0);
        let table = joint_table(&g);

        let probs = class_probabilities(&g);
        for n in 0..nc {
            let want = table.iter().map(|h| h[n]).fold(f64::NEG_INFINITY, f64::max);
            assert!((probs[n] - want).abs() < 1e-12);
        }

        for choice in AggregationChoice::all() {
            let per_class: Vec<f64> = (0..nc)
                .map(|n| {
                    let v: Vec<f64> = table.iter().map(|h| h[n]).collect();
                    match choice.head_agg {
                        HeadAgg::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        HeadAgg::Multiply => v.iter().product(),
                        HeadAgg::Sum => v.iter().sum(),
                    }
                })
                .collect();
            let want = match choice.class_agg {
                ClassAgg::Max => per_class.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ClassAgg::Sum => per_class.iter().sum(),
            };
            assert!((score_agg(&g, choice) - want).abs() < 1e-12, "{choice:?}");
        }
        assert_eq!(yolood_score(&g), score_agg(&g, AggregationChoice::DEFAULT));

        let mut obj_only = 0.0;
        let mut cls_sums = vec![0.0; nc];
        let mut energy = 0.0;
        for t in &g.heads {
            let (w, h) = (t.shape()[0], t.shape()[1]);
            let mut best_obj = f64::NEG_INFINITY;
            for i in 0..w {
                for j in 0..h {
                    best_obj = best_obj.max(sig(t.at(&[i, j, 0])));
                }
            }
            obj_only += best_obj;
            for n in 0..nc {
                let mut best_cls = f64::NEG_INFINITY;
                let mut best_e = f64::NEG_INFINITY;
                for i in 0..w {
                    for j in 0..h {
                        best_cls = best_cls.max(sig(t.at(&[i, j, 1 + n])));
                        let e_obj = -(1.0 + t.at(&[i, j, 0]).exp()).ln();
                        let e_cls = -(1.0 + t.at(&[i, j, 1 + n]).exp()).ln();
                        best_e = best_e.max(e_obj * e_cls);
                    }
                }
                cls_sums[n] += best_cls;
                energy -= best_e;
            }
        }
        assert!((score_obj_only(&g) - obj_only).abs() < 1e-12);
        let cls_only = cls_sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((score_cls_only(&g) - cls_only).abs() < 1e-12);
        assert!((yolood_joint_energy(&g) - energy).abs() < 1e-10);
    }
}

#[test]
fn flat_joint_energy_matches_naive_sum() {
    let mut rng = SplitMix64::seed_from_u64(14);
    for _ in 0..200 {
        let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
        let naive: f64 = logits.iter().map(|z| (1.0 + z.exp()).ln()).sum();
        assert!((joint_energy_flat(&logits) - naive).abs() < 1e-10);
    }
}

#[test]
fn zero_logit_all_methods_closed_forms() {
    let g = CandidateGrids::new([5usize, 10, 20].iter().map(|&n| Tensor::zeros(&[n, n, 5])).collect()).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((yolood_joint_energy(&g) + 4.0 * 3.0 * ln2 * ln2).abs() < 1e-12);
    let h = heatmap(&g, 3).unwrap();
    assert_eq!(h.shape(), &[20, 20]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_score_is_dominated(seed in any::<u64>(), scale in 0.1..20.0f64) {
        let g = random_grids(&mut SplitMix64::seed_from_u64(seed), 3, scale);
        let y = yolood_score(&g);
        prop_assert!(y <= score_obj_only(&g));
        prop_assert!(y <= score_cls_only(&g));
        prop_assert!(y > 0.0 && y < 3.0);
        prop_assert_eq!(y, score_agg(&g, AggregationChoice::DEFAULT));
    }

    #[test]
    fn raising_objectness_never_lowers_obj_score(seed in any::<u64>(), head in 0usize..3, cell in 0usize..25, bump in 0.0..10.0f64) {
        let mut g = random_grids(&mut SplitMix64::seed_from_u64(seed), 2, 5.0);
        let before = score_obj_only(&g);
        g.heads[head].data_mut()[cell * 3] += bump;
        prop_assert!(score_obj_only(&g) >= before);
    }

    #[test]
    fn heatmap_in_unit_interval(seed in any::<u64>(), k in 1usize..=3) {
        let g = random_grids(&mut SplitMix64::seed_from_u64(seed), 4, 15.0);
        let h = heatmap(&g, k).unwrap();
        prop_assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn msp_range_and_shift(logits in prop::collection::vec(-30.0..30.0f64, 2..6), c in -100.0..100.0f64) {
        let m = msp(&logits);
        prop_assert!(m >= 1.0 / logits.len() as f64 - 1e-15 && m <= 1.0);
        let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
        prop_assert!((msp(&shifted) - m).abs() < 1e-12);
    }

    #[test]
    fn raising_tau_never_admits_more(scores in prop::collection::vec(-5.0..5.0f64, 1..50), t1 in -5.0..5.0f64, t2 in -5.0..5.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        for &s in &scores {
            if decide(s, lo) == Decision::OutOfDistribution {
                prop_assert_eq!(decide(s, hi), Decision::OutOfDistribution);
            }
        }
    }

    #[test]
    fn calibrated_tau_keeps_target_fraction(scores in prop::collection::vec(-5.0..5.0f64, 1..200), target in 0.01..=1.0f64) {
        let tau = calibrate_tau(&scores, target).unwrap();
        let kept = scores.iter().filter(|&&s| decide(s, tau) == Decision::InDistribution).count();
        prop_assert!(kept as f64 / scores.len() as f64 >= target);
        // no larger observed score would still keep the target fraction
        for &s in scores.iter().filter(|&&s| s > tau) {
            let k = scores.iter().filter(|&&x| x >= s).count();
            prop_assert!((k as f64 / scores.len() as f64) < target);
        }
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = SplitMix64::seed_from_u64(15);
    for trial in 0..100 {
        let n_id = rng.random_range(1..=200);
        let n_ood = rng.random_range(1..=200);
        let coarse = trial % 2 == 0;
        let id = random_scores(&mut rng, n_id, 0.3, coarse);
        let ood = random_scores(&mut rng, n_ood, 0.0, coarse);
        assert!((auroc(&id, &ood).unwrap() - auroc_pairs(&id, &ood)).abs() <= 1e-12);
        assert!((aupr(&id, &ood).unwrap() - ap_sweep(&id, &ood)).abs() <= 1e-12);
        assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), fpr_scan(&id, &ood, 0.95));
    }
}

#[test]
fn macro_ap_matches_per_class_sweep() {
    let mut rng = SplitMix64::seed_from_u64(16);
    for _ in 0..20 {
        let labels: Vec<Vec<bool>> = (0..20).map(|_| (0..4).map(|_| rng.random_bool(0.4)).collect()).collect();
        let probs: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| (rng.random::<f64>() * 8.0).round() / 8.0).collect()).collect();
        let m = macro_ap(&probs, &labels).unwrap();
        let mut aps = Vec::new();
        for n in 0..4 {
            let pos: Vec<f64> = (0..20).filter(|&r| labels[r][n]).map(|r| probs[r][n]).collect();
            let neg: Vec<f64> = (0..20).filter(|&r| !labels[r][n]).map(|r| probs[r][n]).collect();
            if !pos.is_empty() {
                aps.push(ap_sweep(&pos, &neg));
            }
        }
        let want = aps.iter().sum::<f64>() / aps.len() as f64;
        assert!((m.value - want).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_invariant_under_increasing_maps(
        id in prop::collection::vec(-4000i32..4000, 1..60),
        ood in prop::collection::vec(-4000i32..4000, 1..60),
    ) {
        let f = |v: &[i32], g: &dyn Fn(f64) -> f64| v.iter().map(|&x| g(x as f64 / 1000.0)).collect::<Vec<_>>();
        let base = auroc(&f(&id, &|x| x), &f(&ood, &|x| x)).unwrap();
        for g in [&(|x: f64| x.exp()) as &dyn Fn(f64) -> f64, &|x| 3.0 * x + 1.0, &sig] {
            prop_assert_eq!(auroc(&f(&id, g), &f(&ood, g)).unwrap(), base);
        }
    }

    #[test]
    fn swapping_lists_complements_auroc(id in prop::collection::vec(-1.0..1.0f64, 1..80), ood in prop::collection::vec(-1.0..1.0f64, 1..80)) {
        let a = auroc(&id, &ood).unwrap();
        let b = auroc(&ood, &id).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        let ap = aupr(&id, &ood).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }

    #[test]
    fn fpr_shrinks_with_target(id in prop::collection::vec(-1.0..1.0f64, 1..80), ood in prop::collection::vec(-1.0..1.0f64, 1..80),
                               t1 in 0.01..=1.0f64, t2 in 0.01..=1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(fpr_at_tpr(&id, &ood, lo).unwrap() <= fpr_at_tpr(&id, &ood, hi).unwrap());
    }
}
