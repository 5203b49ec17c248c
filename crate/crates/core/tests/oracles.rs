//! Box geometry, assignment, suppression and average precision against
//! brute-force reference implementations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sclnet_core::boxes::{decode_deltas, encode_deltas, iou, nms, DeltaStds};
use sclnet_core::data::Annotation;
use sclnet_core::detector::Detection;
use sclnet_core::eval::{compute_ap, false_alarm_rate, scale_bucket_metrics, ApOptions, Interpolation, EMPTY};
use sclnet_core::iccl::assign_max_iou;
use sclnet_core::BBox;

/// Integer-corner box inside a `size`² grid.
fn grid_box(rng: &mut ChaCha8Rng, size: i32) -> (i32, i32, i32, i32) {
    let x1 = rng.gen_range(0..size - 1);
    let y1 = rng.gen_range(0..size - 1);
    (x1, y1, rng.gen_range(x1 + 1..=size), rng.gen_range(y1 + 1..=size))
}

fn to_bbox(b: (i32, i32, i32, i32)) -> BBox {
    BBox::from_corners(b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64).unwrap()
}

/// IoU by counting unit cells.
fn cell_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
    let inside = |r: (i32, i32, i32, i32), x: i32, y: i32| x >= r.0 && x < r.2 && y >= r.1 && y < r.3;
    let (mut inter, mut union) = (0, 0);
    for y in 0..16 {
        for x in 0..16 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as i32;
            union += (ia || ib) as i32;
        }
    }
    inter as f64 / union as f64
}

#[test]
fn iou_matches_cell_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let (a, b) = (grid_box(&mut rng, 16), grid_box(&mut rng, 16));
        assert!((iou(&to_bbox(a), &to_bbox(b)) - cell_iou(a, b)).abs() < 1e-12, "{a:?} {b:?}");
    }
}

#[test]
fn deltas_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let stds = DeltaStds([0.1, 0.1, 0.2, 0.2]);
    for _ in 0..200 {
        let src = to_bbox(grid_box(&mut rng, 64));
        let dst = to_bbox(grid_box(&mut rng, 64));
        let back = decode_deltas(&src, encode_deltas(&src, &dst, stds), stds);
        for (u, v) in [(back.x_center, dst.x_center), (back.y_center, dst.y_center), (back.width, dst.width), (back.height, dst.height)] {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

fn annotations(boxes: &[(i32, i32, i32, i32)], cats: &[usize]) -> Vec<Annotation> {
    boxes
        .iter()
        .zip(cats)
        .enumerate()
        .map(|(i, (&b, &c))| Annotation { id: i as u64, bbox: to_bbox(b), category_id: c })
        .collect()
}

#[test]
fn assigner_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let ng = rng.gen_range(0..5);
        let gb: Vec<_> = (0..ng).map(|_| grid_box(&mut rng, 16)).collect();
        let cats: Vec<usize> = (0..ng).map(|_| rng.gen_range(0..3)).collect();
        let gts = annotations(&gb, &cats);
        // Duplicated ground boxes make ties.
        let mut pb: Vec<_> = (0..8).map(|_| grid_box(&mut rng, 16)).collect();
        pb.extend(gb.iter().copied());
        let props: Vec<BBox> = pb.iter().map(|&b| to_bbox(b)).collect();
        let got = assign_max_iou(&props, &gts, 0.5);
        for (p, a) in pb.iter().zip(&got) {
            let ious: Vec<f64> = gb.iter().map(|&g| cell_iou(*p, g)).collect();
            let best = ious.iter().cloned().fold(0.0, f64::max);
            let first = ious.iter().position(|&v| v == best);
            if ng > 0 && best >= 0.5 {
                assert_eq!(a.gt_index, first);
                assert_eq!(a.category, first.map(|g| cats[g]));
            } else {
                assert_eq!((a.gt_index, a.category), (None, None));
            }
            assert!((a.max_iou - best).abs() < 1e-12);
        }
    }
}

/// Repeatedly takes the best remaining box and discards everything that
/// overlaps it by more than the threshold.
fn nms_oracle(boxes: &[(i32, i32, i32, i32)], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let &best = remaining
            .iter()
            .max_by(|&&a, &&b| scores[a].partial_cmp(&scores[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        keep.push(best);
        remaining.retain(|&j| j != best && cell_iou(boxes[best], boxes[j]) <= thr);
    }
    keep
}

#[test]
fn nms_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100 {
        let n = rng.gen_range(0..15);
        let b: Vec<_> = (0..n).map(|_| grid_box(&mut rng, 16)).collect();
        // Coarse scores produce ties.
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
        let thr = [0.3, 0.5, 0.7][case % 3];
        let bx: Vec<BBox> = b.iter().map(|&x| to_bbox(x)).collect();
        assert_eq!(nms(&bx, &s, thr), nms_oracle(&b, &s, thr), "case {case}");
    }
}

/// One category, one threshold: greedy matching in global score order, then
/// interpolated precision taken as the best precision at any recall at least
/// as large as each sample point.
fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], cat: usize, thr: f64, interp: Interpolation) -> Option<f64> {
    let positives = gts.iter().flatten().filter(|a| a.category_id == cat).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> =
        dets.iter().enumerate().flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j))).filter(|&(i, j)| dets[i][j].category_id == cat).collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.partial_cmp(&dets[a.0][a.1].score).unwrap().then(a.cmp(b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0.0;
    let mut curve = Vec::new();
    for (n, &(i, j)) in order.iter().enumerate() {
        let mut pick = None;
        let mut best = thr;
        for (g, a) in gts[i].iter().enumerate() {
            if a.category_id != cat || used[i][g] {
                continue;
            }
            let v = iou(&dets[i][j].bbox, &a.bbox);
            if v >= best {
                best = v;
                pick = Some(g);
            }
        }
        if let Some(g) = pick {
            used[i][g] = true;
            tp += 1.0;
        }
        curve.push((tp / positives as f64, tp / (n + 1) as f64));
    }
    let envelope = |r: f64| curve.iter().filter(|p| p.0 >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max);
    let points: Vec<f64> = match interp {
        Interpolation::PerPositive => (1..=positives).map(|k| k as f64 / positives as f64).collect(),
        Interpolation::Coco101 => (0..=100).map(|k| k as f64 / 100.0).collect(),
    };
    Some(points.iter().map(|&r| envelope(r)).sum::<f64>() / points.len() as f64)
}

fn mean_over_categories(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], thresholds: &[f64], interp: Interpolation) -> f64 {
    let per: Vec<f64> = (0..3)
        .filter_map(|c| {
            let v: Option<Vec<f64>> = thresholds.iter().map(|&t| ap_oracle(dets, gts, c, t, interp)).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    if per.is_empty() {
        EMPTY
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
    let images = rng.gen_range(1..4);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let ng = rng.gen_range(0..5);
        let gb: Vec<_> = (0..ng).map(|_| grid_box(rng, 16)).collect();
        let cats: Vec<usize> = (0..ng).map(|_| rng.gen_range(0..3)).collect();
        let g = annotations(&gb, &cats);
        let mut d = Vec::new();
        for a in &g {
            if rng.gen_bool(0.7) {
                // Near copies of ground boxes so that several thresholds matter.
                let b = a.bbox;
                let j = |r: &mut ChaCha8Rng| r.gen_range(-1.5..1.5);
                let bb = BBox::from_corners(b.x1() + j(rng), b.y1() + j(rng), b.x2() + 2.0 + j(rng), b.y2() + 2.0 + j(rng));
                if let Ok(bb) = bb {
                    d.push(Detection { bbox: bb, category_id: a.category_id, score: rng.gen_range(0..20) as f64 / 20.0 });
                }
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            d.push(Detection { bbox: to_bbox(grid_box(rng, 16)), category_id: rng.gen_range(0..3), score: rng.gen_range(0..20) as f64 / 20.0 });
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

#[test]
fn ap_matches_reference_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let (dets, gts) = random_instance(&mut rng);
        for interp in [Interpolation::PerPositive, Interpolation::Coco101] {
            let opts = ApOptions { interpolation: interp, ..ApOptions::default() };
            let got = compute_ap(&dets, &gts, &opts);
            let thresholds = opts.iou_thresholds.clone();
            let want = mean_over_categories(&dets, &gts, &thresholds, interp);
            let want50 = mean_over_categories(&dets, &gts, &[0.5], interp);
            assert!((got.ap - want).abs() < 1e-6, "case {case}: ap {} vs {want}", got.ap);
            assert!((got.ap50 - want50).abs() < 1e-6, "case {case}: ap50 {} vs {want50}", got.ap50);
        }
    }
}

#[test]
fn hand_enumerated_average_precision() {
    let g = |x: f64| BBox::from_xywh(x, 0.0, 10.0, 10.0).unwrap();
    let gts = vec![vec![
        Annotation { id: 1, bbox: g(0.0), category_id: 0 },
        Annotation { id: 2, bbox: g(50.0), category_id: 0 },
    ]];
    let dets = vec![vec![
        Detection { bbox: g(0.0), category_id: 0, score: 0.9 },
        Detection { bbox: g(100.0), category_id: 0, score: 0.8 },
        Detection { bbox: g(50.0), category_id: 0, score: 0.7 },
    ]];
    let opts = ApOptions { iou_thresholds: vec![0.5], ..ApOptions::default() };
    let got = compute_ap(&dets, &gts, &opts);
    assert!((got.ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
}

/// False alarms by repeatedly taking the best remaining detection.
fn far_oracle(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], thr: f64, min_score: f64) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    for (ds, gs) in dets.iter().zip(gts) {
        let mut left: Vec<&Detection> = ds.iter().filter(|d| d.score >= min_score).collect();
        let mut free: Vec<&Annotation> = gs.iter().collect();
        while !left.is_empty() {
            // First of the highest score, as a stable sort would give.
            let top = (0..left.len()).fold(0, |b, i| if left[i].score > left[b].score { i } else { b });
            let d = left.remove(top);
            let mut pick: Option<(usize, f64)> = None;
            for (g, a) in free.iter().enumerate() {
                let v = iou(&d.bbox, &a.bbox);
                if a.category_id == d.category_id && v >= thr && pick.map_or(true, |(_, pv)| v >= pv) {
                    pick = Some((g, v));
                }
            }
            match pick {
                Some((g, _)) => {
                    free.remove(g);
                    tp += 1;
                }
                None => fp += 1,
            }
        }
    }
    if tp + fp == 0 {
        0.0
    } else {
        fp as f64 / (tp + fp) as f64
    }
}

#[test]
fn false_alarm_rate_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let (dets, gts) = random_instance(&mut rng);
        for (thr, score) in [(0.5, 0.3), (0.5, 0.0), (0.75, 0.5)] {
            let got = false_alarm_rate(&dets, &gts, thr, score);
            let want = far_oracle(&dets, &gts, thr, score);
            assert!((got - want).abs() < 1e-12, "case {case} thr {thr} score {score}: {got} vs {want}");
        }
    }
}

#[test]
fn area_buckets_split_ground_truth() {
    let sq = |x: f64, s: f64| BBox::from_xywh(x, 0.0, s, s).unwrap();
    // One small (20²) and one medium (40²) box of the same category.
    let gts = vec![vec![
        Annotation { id: 1, bbox: sq(0.0, 20.0), category_id: 0 },
        Annotation { id: 2, bbox: sq(100.0, 40.0), category_id: 0 },
    ]];
    let opts = ApOptions::default();
    let small_hit = vec![vec![Detection { bbox: sq(0.0, 20.0), category_id: 0, score: 0.9 }]];
    let b = scale_bucket_metrics(&small_hit, &gts, &opts);
    assert_eq!((b.ap_s, b.ar_s), (1.0, 1.0));
    assert_eq!((b.ap_m, b.ar_m), (0.0, 0.0));
    assert_eq!((b.ap_l, b.ar_l), (EMPTY, EMPTY));
    // A detection matched to the medium box is ignored by the small bucket.
    let both = vec![vec![
        Detection { bbox: sq(100.0, 40.0), category_id: 0, score: 0.95 },
        Detection { bbox: sq(0.0, 20.0), category_id: 0, score: 0.9 },
    ]];
    let b = scale_bucket_metrics(&both, &gts, &opts);
    assert_eq!((b.ap_s, b.ap_m), (1.0, 1.0));
    // An unmatched medium-area detection does not count against small objects.
    let stray = vec![vec![
        Detection { bbox: sq(200.0, 40.0), category_id: 0, score: 0.99 },
        Detection { bbox: sq(0.0, 20.0), category_id: 0, score: 0.9 },
    ]];
    let b = scale_bucket_metrics(&stray, &gts, &opts);
    assert_eq!(b.ap_s, 1.0);
    assert!(b.ap_m == 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_ignores_monotone_score_maps(seed in 0u64..10_000, a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_instance(&mut rng);
        let mapped: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().map(|x| Detection { score: a * x.score + b, ..*x }).collect())
            .collect();
        let opts = ApOptions::default();
        prop_assert_eq!(compute_ap(&dets, &gts, &opts), compute_ap(&mapped, &gts, &opts));
    }

    #[test]
    fn exact_detections_give_unit_ap(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, gts) = random_instance(&mut rng);
        prop_assume!(gts.iter().any(|g| !g.is_empty()));
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|a| Detection { bbox: a.bbox, category_id: a.category_id, score: 1.0 }).collect())
            .collect();
        let s = compute_ap(&dets, &gts, &ApOptions::default());
        prop_assert!((s.ap - 1.0).abs() < 1e-12);
        prop_assert!((s.ar - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(x in 0.0f64..50.0, y in 0.0f64..50.0, w in 0.5f64..30.0, h in 0.5f64..30.0,
                                    u in 0.0f64..50.0, v in 0.0f64..50.0, p in 0.5f64..30.0, q in 0.5f64..30.0) {
        let a = BBox::from_xywh(x, y, w, h).unwrap();
        let b = BBox::from_xywh(u, v, p, q).unwrap();
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deleting_a_false_positive_never_lowers_ap(seed in 0u64..10_000, pick in 0usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_instance(&mut rng);
        prop_assume!(gts.iter().any(|g| !g.is_empty()));
        // Clear misses at every threshold: below 0.5 IoU with all same-category ground boxes.
        let misses: Vec<(usize, usize)> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().enumerate().map(move |(j, d)| (i, j, d)))
            .filter(|&(i, _, d)| gts[i].iter().all(|a| a.category_id != d.category_id || iou(&d.bbox, &a.bbox) < 0.5))
            .map(|(i, j, _)| (i, j))
            .collect();
        prop_assume!(!misses.is_empty());
        let (i, j) = misses[pick % misses.len()];
        let mut fewer = dets.clone();
        fewer[i].remove(j);
        let opts = ApOptions { max_detections: 1000, ..ApOptions::default() };
        let (before, after) = (compute_ap(&dets, &gts, &opts), compute_ap(&fewer, &gts, &opts));
        prop_assert!(after.ap >= before.ap - 1e-12, "{} -> {}", before.ap, after.ap);
        prop_assert!(after.ap50 >= before.ap50 - 1e-12);
    }
}
