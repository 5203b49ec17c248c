//! Detection metrics: average precision and recall with area buckets, and
//! the false-alarm rate.
//!
//! Inputs are per-image lists: `dets[i]` are the detections of image `i`,
//! `gts[i]` its annotations. Matching is greedy by descending score, one
//! detection per ground box, within a category.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

pub use crate::boxes::iou;
use crate::boxes::BBox;
use crate::data::Annotation;
use crate::detector::Detection;

/// Value reported for an undefined metric (no ground truth).
pub const EMPTY: f64 = -1.0;

pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_MAX_AREA: f64 = 96.0 * 96.0;

/// Recall sampling of the precision envelope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    /// One recall point per positive, `q / Q` for `q = 1..=Q`.
    #[default]
    PerPositive,
    /// 101 evenly spaced recall points `0, 0.01, .., 1`.
    Coco101,
}

/// Area bucket of ground boxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    /// Area below 32².
    Small,
    /// Area in `[32², 96²]`.
    Medium,
    /// Area above 96².
    Large,
}

impl AreaRange {
    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_MAX_AREA,
            AreaRange::Medium => (SMALL_MAX_AREA..=MEDIUM_MAX_AREA).contains(&area),
            AreaRange::Large => area > MEDIUM_MAX_AREA,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApOptions {
    pub iou_thresholds: Vec<f64>,
    pub interpolation: Interpolation,
    /// Detections kept per image, best first.
    pub max_detections: usize,
}

/// `0.50, 0.55, .., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl Default for ApOptions {
    fn default() -> Self {
        ApOptions { iou_thresholds: coco_thresholds(), interpolation: Interpolation::PerPositive, max_detections: 100 }
    }
}

/// Per-threshold outcome of one category.
#[derive(Clone, Debug, PartialEq)]
struct Curve {
    /// `(is_tp)` for scored, non-ignored detections, by descending score.
    hits: Vec<bool>,
    positives: usize,
}

/// Greedy matching of one category at one threshold.
///
/// A detection matched to an out-of-range ground box, or unmatched with an
/// out-of-range area, is ignored.
fn match_category(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    category: usize,
    thr: f64,
    range: AreaRange,
    max_det: usize,
) -> Curve {
    let mut order: Vec<(usize, usize, f64)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        let mut own: Vec<(usize, f64)> = ds.iter().enumerate().map(|(j, d)| (j, d.score)).collect();
        own.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        own.truncate(max_det);
        order.extend(own.into_iter().filter(|&(j, _)| ds[j].category_id == category).map(|(j, s)| (img, j, s)));
    }
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut positives = 0;
    // Per image: (gt box, ignored) in non-ignored-first order.
    let mut pools: Vec<Vec<(BBox, bool)>> = Vec::with_capacity(gts.len());
    for gs in gts {
        let mut pool: Vec<(BBox, bool)> =
            gs.iter().filter(|a| a.category_id == category).map(|a| (a.bbox, !range.contains(a.bbox.area()))).collect();
        pool.sort_by_key(|&(_, ign)| ign);
        positives += pool.iter().filter(|p| !p.1).count();
        pools.push(pool);
    }
    let mut taken: Vec<Vec<bool>> = pools.iter().map(|p| vec![false; p.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    for (img, j, _) in order {
        let d = dets[img][j].bbox;
        let pool = pools.get(img).map_or(&[][..], |p| &p[..]);
        let mut best: Option<usize> = None;
        let mut best_iou = thr;
        for (g, &(gb, ign)) in pool.iter().enumerate() {
            if taken[img][g] {
                continue;
            }
            if let Some(m) = best {
                if !pool[m].1 && ign {
                    break;
                }
            }
            let v = iou(&d, &gb);
            if v >= best_iou {
                best_iou = v;
                best = Some(g);
            }
        }
        match best {
            Some(g) => {
                taken[img][g] = true;
                if !pool[g].1 {
                    hits.push(true);
                }
            }
            None => {
                if range.contains(d.area()) {
                    hits.push(false);
                }
            }
        }
    }
    Curve { hits, positives }
}

/// `(recall, precision)` after every detection.
fn pr_points(c: &Curve) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    c.hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += h as usize;
            (tp as f64 / c.positives as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Area under the interpolated precision envelope.
fn curve_ap(c: &Curve, interp: Interpolation) -> f64 {
    let pts = pr_points(c);
    // envelope[i] = max precision over points i..
    let mut env: Vec<f64> = pts.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let at = |r: f64| -> f64 {
        // first point reaching recall r
        let i = pts.partition_point(|p| p.0 < r - 1e-12);
        if i < pts.len() {
            env[i]
        } else {
            0.0
        }
    };
    match interp {
        Interpolation::PerPositive => {
            let q = c.positives;
            (1..=q).map(|k| at(k as f64 / q as f64)).sum::<f64>() / q as f64
        }
        Interpolation::Coco101 => (0..=100).map(|k| at(k as f64 / 100.0)).sum::<f64>() / 101.0,
    }
}

fn curve_recall(c: &Curve) -> f64 {
    c.hits.iter().filter(|&&h| h).count() as f64 / c.positives as f64
}

/// Averages of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    /// `EMPTY` for categories without ground truth.
    pub per_category_ap: BTreeMap<usize, f64>,
}

fn categories(dets: &[Vec<Detection>], gts: &[Vec<Annotation>]) -> Vec<usize> {
    let mut cats: Vec<usize> = gts
        .iter()
        .flatten()
        .map(|a| a.category_id)
        .chain(dets.iter().flatten().map(|d| d.category_id))
        .collect();
    cats.sort_unstable();
    cats.dedup();
    cats
}

fn mean_defined(v: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = v.filter(|&x| x != EMPTY).collect();
    if xs.is_empty() {
        EMPTY
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Per category, per threshold: `(ap, recall)` or `None` without positives.
fn table(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    thresholds: &[f64],
    range: AreaRange,
    opts: &ApOptions,
) -> BTreeMap<usize, Option<Vec<(f64, f64)>>> {
    categories(dets, gts)
        .into_iter()
        .map(|k| {
            let mut rows = Vec::with_capacity(thresholds.len());
            for &t in thresholds {
                let c = match_category(dets, gts, k, t, range, opts.max_detections);
                if c.positives == 0 {
                    return (k, None);
                }
                rows.push((curve_ap(&c, opts.interpolation), curve_recall(&c)));
            }
            (k, Some(rows))
        })
        .collect()
}

fn summarize(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], range: AreaRange, opts: &ApOptions) -> ApSummary {
    let main = table(dets, gts, &opts.iou_thresholds, range, opts);
    let fixed = table(dets, gts, &[0.5, 0.75], range, opts);
    let per_category_ap: BTreeMap<usize, f64> = main
        .iter()
        .map(|(&k, r)| {
            let v = r.as_ref().map_or(EMPTY, |r| r.iter().map(|x| x.0).sum::<f64>() / r.len() as f64);
            (k, v)
        })
        .collect();
    let ar = mean_defined(
        main.values().map(|r| r.as_ref().map_or(EMPTY, |r| r.iter().map(|x| x.1).sum::<f64>() / r.len() as f64)),
    );
    ApSummary {
        ap: mean_defined(per_category_ap.values().copied()),
        ap50: mean_defined(fixed.values().map(|r| r.as_ref().map_or(EMPTY, |r| r[0].0))),
        ap75: mean_defined(fixed.values().map(|r| r.as_ref().map_or(EMPTY, |r| r[1].0))),
        ar,
        per_category_ap,
    }
}

/// AP averaged over thresholds and categories, AP at 0.5 and 0.75, and AR.
pub fn compute_ap(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], opts: &ApOptions) -> ApSummary {
    summarize(dets, gts, AreaRange::All, opts)
}

/// AP restricted to ground boxes of one area bucket.
pub fn compute_ap_in(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], range: AreaRange, opts: &ApOptions) -> ApSummary {
    summarize(dets, gts, range, opts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BucketMetrics {
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar_s: f64,
    pub ar_m: f64,
    pub ar_l: f64,
}

pub fn scale_bucket_metrics(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], opts: &ApOptions) -> BucketMetrics {
    let s = summarize(dets, gts, AreaRange::Small, opts);
    let m = summarize(dets, gts, AreaRange::Medium, opts);
    let l = summarize(dets, gts, AreaRange::Large, opts);
    BucketMetrics { ap_s: s.ap, ap_m: m.ap, ap_l: l.ap, ar_s: s.ar, ar_m: m.ar, ar_l: l.ar }
}

/// True and false positives among detections scoring at least
/// `score_thresh`, greedily matched per image and category.
pub fn match_counts(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], iou_thresh: f64, score_thresh: f64) -> (usize, usize) {
    let (mut tp, mut fp) = (0, 0);
    for (img, ds) in dets.iter().enumerate() {
        let gs = gts.get(img).map_or(&[][..], |g| &g[..]);
        let mut order: Vec<usize> = (0..ds.len()).filter(|&j| ds[j].score >= score_thresh).collect();
        order.sort_by(|&a, &b| ds[b].score.total_cmp(&ds[a].score).then(a.cmp(&b)));
        let mut taken = vec![false; gs.len()];
        for j in order {
            let mut best: Option<usize> = None;
            let mut best_iou = iou_thresh;
            for (g, a) in gs.iter().enumerate() {
                if taken[g] || a.category_id != ds[j].category_id {
                    continue;
                }
                let v = iou(&ds[j].bbox, &a.bbox);
                if v >= best_iou {
                    best_iou = v;
                    best = Some(g);
                }
            }
            match best {
                Some(g) => {
                    taken[g] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
    }
    (tp, fp)
}

/// `FP / (TP + FP)`, zero without detections.
pub fn false_alarm_from_counts(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        fp as f64 / (tp + fp) as f64
    }
}

pub fn false_alarm_rate(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], iou_thresh: f64, score_thresh: f64) -> f64 {
    let (tp, fp) = match_counts(dets, gts, iou_thresh, score_thresh);
    false_alarm_from_counts(tp, fp)
}

/// Full metric set of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar_s: f64,
    pub ar_m: f64,
    pub ar_l: f64,
    pub false_alarm_rate: f64,
    pub per_category_ap: BTreeMap<usize, f64>,
}

/// Settings of [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ap: ApOptions,
    pub far_iou: f64,
    pub far_score: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { ap: ApOptions::default(), far_iou: 0.5, far_score: 0.3 }
    }
}

pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], opts: &EvalOptions) -> MetricReport {
    let all = compute_ap(dets, gts, &opts.ap);
    let b = scale_bucket_metrics(dets, gts, &opts.ap);
    MetricReport {
        ap: all.ap,
        ap50: all.ap50,
        ap75: all.ap75,
        ap_s: b.ap_s,
        ap_m: b.ap_m,
        ap_l: b.ap_l,
        ar_s: b.ar_s,
        ar_m: b.ar_m,
        ar_l: b.ar_l,
        false_alarm_rate: false_alarm_rate(dets, gts, opts.far_iou, opts.far_score),
        per_category_ap: all.per_category_ap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(x: f64, y: f64, s: f64) -> Annotation {
        Annotation { id: 0, bbox: BBox::new(x, y, s, s).unwrap(), category_id: 0 }
    }

    fn det(a: &Annotation, score: f64) -> Detection {
        Detection { bbox: a.bbox, category_id: a.category_id, score }
    }

    #[test]
    fn perfect_single() {
        let g = ann(10.0, 10.0, 8.0);
        let s = compute_ap(&[vec![det(&g, 0.9)]], &[vec![g]], &ApOptions::default());
        assert_eq!((s.ap, s.ap50, s.ap75), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_detections_zero() {
        let s = compute_ap(&[vec![]], &[vec![ann(10.0, 10.0, 8.0)]], &ApOptions::default());
        assert_eq!(s.ap, 0.0);
    }

    #[test]
    fn hand_enumerated_curve() {
        let (a, b) = (ann(10.0, 10.0, 8.0), ann(40.0, 40.0, 8.0));
        let miss = ann(80.0, 80.0, 8.0);
        let d = vec![det(&a, 0.9), det(&miss, 0.8), det(&b, 0.7)];
        let opts = ApOptions { iou_thresholds: vec![0.5], ..ApOptions::default() };
        let s = compute_ap(&[d], &[vec![a, b]], &opts);
        assert!((s.ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn small_only_buckets() {
        let g = ann(10.0, 10.0, 10.0);
        let m = scale_bucket_metrics(&[vec![det(&g, 0.9)]], &[vec![g]], &ApOptions::default());
        assert_eq!((m.ap_m, m.ap_l), (EMPTY, EMPTY));
        assert_eq!(m.ap_s, 1.0);
    }

    #[test]
    fn far_arithmetic() {
        assert_eq!(false_alarm_from_counts(894, 106), 0.106);
        assert_eq!(false_alarm_from_counts(5, 0), 0.0);
        assert_eq!(false_alarm_from_counts(0, 0), 0.0);
    }
}
