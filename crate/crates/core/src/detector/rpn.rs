//! Single-anchor region proposals and the jittered ground-truth stand-in.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ProposalMode, STRIDES};
use crate::boxes::{decode_deltas, encode_deltas, iou, nms, BBox, DeltaStds};
use crate::data::Annotation;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::{LevelLayout, Var};
use crate::params::{Ctx, Init, ModelParams};
use crate::real::Real;
use crate::tensor::Tensor;

/// IoU at or above which an anchor is a positive.
pub const ANCHOR_POS_IOU: f64 = 0.5;
/// IoU below which an anchor is a negative.
pub const ANCHOR_NEG_IOU: f64 = 0.3;
/// Candidates kept per image before proposal NMS.
pub const PRE_NMS_TOP: usize = 2000;
/// Proposals narrower than this (pixels) are widened.
pub const MIN_PROPOSAL: f64 = 1.0;

pub(crate) fn init_params<T: Real>(cfg: &ModelConfig, init: &mut Init, p: &mut ModelParams<T>) -> Result<()> {
    let c = cfg.channels;
    init.conv(p, "rpn.conv", c, c, 3, true)?;
    // Objectness starts near a 1% prior.
    init.conv_std(p, "rpn.obj", 1, c, 1, 0.01, -libm::log(99.0))?;
    init.conv_std(p, "rpn.reg", 4, c, 1, 0.01, 0.0)?;
    Ok(())
}

/// Anchors of one image in token order: level, then raster.
pub fn anchors(shapes: &[(usize, usize)], anchor_scale: f64) -> Vec<BBox> {
    let mut out = Vec::with_capacity(shapes.iter().map(|&(h, w)| h * w).sum());
    for (l, &(h, w)) in shapes.iter().enumerate() {
        let s = STRIDES[l] as f64;
        for y in 0..h {
            for x in 0..w {
                out.push(BBox {
                    x_center: (x as f64 + 0.5) * s,
                    y_center: (y as f64 + 0.5) * s,
                    width: anchor_scale * s,
                    height: anchor_scale * s,
                });
            }
        }
    }
    out
}

/// Graph nodes of the proposal head.
pub struct RpnVars {
    /// `[B·Q, 1]` objectness logits.
    pub objectness: Var,
    /// `[B·Q, 4]` anchor deltas.
    pub deltas: Var,
    pub layout: LevelLayout,
}

pub fn rpn_graph<T: Real>(ctx: &mut Ctx<'_, T>, levels: &[Var]) -> Result<RpnVars> {
    let mut obj = Vec::with_capacity(levels.len());
    let mut reg = Vec::with_capacity(levels.len());
    for &l in levels {
        let h = ctx.conv(l, "rpn.conv", 1, 1)?;
        let h = ctx.g.relu(h);
        obj.push(ctx.conv(h, "rpn.obj", 1, 0)?);
        reg.push(ctx.conv(h, "rpn.reg", 1, 0)?);
    }
    let (objectness, layout) = ctx.g.flatten_levels(&obj);
    let (deltas, _) = ctx.g.flatten_levels(&reg);
    Ok(RpnVars { objectness, deltas, layout })
}

/// Scored, clipped proposals of image `b` after NMS, best first.
pub fn decode_proposals<T: Real>(
    objectness: &Tensor<T>,
    deltas: &Tensor<T>,
    b: usize,
    anchors: &[BBox],
    image_w: usize,
    image_h: usize,
    num_proposals: usize,
    nms_iou: f64,
) -> Vec<(BBox, f64)> {
    let q = anchors.len();
    let obj = &objectness.data()[b * q..(b + 1) * q];
    let del = &deltas.data()[b * q * 4..(b + 1) * q * 4];
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&i, &j| obj[j].as_f64().total_cmp(&obj[i].as_f64()).then(i.cmp(&j)));
    order.truncate(PRE_NMS_TOP);
    let mut boxes = Vec::with_capacity(order.len());
    let mut scores = Vec::with_capacity(order.len());
    for &i in &order {
        let d = [del[i * 4].as_f64(), del[i * 4 + 1].as_f64(), del[i * 4 + 2].as_f64(), del[i * 4 + 3].as_f64()];
        let bx = decode_deltas(&anchors[i], d, DeltaStds::UNIT).clip_or_min(image_w as f64, image_h as f64, MIN_PROPOSAL);
        boxes.push(bx);
        scores.push(sigmoid(obj[i].as_f64()));
    }
    let mut keep = nms(&boxes, &scores, nms_iou);
    keep.truncate(num_proposals);
    keep.into_iter().map(|i| (boxes[i], scores[i])).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// Sampled anchors of one image: indices, binary targets and regression
/// targets of the positive indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorSample {
    pub indices: Vec<usize>,
    pub labels: Vec<f64>,
    pub positives: Vec<usize>,
    pub targets: Vec<[f64; 4]>,
}

/// Labels anchors against ground truth and draws a balanced sample.
pub fn sample_anchors(anchors: &[BBox], gts: &[Annotation], per_image: usize, rng: &mut ChaCha8Rng) -> AnchorSample {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut forced = vec![false; n];
    for (g, a) in gts.iter().enumerate() {
        let mut top = (usize::MAX, 0.0f64);
        for (i, an) in anchors.iter().enumerate() {
            let v = iou(an, &a.bbox);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = g;
            }
            if v > top.1 {
                top = (i, v);
            }
        }
        if top.0 != usize::MAX {
            // Every ground box keeps its best anchor.
            forced[top.0] = true;
            best_gt[top.0] = g;
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        if forced[i] || best_iou[i] >= ANCHOR_POS_IOU {
            pos.push(i);
        } else if best_iou[i] < ANCHOR_NEG_IOU {
            neg.push(i);
        }
    }
    shuffle(&mut pos, rng);
    pos.truncate(per_image / 2);
    shuffle(&mut neg, rng);
    neg.truncate(per_image - pos.len());
    let targets = pos.iter().map(|&i| encode_deltas(&anchors[i], &gts[best_gt[i]].bbox, DeltaStds::UNIT)).collect();
    let mut indices = pos.clone();
    indices.extend_from_slice(&neg);
    let mut labels = vec![1.0; pos.len()];
    labels.resize(indices.len(), 0.0);
    AnchorSample { indices, labels, positives: pos, targets }
}

/// Fisher–Yates on a seeded stream.
pub fn shuffle<X>(v: &mut [X], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Jittered copies of every ground box, or the boxes themselves at zero
/// jitter.
pub fn jitter_proposals(gts: &[Annotation], jitter: f64, copies: usize, image_w: usize, image_h: usize, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(gts.len() * copies);
    for a in gts {
        for _ in 0..copies.max(1) {
            if jitter == 0.0 {
                out.push(a.bbox);
                continue;
            }
            let b = a.bbox;
            let mut u = || rng.gen_range(-1.0..=1.0) * jitter;
            let bx = BBox {
                x_center: b.x_center + u() * b.width,
                y_center: b.y_center + u() * b.height,
                width: b.width * libm::exp(u()),
                height: b.height * libm::exp(u()),
            };
            out.push(bx.clip_or_min(image_w as f64, image_h as f64, MIN_PROPOSAL));
        }
    }
    out
}

/// Settings of [`propose`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalOptions {
    pub num_proposals: usize,
    pub nms_iou: f64,
    pub image_w: usize,
    pub image_h: usize,
    pub seed: u64,
}

/// Proposals for one image, at most `num_proposals`.
pub fn propose<T: Real>(
    pyramid: &FeaturePyramid<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    mode: ProposalMode,
    gts: Option<&[Annotation]>,
    opts: &ProposalOptions,
) -> Result<Vec<BBox>> {
    match mode {
        ProposalMode::GtJitter { jitter, copies } => {
            let gts = gts.ok_or_else(|| Error::Invalid("gt_jitter proposals need ground truth".into()))?;
            let mut v = jitter_proposals(gts, jitter, copies, opts.image_w, opts.image_h, opts.seed);
            v.truncate(opts.num_proposals);
            Ok(v)
        }
        ProposalMode::Learned => {
            let mut ctx = Ctx::inference(params);
            let levels: Vec<Var> = pyramid
                .levels
                .iter()
                .map(|l| {
                    let s = l.shape();
                    ctx.g.constant(l.clone().reshape(&[1, s[0], s[1], s[2]]).expect("level"))
                })
                .collect();
            let r = rpn_graph(&mut ctx, &levels)?;
            let an = anchors(&pyramid.shapes(), cfg.anchor_scale);
            if an.len() != r.layout.tokens_per_image() {
                return Err(Error::Shape(format!("{} anchors for {} tokens", an.len(), r.layout.tokens_per_image())));
            }
            Ok(decode_proposals(
                ctx.g.value(r.objectness),
                ctx.g.value(r.deltas),
                0,
                &an,
                opts.image_w,
                opts.image_h,
                opts.num_proposals,
                opts.nms_iou,
            )
            .into_iter()
            .map(|(b, _)| b)
            .collect())
        }
    }
}
