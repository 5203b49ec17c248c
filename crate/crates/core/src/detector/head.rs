//! Cascade RoI head.
//!
//! Each stage pools a `P × P` block per box from the fused pyramid. A 3×3
//! convolution yields the classification-branch block used for scoring and
//! as the student of the contrastive loss; a separate fully connected branch
//! regresses box deltas. Stage `s + 1` consumes the boxes refined by stage
//! `s`.

use alloc::format;
use alloc::vec::Vec;

use super::config::{ModelConfig, STRIDES};
use crate::boxes::{decode_deltas, BBox, DeltaStds};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::{RoiSpec, Var};
use crate::params::{Ctx, Init, ModelParams};
use crate::real::Real;
use crate::tensor::Tensor;

/// Regression normalisation per stage; later stages see tighter boxes.
pub const STAGE_STDS: [DeltaStds; 3] = [
    DeltaStds([0.1, 0.1, 0.2, 0.2]),
    DeltaStds([0.05, 0.05, 0.1, 0.1]),
    DeltaStds([0.033, 0.033, 0.067, 0.067]),
];

pub fn stage_stds(stage: usize) -> DeltaStds {
    STAGE_STDS[stage.min(STAGE_STDS.len() - 1)]
}

pub(crate) fn init_params<T: Real>(cfg: &ModelConfig, init: &mut Init, p: &mut ModelParams<T>) -> Result<()> {
    let c = cfg.channels;
    let flat = c * cfg.roi_size * cfg.roi_size;
    let hid = cfg.head_hidden;
    for s in 0..cfg.stages() {
        init.conv(p, &format!("head.s{s}.cls_conv"), c, c, 3, true)?;
        for br in ["cls", "reg"] {
            init.linear(p, &format!("head.s{s}.{br}_fc1"), hid, flat, libm::sqrt(2.0 / flat as f64))?;
        }
        init.linear(p, &format!("head.s{s}.cls_out"), cfg.num_classes + 1, hid, 0.01)?;
        init.linear(p, &format!("head.s{s}.reg_out"), 4, hid, 0.001)?;
    }
    Ok(())
}

/// Pyramid level a box of linear scale `scale` is pooled from.
pub fn roi_level(scale: f64, levels: usize) -> usize {
    let l = libm::floor(libm::log2(scale.max(1.0) / 16.0));
    if l <= 0.0 {
        0
    } else {
        (l as usize).min(levels - 1)
    }
}

/// RoI records for boxes of image `batch`.
pub fn roi_specs(boxes: &[BBox], batch: usize, levels: usize) -> Vec<RoiSpec> {
    boxes
        .iter()
        .map(|b| RoiSpec { batch, level: roi_level(b.scale(), levels), x1: b.x1(), y1: b.y1(), x2: b.x2(), y2: b.y2() })
        .collect()
}

pub fn level_scales(levels: usize) -> Vec<f64> {
    STRIDES[..levels].iter().map(|&s| 1.0 / s as f64).collect()
}

/// Graph nodes of one cascade stage over `R` boxes.
pub struct StageVars {
    /// `[R, C, P, P]` pooled from the fused pyramid.
    pub pooled: Var,
    /// `[R, C, P, P]` classification-branch block, before its activation.
    pub cls_block: Var,
    /// `[R, K + 1]`.
    pub logits: Var,
    /// `[R, 4]`, normalised by [`stage_stds`].
    pub deltas: Var,
}

pub fn stage_graph<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    stage: usize,
    levels: &[Var],
    rois: &[RoiSpec],
) -> Result<StageVars> {
    if rois.is_empty() {
        return Err(Error::Invalid("cascade stage needs at least one box".into()));
    }
    let p = cfg.roi_size;
    let pooled = ctx.g.roi_align(levels, rois, p, cfg.roi_sampling, &level_scales(levels.len()));
    let pre = format!("head.s{stage}");
    let cls_block = ctx.conv(pooled, &format!("{pre}.cls_conv"), 1, 1)?;
    let act = ctx.g.relu(cls_block);
    let r = rois.len();
    let c = ctx.g.shape(pooled)[1];
    let flat_cls = ctx.g.reshape(act, &[r, c * p * p]);
    let h = ctx.linear(flat_cls, &format!("{pre}.cls_fc1"))?;
    let h = ctx.g.relu(h);
    let logits = ctx.linear(h, &format!("{pre}.cls_out"))?;
    let flat_reg = ctx.g.reshape(pooled, &[r, c * p * p]);
    let h = ctx.linear(flat_reg, &format!("{pre}.reg_fc1"))?;
    let h = ctx.g.relu(h);
    let deltas = ctx.linear(h, &format!("{pre}.reg_out"))?;
    Ok(StageVars { pooled, cls_block, logits, deltas })
}

/// Applies stage deltas to their input boxes, clipped to the image.
pub fn refine<T: Real>(boxes: &[BBox], deltas: &[T], stage: usize, image_w: usize, image_h: usize) -> Vec<BBox> {
    let stds = stage_stds(stage);
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let d = [deltas[i * 4], deltas[i * 4 + 1], deltas[i * 4 + 2], deltas[i * 4 + 3]].map(|v| v.as_f64());
            decode_deltas(b, d, stds).clip_or_min(image_w as f64, image_h as f64, 1.0)
        })
        .collect()
}

/// Outputs of one stage on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput<T> {
    pub boxes_in: Vec<BBox>,
    /// `[R, K + 1]`.
    pub logits: Tensor<T>,
    /// `[R, 4]`.
    pub deltas: Tensor<T>,
    pub boxes_out: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput<T> {
    pub stages: Vec<StageOutput<T>>,
    /// Final-stage boxes with their class probabilities (`K + 1` each).
    pub boxes: Vec<BBox>,
    pub probs: Vec<Vec<f64>>,
}

/// Runs every stage on one image's fused pyramid.
pub fn cascade_forward<T: Real>(
    fused: &FeaturePyramid<T>,
    proposals: &[BBox],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    image_w: usize,
    image_h: usize,
) -> Result<CascadeOutput<T>> {
    if proposals.is_empty() {
        return Err(Error::Invalid("cascade needs at least one proposal".into()));
    }
    let mut ctx = Ctx::inference(params);
    let levels: Vec<Var> = fused
        .levels
        .iter()
        .map(|l| {
            let s = l.shape();
            ctx.g.constant(l.clone().reshape(&[1, s[0], s[1], s[2]]).expect("level"))
        })
        .collect();
    let mut boxes = proposals.to_vec();
    let mut stages = Vec::with_capacity(cfg.stages());
    for s in 0..cfg.stages() {
        let rois = roi_specs(&boxes, 0, levels.len());
        let v = stage_graph(&mut ctx, cfg, s, &levels, &rois)?;
        let logits = ctx.g.value(v.logits).clone();
        let deltas = ctx.g.value(v.deltas).clone();
        let out = refine(&boxes, deltas.data(), s, image_w, image_h);
        stages.push(StageOutput { boxes_in: boxes, logits, deltas, boxes_out: out.clone() });
        boxes = out;
    }
    let last = stages.last().expect("at least one stage");
    let k1 = cfg.num_classes + 1;
    let probs = last
        .logits
        .data()
        .chunks_exact(k1)
        .map(|row| {
            let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| libm::exp(v.as_f64() - mx)).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    Ok(CascadeOutput { boxes, stages, probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_mapping() {
        assert_eq!(roi_level(4.0, 3), 0);
        assert_eq!(roi_level(31.9, 3), 0);
        assert_eq!(roi_level(32.0, 3), 1);
        assert_eq!(roi_level(64.0, 3), 2);
        assert_eq!(roi_level(1000.0, 3), 2);
    }

    #[test]
    fn zero_deltas_keep_boxes() {
        let b = [BBox::new(10.0, 12.0, 6.0, 4.0).unwrap()];
        assert_eq!(refine(&b, &[0.0f64; 4], 1, 64, 64), b.to_vec());
    }
}
