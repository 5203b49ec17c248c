//! Annotation-free inference.

use alloc::vec::Vec;

use super::config::{InferConfig, ModelConfig, ProposalMode};
use super::head::cascade_forward;
use super::rpn::{propose, ProposalOptions};
use super::Detection;
use crate::boxes::{nms, BBox};
use crate::cscl::{self, ComplementaryOutput};
use crate::encoder::{self, FeaturePyramid};
use crate::error::Result;
use crate::params::ModelParams;
use crate::real::Real;
use crate::tensor::Tensor;

/// Intermediate maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps<T> {
    pub raw: FeaturePyramid<T>,
    pub fused: FeaturePyramid<T>,
    pub complement: Option<ComplementaryOutput<T>>,
}

/// Encoder pyramid, decoder output and their fusion for one `[3, H, W]`
/// image.
pub fn feature_maps<T: Real>(pixels: &Tensor<f32>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<FeatureMaps<T>> {
    let raw = encoder::encode(pixels, params)?;
    if !cfg.enable_cscl {
        return Ok(FeatureMaps { fused: raw.clone(), raw, complement: None });
    }
    let comp = cscl::decoder_forward(&raw, params, cfg)?;
    let fused = cscl::fuse(&raw, &comp)?;
    Ok(FeatureMaps { raw, fused, complement: Some(comp) })
}

/// Per-class NMS over final-stage boxes; best first, capped.
pub fn postprocess(boxes: &[BBox], probs: &[Vec<f64>], num_classes: usize, icfg: &InferConfig) -> Vec<Detection> {
    let mut out = Vec::new();
    for k in 0..num_classes {
        let idx: Vec<usize> = (0..boxes.len()).filter(|&i| probs[i][k] >= icfg.score_thresh).collect();
        if idx.is_empty() {
            continue;
        }
        let bx: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
        let sc: Vec<f64> = idx.iter().map(|&i| probs[i][k]).collect();
        for j in nms(&bx, &sc, icfg.nms_iou) {
            out.push(Detection { bbox: bx[j], category_id: k, score: sc[j] });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.category_id.cmp(&b.category_id)));
    out.truncate(icfg.max_detections);
    out
}

/// Detections for one `[3, H, W]` image.
pub fn infer<T: Real>(pixels: &Tensor<f32>, params: &ModelParams<T>, cfg: &ModelConfig, icfg: &InferConfig) -> Result<Vec<Detection>> {
    let (h, w) = (pixels.dim(1), pixels.dim(2));
    let maps = feature_maps(pixels, params, cfg)?;
    let opts = ProposalOptions { num_proposals: icfg.num_proposals, nms_iou: icfg.rpn_nms_iou, image_w: w, image_h: h, seed: 0 };
    let proposals = propose(&maps.fused, params, cfg, ProposalMode::Learned, None, &opts)?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let out = cascade_forward(&maps.fused, &proposals, params, cfg, w, h)?;
    Ok(postprocess(&out.boxes, &out.probs, cfg.num_classes, icfg))
}
