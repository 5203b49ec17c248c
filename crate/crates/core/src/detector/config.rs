use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Architecture hyper-parameters shared by every sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of object categories `K`; logits carry `K + 1` classes.
    pub num_classes: usize,
    /// Pyramid channel count `C`.
    pub channels: usize,
    /// Output widths of the stem and the three backbone stages.
    pub backbone_widths: [usize; 4],
    /// Scale-complementary decoder plus its loss and fusion.
    pub enable_cscl: bool,
    /// Contrastive complement branch and its two losses.
    pub enable_iccl: bool,
    /// Kernel sizes of the decoder's branch chain.
    pub decoder_kernels: Vec<usize>,
    pub attn_heads: usize,
    pub attn_points: usize,
    pub iccl_heads: usize,
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub head_hidden: usize,
    /// Anchor side length in units of the level stride.
    pub anchor_scale: f64,
    /// Cascade IoU thresholds, one per stage.
    pub cascade_ious: Vec<f64>,
}

/// Strides of the three pyramid levels.
pub const STRIDES: [usize; 3] = [4, 8, 16];

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 10,
            channels: 32,
            backbone_widths: [16, 32, 64, 96],
            enable_cscl: true,
            enable_iccl: true,
            decoder_kernels: vec![3, 5, 7, 11],
            attn_heads: 4,
            attn_points: 4,
            iccl_heads: 4,
            roi_size: 7,
            roi_sampling: 2,
            head_hidden: 128,
            anchor_scale: 4.0,
            cascade_ious: vec![0.5, 0.6, 0.7],
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        STRIDES.len()
    }

    pub fn stages(&self) -> usize {
        self.cascade_ious.len()
    }

    /// Index of the background class.
    pub fn background(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Shape(alloc::format!(
                "channel count {} must be divisible by 4 (pixel-shuffle factor squared)",
                self.channels
            )));
        }
        if self.channels % self.attn_heads != 0 || self.channels % self.iccl_heads != 0 {
            return Err(Error::Shape(alloc::format!(
                "channel count {} must be divisible by the attention head counts",
                self.channels
            )));
        }
        if self.cascade_ious.is_empty() || self.cascade_ious.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("cascade IoU thresholds must be non-empty and increasing".into()));
        }
        if self.decoder_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("decoder kernels must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProposalMode {
    /// Region proposal head over the fused pyramid.
    Learned,
    /// Seeded jittered copies of the ground truth; test scaffolding only.
    GtJitter { jitter: f64, copies: usize },
}

/// Optimisation and loss settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_comple: f64,
    pub lambda_detect: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub num_proposals: usize,
    pub rpn_nms_iou: f64,
    pub rois_per_image: usize,
    pub roi_pos_fraction: f64,
    pub rpn_samples_per_image: usize,
    pub proposal_mode: ProposalMode,
    /// Gaussian width per unit of box scale for scale targets.
    pub sigma_scale: f64,
    pub contra_feat_weight: f64,
    pub contra_label_weight: f64,
    /// Supervise contrastive logits on positives only.
    pub contra_positives_only: bool,
    /// Apply the contrastive branch at every cascade stage (else stage 0).
    pub contra_every_stage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_comple: 1.0,
            lambda_detect: 0.3,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 50,
            steps: 1000,
            batch_size: 2,
            seed: 0,
            grad_clip: Some(10.0),
            num_proposals: 500,
            rpn_nms_iou: 0.7,
            rois_per_image: 64,
            roi_pos_fraction: 0.25,
            rpn_samples_per_image: 128,
            proposal_mode: ProposalMode::Learned,
            sigma_scale: 0.1,
            contra_feat_weight: 1.0,
            contra_label_weight: 1.0,
            contra_positives_only: true,
            contra_every_stage: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_comple > 0.0 && self.lambda_detect > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("invalid learning rate or momentum".into()));
        }
        if !(self.sigma_scale > 0.0) {
            return Err(Error::Config("sigma_scale must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `step`: linear warm-up then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let t = (step + 1) as f64 / self.warmup_steps as f64;
            return self.lr * (0.1 + 0.9 * t);
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

/// Post-processing settings for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub num_proposals: usize,
    pub rpn_nms_iou: f64,
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { num_proposals: 500, rpn_nms_iou: 0.7, nms_iou: 0.5, score_thresh: 0.05, max_detections: 100 }
    }
}
