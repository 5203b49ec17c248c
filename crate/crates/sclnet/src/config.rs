//! Run configuration: one flat TOML key list shared by every command.
//!
//! Values resolve as defaults, then the config file, then command-line
//! overrides. Unknown keys are rejected at every layer. The resolved config
//! is echoed as `config.toml` next to each command's outputs and can be fed
//! back with `--config` to reproduce the run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sclnet_core::data::{ScaleGrouping, SynthConfig};
use sclnet_core::detector::{InferConfig, ModelConfig, ProposalMode, TrainConfig};
use sclnet_core::eval::{ApOptions, EvalOptions, Interpolation};

use crate::error::{CliError, CliResult};

/// Every tunable, grouped by prefix: `synth_`/`stats_` (data), model keys,
/// training keys, `infer_` and `eval_`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub synth_images: usize,
    pub synth_width: usize,
    pub synth_height: usize,
    pub synth_categories: usize,
    pub synth_objects_min: usize,
    pub synth_objects_max: usize,
    pub synth_scale_min: f64,
    pub synth_scale_max: f64,
    pub synth_max_aspect: f64,
    /// Non-empty forces one square object of each side length per image.
    pub synth_forced_scales: Vec<f64>,
    pub synth_background_noise: f64,
    /// `"all_objects"` or `"per_category"`.
    pub stats_grouping: String,

    /// `0` takes the category count of the dataset.
    pub num_classes: usize,
    pub channels: usize,
    pub backbone_widths: [usize; 4],
    pub enable_cscl: bool,
    pub enable_iccl: bool,
    pub decoder_kernels: Vec<usize>,
    pub attn_heads: usize,
    pub attn_points: usize,
    pub iccl_heads: usize,
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub head_hidden: usize,
    pub anchor_scale: f64,
    pub cascade_ious: Vec<f64>,

    pub lambda_comple: f64,
    pub lambda_detect: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub num_proposals: usize,
    pub rpn_nms_iou: f64,
    pub rois_per_image: usize,
    pub roi_pos_fraction: f64,
    pub rpn_samples_per_image: usize,
    /// `"learned"` or `"gt_jitter"`.
    pub proposal_mode: String,
    pub gt_jitter: f64,
    pub gt_jitter_copies: usize,
    pub sigma_scale: f64,
    pub contra_feat_weight: f64,
    pub contra_label_weight: f64,
    pub contra_positives_only: bool,
    pub contra_every_stage: bool,

    pub infer_num_proposals: usize,
    pub infer_rpn_nms_iou: f64,
    pub infer_nms_iou: f64,
    pub infer_score_thresh: f64,
    pub infer_max_detections: usize,

    /// `"per_positive"` or `"coco101"`.
    pub eval_interpolation: String,
    pub eval_iou_thresholds: Vec<f64>,
    pub eval_max_detections: usize,
    pub eval_far_iou: f64,
    pub eval_far_score: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let i = InferConfig::default();
        let e = EvalOptions::default();
        let (gt_jitter, gt_jitter_copies) = match t.proposal_mode {
            ProposalMode::GtJitter { jitter, copies } => (jitter, copies),
            ProposalMode::Learned => (0.1, 8),
        };
        RunConfig {
            seed: t.seed,
            synth_images: s.num_images,
            synth_width: s.width,
            synth_height: s.height,
            synth_categories: s.num_categories,
            synth_objects_min: s.objects_min,
            synth_objects_max: s.objects_max,
            synth_scale_min: s.scale_min,
            synth_scale_max: s.scale_max,
            synth_max_aspect: s.max_aspect,
            synth_forced_scales: s.forced_scales,
            synth_background_noise: s.background_noise,
            stats_grouping: "all_objects".into(),
            num_classes: 0,
            channels: m.channels,
            backbone_widths: m.backbone_widths,
            enable_cscl: m.enable_cscl,
            enable_iccl: m.enable_iccl,
            decoder_kernels: m.decoder_kernels,
            attn_heads: m.attn_heads,
            attn_points: m.attn_points,
            iccl_heads: m.iccl_heads,
            roi_size: m.roi_size,
            roi_sampling: m.roi_sampling,
            head_hidden: m.head_hidden,
            anchor_scale: m.anchor_scale,
            cascade_ious: m.cascade_ious,
            lambda_comple: t.lambda_comple,
            lambda_detect: t.lambda_detect,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            steps: t.steps,
            batch_size: t.batch_size,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            num_proposals: t.num_proposals,
            rpn_nms_iou: t.rpn_nms_iou,
            rois_per_image: t.rois_per_image,
            roi_pos_fraction: t.roi_pos_fraction,
            rpn_samples_per_image: t.rpn_samples_per_image,
            proposal_mode: match t.proposal_mode {
                ProposalMode::Learned => "learned".into(),
                ProposalMode::GtJitter { .. } => "gt_jitter".into(),
            },
            gt_jitter,
            gt_jitter_copies,
            sigma_scale: t.sigma_scale,
            contra_feat_weight: t.contra_feat_weight,
            contra_label_weight: t.contra_label_weight,
            contra_positives_only: t.contra_positives_only,
            contra_every_stage: t.contra_every_stage,
            infer_num_proposals: i.num_proposals,
            infer_rpn_nms_iou: i.rpn_nms_iou,
            infer_nms_iou: i.nms_iou,
            infer_score_thresh: i.score_thresh,
            infer_max_detections: i.max_detections,
            eval_interpolation: "per_positive".into(),
            eval_iou_thresholds: e.ap.iou_thresholds,
            eval_max_detections: e.ap.max_detections,
            eval_far_iou: e.far_iou,
            eval_far_score: e.far_score,
        }
    }
}

/// Parses the right-hand side of `key=value`: any TOML value, else a bare
/// string.
pub fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> CliResult<(String, toml::Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

fn from_table(table: toml::Table, origin: &str) -> CliResult<RunConfig> {
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> CliResult<RunConfig> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let t: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                // Rejects unknown keys with the file named before flags can mask them.
                from_table(t.clone(), &p.display().to_string())?;
                t
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        from_table(table, "command line")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Writes the resolved config as `config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        let p = dir.join("config.toml");
        fs::write(&p, self.to_toml()).map_err(|e| CliError::io(&p, e))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.grouping()?;
        self.interpolation()?;
        self.proposal()?;
        if !self.eval_iou_thresholds.iter().all(|t| (0.0..=1.0).contains(t)) || self.eval_iou_thresholds.is_empty() {
            return Err(CliError::Config("eval_iou_thresholds must be non-empty and within [0, 1]".into()));
        }
        Ok(())
    }

    pub fn grouping(&self) -> CliResult<ScaleGrouping> {
        match self.stats_grouping.as_str() {
            "all_objects" => Ok(ScaleGrouping::AllObjects),
            "per_category" => Ok(ScaleGrouping::PerCategory),
            g => Err(CliError::Config(format!("stats_grouping `{g}` is not all_objects or per_category"))),
        }
    }

    pub fn interpolation(&self) -> CliResult<Interpolation> {
        match self.eval_interpolation.as_str() {
            "per_positive" => Ok(Interpolation::PerPositive),
            "coco101" => Ok(Interpolation::Coco101),
            i => Err(CliError::Config(format!("eval_interpolation `{i}` is not per_positive or coco101"))),
        }
    }

    fn proposal(&self) -> CliResult<ProposalMode> {
        match self.proposal_mode.as_str() {
            "learned" => Ok(ProposalMode::Learned),
            "gt_jitter" => Ok(ProposalMode::GtJitter { jitter: self.gt_jitter, copies: self.gt_jitter_copies }),
            m => Err(CliError::Config(format!("proposal_mode `{m}` is not learned or gt_jitter"))),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_images: self.synth_images,
            width: self.synth_width,
            height: self.synth_height,
            num_categories: self.synth_categories,
            objects_min: self.synth_objects_min,
            objects_max: self.synth_objects_max,
            scale_min: self.synth_scale_min,
            scale_max: self.synth_scale_max,
            max_aspect: self.synth_max_aspect,
            forced_scales: self.synth_forced_scales.clone(),
            background_noise: self.synth_background_noise,
        }
    }

    /// Model settings for a dataset of `dataset_classes` categories.
    pub fn model(&self, dataset_classes: usize) -> CliResult<ModelConfig> {
        let num_classes = if self.num_classes == 0 { dataset_classes } else { self.num_classes };
        if num_classes < dataset_classes {
            return Err(CliError::Config(format!(
                "num_classes {num_classes} is below the dataset's {dataset_classes} categories"
            )));
        }
        let m = ModelConfig {
            num_classes,
            channels: self.channels,
            backbone_widths: self.backbone_widths,
            enable_cscl: self.enable_cscl,
            enable_iccl: self.enable_iccl,
            decoder_kernels: self.decoder_kernels.clone(),
            attn_heads: self.attn_heads,
            attn_points: self.attn_points,
            iccl_heads: self.iccl_heads,
            roi_size: self.roi_size,
            roi_sampling: self.roi_sampling,
            head_hidden: self.head_hidden,
            anchor_scale: self.anchor_scale,
            cascade_ious: self.cascade_ious.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self) -> CliResult<TrainConfig> {
        let t = TrainConfig {
            lambda_comple: self.lambda_comple,
            lambda_detect: self.lambda_detect,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            num_proposals: self.num_proposals,
            rpn_nms_iou: self.rpn_nms_iou,
            rois_per_image: self.rois_per_image,
            roi_pos_fraction: self.roi_pos_fraction,
            rpn_samples_per_image: self.rpn_samples_per_image,
            proposal_mode: self.proposal()?,
            sigma_scale: self.sigma_scale,
            contra_feat_weight: self.contra_feat_weight,
            contra_label_weight: self.contra_label_weight,
            contra_positives_only: self.contra_positives_only,
            contra_every_stage: self.contra_every_stage,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn infer(&self) -> InferConfig {
        InferConfig {
            num_proposals: self.infer_num_proposals,
            rpn_nms_iou: self.infer_rpn_nms_iou,
            nms_iou: self.infer_nms_iou,
            score_thresh: self.infer_score_thresh,
            max_detections: self.infer_max_detections,
        }
    }

    pub fn eval(&self) -> CliResult<EvalOptions> {
        Ok(EvalOptions {
            ap: ApOptions {
                iou_thresholds: self.eval_iou_thresholds.clone(),
                interpolation: self.interpolation()?,
                max_detections: self.eval_max_detections,
            },
            far_iou: self.eval_far_iou,
            far_score: self.eval_far_score,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let c = RunConfig { steps: 17, enable_iccl: false, synth_forced_scales: vec![8.0, 40.0], ..Default::default() };
        let t: toml::Table = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(from_table(t, "echo").unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::resolve(None, &[("stepz".into(), toml::Value::Integer(3))]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "steps = 5\nlr = 0.5\n").unwrap();
        let c = RunConfig::resolve(Some(&p), &[parse_assignment("steps=9").unwrap()]).unwrap();
        assert_eq!(c.steps, 9);
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.momentum, RunConfig::default().momentum);
    }

    #[test]
    fn values_parse_as_toml_then_string() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("[8.0, 40.0]"), toml::Value::Array(vec![8.0.into(), 40.0.into()]));
        assert_eq!(parse_value("coco101"), toml::Value::String("coco101".into()));
    }
}
