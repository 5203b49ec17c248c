//! End-to-end detector: proposals, cascade head, joint objective, training
//! and inference.

pub mod config;
pub mod head;
pub mod infer;
pub mod rpn;
pub mod train;

use alloc::format;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::params::{Init, ModelParams};
use crate::real::Real;

pub use config::{InferConfig, ModelConfig, ProposalMode, TrainConfig, STRIDES};
pub use head::{cascade_forward, CascadeOutput, StageOutput};
pub use infer::{feature_maps, infer, FeatureMaps};
pub use rpn::{propose, ProposalOptions};
pub use train::{forward_losses, LossVars, SamplePlan, Trainer};

/// One scored box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category_id: usize,
    pub score: f64,
}

/// Scalar loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_contra_feat: f64,
    pub l_contra_label: f64,
    pub l_comple: f64,
    pub l_detect: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Composes the derived terms; fails on any non-finite part.
    pub fn from_parts(
        l_cls: f64,
        l_reg: f64,
        l_contra_feat: f64,
        l_contra_label: f64,
        l_comple: f64,
        cfg: &TrainConfig,
    ) -> Result<LossBreakdown> {
        let l_detect = l_cls + l_reg + l_contra_feat + l_contra_label;
        let b = LossBreakdown {
            l_cls,
            l_reg,
            l_contra_feat,
            l_contra_label,
            l_comple,
            l_detect,
            l_total: total_loss(l_comple, l_detect, cfg),
        };
        b.check()?;
        Ok(b)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_reg, self.l_contra_feat, self.l_contra_label, self.l_comple, self.l_detect, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn check(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{self:?}")))
        }
    }
}

/// Weighted joint objective.
pub fn total_loss(l_comple: f64, l_detect: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_comple * l_comple + cfg.lambda_detect * l_detect
}

fn module_seed(seed: u64, module: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(module)
}

/// Fresh parameters. Every sub-network draws from its own stream, so the
/// ablation toggles never change the shared parts' initialisation.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut p = ModelParams::new();
    crate::encoder::init_params(cfg, &mut Init::new(module_seed(seed, 1)), &mut p)?;
    if cfg.enable_cscl {
        crate::cscl::init_params(cfg, &mut Init::new(module_seed(seed, 2)), &mut p)?;
    }
    rpn::init_params(cfg, &mut Init::new(module_seed(seed, 3)), &mut p)?;
    head::init_params(cfg, &mut Init::new(module_seed(seed, 4)), &mut p)?;
    if cfg.enable_iccl {
        crate::iccl::init_params(cfg, &mut Init::new(module_seed(seed, 5)), &mut p)?;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_objective_arithmetic() {
        let cfg = TrainConfig::default();
        assert_eq!(total_loss(0.4, 1.0, &cfg), 0.7);
        assert_eq!(total_loss(0.0, 0.0, &cfg), 0.0);
        let step = total_loss(0.4, 2.0, &cfg) - total_loss(0.4, 1.0, &cfg);
        assert!((step - cfg.lambda_detect).abs() < 1e-15);
    }

    #[test]
    fn breakdown_rejects_nan() {
        let e = LossBreakdown::from_parts(f64::NAN, 0.0, 0.0, 0.0, 0.0, &TrainConfig::default()).unwrap_err();
        assert!(matches!(e, Error::NonFinite(_)));
    }

    #[test]
    fn ablation_toggles_keep_shared_init() {
        let full = init_params::<f32>(&ModelConfig::default(), 3).unwrap();
        let base = ModelConfig { enable_cscl: false, enable_iccl: false, ..ModelConfig::default() };
        let base = init_params::<f32>(&base, 3).unwrap();
        assert!(base.len() < full.len());
        for e in base.entries() {
            assert_eq!(full.get(&e.name), Some(&e.value), "{}", e.name);
        }
    }
}
