//! Backbone and top-down feature pyramid.
//!
//! Stem (stride 2) and three stride-2 stages give maps at strides 4, 8 and
//! 16. Lateral 1×1 projections bring every stage to `C` channels; coarser
//! levels are upsampled and added before a 3×3 output convolution.

use alloc::format;
use alloc::vec::Vec;

use crate::detector::config::{ModelConfig, STRIDES};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ModelParams};
use crate::real::Real;
use crate::tensor::Tensor;

/// Multi-scale maps with a shared channel count, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    /// `[C, H_i, W_i]` per level.
    pub levels: Vec<Tensor<T>>,
    pub strides: Vec<usize>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, |l| l.dim(0))
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.dim(1), l.dim(2))).collect()
    }

    /// Asserts the pyramid invariants: equal channels, increasing strides.
    pub fn check(&self) -> Result<()> {
        let c = self.channels();
        if self.levels.iter().any(|l| l.dim(0) != c) {
            return Err(Error::Shape("pyramid levels disagree on channel count".into()));
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) || self.strides.len() != self.levels.len() {
            return Err(Error::Shape("pyramid strides must be strictly increasing".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_params<T: Real>(cfg: &ModelConfig, init: &mut Init, p: &mut ModelParams<T>) -> Result<()> {
    let w = cfg.backbone_widths;
    init.conv(p, "backbone.stem.conv", w[0], 3, 3, false)?;
    init.batch_norm(p, "backbone.stem.bn", w[0])?;
    for s in 1..4 {
        init.conv(p, &format!("backbone.s{s}.down"), w[s], w[s - 1], 3, false)?;
        init.batch_norm(p, &format!("backbone.s{s}.down_bn"), w[s])?;
        init.conv(p, &format!("backbone.s{s}.conv"), w[s], w[s], 3, false)?;
        init.batch_norm(p, &format!("backbone.s{s}.bn"), w[s])?;
    }
    for (i, &wi) in w[1..].iter().enumerate() {
        init.conv(p, &format!("fpn.lateral{i}"), cfg.channels, wi, 1, true)?;
        init.conv(p, &format!("fpn.out{i}"), cfg.channels, cfg.channels, 3, true)?;
    }
    Ok(())
}

/// Rejects inputs whose spatial size does not divide into every stride.
pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    for &s in STRIDES.iter().rev() {
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by stride {s}")));
        }
    }
    Ok(())
}

/// Builds a normalised `[B, 3, H, W]` input leaf from image pixels.
pub fn input_batch<T: Real>(ctx: &mut Ctx<'_, T>, images: &[&Tensor<f32>]) -> Result<Var> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("image tensor must be [3, H, W], got {shape:?}")));
    }
    check_input_dims(shape[1], shape[2])?;
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        data.extend(im.data().iter().map(|&v| T::from_f64((v as f64 - 0.5) / 0.25)));
    }
    let t = Tensor::from_vec(&[images.len(), 3, shape[1], shape[2]], data)?;
    Ok(ctx.g.constant(t))
}

/// Encoder forward on a `[B, 3, H, W]` input; returns one `[B, C, H_i, W_i]`
/// node per level.
pub fn forward<T: Real>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
    let s = ctx.g.shape(x).to_vec();
    check_input_dims(s[2], s[3])?;
    let mut h = ctx.conv_bn_relu(x, "backbone.stem.conv", "backbone.stem.bn", 2, 1)?;
    let mut stages = Vec::with_capacity(3);
    for st in 1..4 {
        h = ctx.conv_bn_relu(h, &format!("backbone.s{st}.down"), &format!("backbone.s{st}.down_bn"), 2, 1)?;
        h = ctx.conv_bn_relu(h, &format!("backbone.s{st}.conv"), &format!("backbone.s{st}.bn"), 1, 1)?;
        stages.push(h);
    }
    let laterals: Vec<Var> = stages
        .iter()
        .enumerate()
        .map(|(i, &f)| ctx.conv(f, &format!("fpn.lateral{i}"), 1, 0))
        .collect::<Result<_>>()?;
    let mut merged = alloc::vec![laterals[2]; 3];
    for i in (0..2).rev() {
        let up = ctx.g.upsample2x(merged[i + 1]);
        merged[i] = ctx.g.add(laterals[i], up);
    }
    let outs: Vec<Var> = merged
        .iter()
        .enumerate()
        .map(|(i, &m)| ctx.conv(m, &format!("fpn.out{i}"), 1, 1))
        .collect::<Result<_>>()?;
    let c = ctx.g.shape(outs[0])[1];
    if outs.iter().any(|&o| ctx.g.shape(o)[1] != c) {
        return Err(Error::Shape("pyramid levels disagree on channel count".into()));
    }
    Ok(outs)
}

/// Splits batched level nodes into per-image pyramids.
pub fn to_pyramids<T: Real>(ctx: &Ctx<'_, T>, levels: &[Var]) -> Vec<FeaturePyramid<T>> {
    let b = ctx.g.shape(levels[0])[0];
    (0..b)
        .map(|i| FeaturePyramid {
            levels: levels.iter().map(|&l| ctx.g.value(l).index0(i)).collect(),
            strides: STRIDES.to_vec(),
        })
        .collect()
}

/// Inference-mode pyramid of one `[3, H, W]` image.
pub fn encode<T: Real>(image: &Tensor<f32>, params: &ModelParams<T>) -> Result<FeaturePyramid<T>> {
    let mut ctx = Ctx::inference(params);
    let x = input_batch(&mut ctx, &[image])?;
    let levels = forward(&mut ctx, x)?;
    let pyr = to_pyramids(&ctx, &levels).remove(0);
    pyr.check()?;
    Ok(pyr)
}
