//! Comprehensive-scale complementary learning.
//!
//! The decoder runs a chain of stride-2 convolutions with growing kernels on
//! every pyramid level, restores each branch to the level's resolution with
//! a pixel shuffle, concatenates the level input with all branch outputs and
//! reduces them back to `C` channels. A simplified multi-scale deformable
//! attention then mixes information across levels, and a per-level 1×1
//! projection predicts a single-channel scale map. Scale maps are supervised
//! with Gaussian blobs at ground-box centres whose width follows the box
//! scale; the `C`-channel output is added onto the detection pyramid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Annotation;
use crate::detector::config::{ModelConfig, STRIDES};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ModelParams, ParamKind};
use crate::real::Real;
use crate::tensor::Tensor;

/// Pixel-shuffle factor of every decoder branch.
pub const SHUFFLE: usize = 2;

/// Per-level non-negative targets, `[1, H_i, W_i]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargetMap {
    pub levels: Vec<Tensor<f64>>,
}

/// Decoder output: complement features plus single-channel scale maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementaryOutput<T> {
    pub features: FeaturePyramid<T>,
    /// `[1, H_i, W_i]` per level.
    pub scale_maps: Vec<Tensor<T>>,
}

const REDUCE_GAMMA_INIT: f64 = 0.1;

pub(crate) fn init_params<T: Real>(cfg: &ModelConfig, init: &mut Init, p: &mut ModelParams<T>) -> Result<()> {
    let c = cfg.channels;
    let r2 = SHUFFLE * SHUFFLE;
    for (j, &k) in cfg.decoder_kernels.iter().enumerate() {
        let std = libm::sqrt(1.0 / (c * k * k) as f64);
        init.conv_std(p, &format!("cscl.branch{j}"), c * r2, c, k, std, 0.0)?;
    }
    let cat = c * (cfg.decoder_kernels.len() + 1);
    init.conv(p, "cscl.reduce", c, cat, 1, false)?;
    // The decoder output joins the encoder pyramid additively; a small
    // initial gain keeps the fused features close to the encoder's.
    for i in 0..cfg.levels() {
        init.batch_norm_with_gamma(p, &format!("cscl.reduce_bn{i}"), c, REDUCE_GAMMA_INIT)?;
    }
    let (heads, m, kp) = (cfg.attn_heads, cfg.levels(), cfg.attn_points);
    // Offsets start on a radial pattern around the reference point, one
    // direction per head; attention weights start uniform.
    p.insert("cscl.attn.offsets.weight", ParamKind::Weight, Tensor::zeros(&[heads * m * kp * 2, c]))?;
    let mut bias = vec![T::zero(); heads * m * kp * 2];
    for h in 0..heads {
        let th = core::f64::consts::TAU * h as f64 / heads as f64;
        let (dx, dy) = (libm::cos(th), libm::sin(th));
        let norm = dx.abs().max(dy.abs());
        for l in 0..m {
            for pt in 0..kp {
                let i = ((h * m + l) * kp + pt) * 2;
                bias[i] = T::from_f64(dx / norm * (pt + 1) as f64);
                bias[i + 1] = T::from_f64(dy / norm * (pt + 1) as f64);
            }
        }
    }
    p.insert("cscl.attn.offsets.bias", ParamKind::Weight, Tensor::from_vec(&[heads * m * kp * 2], bias)?)?;
    p.insert("cscl.attn.weights.weight", ParamKind::Weight, Tensor::zeros(&[heads * m * kp, c]))?;
    p.insert("cscl.attn.weights.bias", ParamKind::Weight, Tensor::zeros(&[heads * m * kp]))?;
    let xavier = libm::sqrt(1.0 / c as f64);
    init.linear(p, "cscl.attn.value", c, c, xavier)?;
    // Zero output projection: attention starts as the identity on the
    // residual path.
    p.insert("cscl.attn.out.weight", ParamKind::Weight, Tensor::zeros(&[c, c]))?;
    p.insert("cscl.attn.out.bias", ParamKind::Weight, Tensor::zeros(&[c]))?;
    for i in 0..cfg.levels() {
        init.conv_std(p, &format!("cscl.scale_head{i}"), 1, c, 1, 0.01, 0.0)?;
    }
    Ok(())
}

/// Graph nodes produced by [`decoder_graph`].
pub struct DecoderVars {
    pub features: Vec<Var>,
    pub scale_maps: Vec<Var>,
    /// Softmax-normalised attention weights, `[B·Q, heads·M·points]`.
    pub attn_weights: Var,
}

fn check_decoder_shape(cfg: &ModelConfig, c: usize) -> Result<()> {
    if c % (SHUFFLE * SHUFFLE) != 0 {
        return Err(Error::Shape(format!("decoder channel count {c} is not divisible by {}", SHUFFLE * SHUFFLE)));
    }
    if c % cfg.attn_heads != 0 {
        return Err(Error::Shape(format!("decoder channel count {c} is not divisible by {} heads", cfg.attn_heads)));
    }
    Ok(())
}

/// Scale-complementary decoder on batched `[B, C, H_i, W_i]` levels.
pub fn decoder_graph<T: Real>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, levels: &[Var]) -> Result<DecoderVars> {
    let c = ctx.g.shape(levels[0])[1];
    check_decoder_shape(cfg, c)?;
    if levels.len() != cfg.levels() {
        return Err(Error::Param(format!("decoder expects {} levels, got {}", cfg.levels(), levels.len())));
    }
    let mut reduced = Vec::with_capacity(levels.len());
    for (i, &lvl) in levels.iter().enumerate() {
        let (h, w) = (ctx.g.shape(lvl)[2], ctx.g.shape(lvl)[3]);
        let mut maps = vec![lvl];
        let mut prev = lvl;
        for (j, &k) in cfg.decoder_kernels.iter().enumerate() {
            let y = ctx.conv(prev, &format!("cscl.branch{j}"), 2, k / 2)?;
            let y = ctx.g.pixel_shuffle(y, SHUFFLE);
            let y = ctx.g.crop(y, h, w);
            maps.push(y);
            prev = y;
        }
        let cat = ctx.g.concat_channels(&maps);
        let r = ctx.conv_bn_relu(cat, "cscl.reduce", &format!("cscl.reduce_bn{i}"), 1, 0)?;
        reduced.push(r);
    }

    let (heads, m, kp) = (cfg.attn_heads, cfg.levels(), cfg.attn_points);
    let (tokens, layout) = ctx.g.flatten_levels(&reduced);
    let off = ctx.linear(tokens, "cscl.attn.offsets")?;
    let logits = ctx.linear(tokens, "cscl.attn.weights")?;
    let attn = ctx.g.softmax(logits, m * kp);
    let values = ctx.linear(tokens, "cscl.attn.value")?;
    let sampled = ctx.g.deform_sample(values, off, attn, &layout, heads, kp);
    let proj = ctx.linear(sampled, "cscl.attn.out")?;
    let mixed = ctx.g.add(tokens, proj);

    let mut features = Vec::with_capacity(m);
    let mut scale_maps = Vec::with_capacity(m);
    for i in 0..m {
        let f = ctx.g.unflatten_level(mixed, &layout, i);
        scale_maps.push(ctx.conv(f, &format!("cscl.scale_head{i}"), 1, 0)?);
        features.push(f);
    }
    Ok(DecoderVars { features, scale_maps, attn_weights: attn })
}

/// Inference-mode decoder on one image's pyramid.
pub fn decoder_forward<T: Real>(
    pyramid: &FeaturePyramid<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<ComplementaryOutput<T>> {
    check_decoder_shape(cfg, pyramid.channels())?;
    let mut ctx = Ctx::inference(params);
    let levels: Vec<Var> = pyramid
        .levels
        .iter()
        .map(|l| {
            let s = l.shape();
            ctx.g.constant(l.clone().reshape(&[1, s[0], s[1], s[2]]).expect("level shape"))
        })
        .collect();
    let out = decoder_graph(&mut ctx, cfg, &levels)?;
    Ok(ComplementaryOutput {
        features: FeaturePyramid {
            levels: out.features.iter().map(|&v| ctx.g.value(v).index0(0)).collect(),
            strides: pyramid.strides.clone(),
        },
        scale_maps: out.scale_maps.iter().map(|&v| ctx.g.value(v).index0(0)).collect(),
    })
}

/// Gaussian width for a box of size `w × h` in an image whose shorter side
/// is `image_dim`.
pub fn sigma_for(w: f64, h: f64, sigma_scale: f64, image_dim: f64) -> f64 {
    (sigma_scale * libm::sqrt(w * h)).clamp(0.5, (image_dim / 4.0).max(0.5))
}

/// Unit-sum 1-d Gaussian truncated at `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as i64;
    let mut k: Vec<f64> = (-r..=r).map(|t| libm::exp(-((t * t) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Pixel holding a box centre, clamped into the image.
pub fn center_pixel(a: &Annotation, width: usize, height: usize) -> (usize, usize) {
    let cx = libm::round(a.bbox.x_center);
    let cy = libm::round(a.bbox.y_center);
    let x = cx.clamp(0.0, (width - 1) as f64);
    let y = cy.clamp(0.0, (height - 1) as f64);
    if x != cx || y != cy {
        log::warn!("annotation {} centre ({cx}, {cy}) clamped into the image", a.id);
    }
    (x as usize, y as usize)
}

/// Full-resolution `[1, H, W]` scale target: one unit-mass Gaussian per box.
pub fn full_resolution_target(annotations: &[Annotation], width: usize, height: usize, sigma_scale: f64) -> Tensor<f64> {
    let mut map = vec![0.0f64; width * height];
    let dim = width.min(height) as f64;
    for a in annotations {
        let (cx, cy) = center_pixel(a, width, height);
        let sigma = sigma_for(a.bbox.width, a.bbox.height, sigma_scale, dim);
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as i64;
        for (dy, ky) in k.iter().enumerate() {
            let y = cy as i64 + dy as i64 - r;
            if y < 0 || y >= height as i64 {
                continue;
            }
            for (dx, kx) in k.iter().enumerate() {
                let x = cx as i64 + dx as i64 - r;
                if x < 0 || x >= width as i64 {
                    continue;
                }
                map[y as usize * width + x as usize] += ky * kx;
            }
        }
    }
    Tensor::from_vec(&[1, height, width], map).expect("target shape")
}

/// Average pooling of a `[1, H, W]` map by exact integer factors.
pub fn average_pool(map: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let (h, w) = (map.dim(1), map.dim(2));
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(Error::Shape(format!("cannot average-pool {h}x{w} to {out_h}x{out_w} by integer factors")));
    }
    let (fy, fx) = (h / out_h, w / out_w);
    let inv = 1.0 / (fy * fx) as f64;
    let src = map.data();
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..h {
        for x in 0..w {
            out[(y / fy) * out_w + x / fx] += src[y * w + x] * inv;
        }
    }
    Tensor::from_vec(&[1, out_h, out_w], out)
}

/// Scale-complementary ground truth for one image; every level is pooled
/// directly from the full-resolution map.
pub fn make_scale_target(
    annotations: &[Annotation],
    width: usize,
    height: usize,
    pyramid_shapes: &[(usize, usize)],
    sigma_scale: f64,
) -> Result<ScaleTargetMap> {
    let full = full_resolution_target(annotations, width, height, sigma_scale);
    let levels = pyramid_shapes.iter().map(|&(h, w)| average_pool(&full, h, w)).collect::<Result<_>>()?;
    Ok(ScaleTargetMap { levels })
}

/// Level shapes of an image's pyramid.
pub fn pyramid_shapes(width: usize, height: usize) -> Vec<(usize, usize)> {
    STRIDES.iter().map(|&s| (height.div_ceil(s), width.div_ceil(s))).collect()
}

fn check_level_shapes<T: Real>(predicted: &[Tensor<T>], target: &ScaleTargetMap) -> Result<()> {
    if predicted.len() != target.levels.len() {
        return Err(Error::Shape(format!(
            "{} predicted levels vs {} target levels",
            predicted.len(),
            target.levels.len()
        )));
    }
    for (i, (p, t)) in predicted.iter().zip(&target.levels).enumerate() {
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!("level {i}: prediction {:?} vs target {:?}", p.shape(), t.shape())));
        }
    }
    Ok(())
}

/// Mean over levels of the per-level mean squared error.
pub fn scale_comple_loss<T: Real>(predicted: &[Tensor<T>], target: &ScaleTargetMap) -> Result<f64> {
    check_level_shapes(predicted, target)?;
    let m = predicted.len().max(1) as f64;
    let total: f64 = predicted
        .iter()
        .zip(&target.levels)
        .map(|(p, t)| {
            let n = p.numel().max(1) as f64;
            p.data().iter().zip(t.data()).map(|(&a, &b)| (a.as_f64() - b) * (a.as_f64() - b)).sum::<f64>() / n
        })
        .sum();
    Ok(total / m)
}

/// Graph form of [`scale_comple_loss`] over a batch: `preds[i]` is
/// `[B, 1, H_i, W_i]`, `targets[b]` the map of image `b`.
pub fn scale_comple_loss_graph<T: Real>(ctx: &mut Ctx<'_, T>, preds: &[Var], targets: &[ScaleTargetMap]) -> Result<Var> {
    let mut terms = Vec::with_capacity(preds.len());
    for (i, &p) in preds.iter().enumerate() {
        let shape = ctx.g.shape(p).to_vec();
        let mut data = Vec::with_capacity(shape.iter().product());
        for (b, t) in targets.iter().enumerate() {
            let lv = t.levels.get(i).ok_or_else(|| Error::Shape(format!("target missing level {i}")))?;
            if lv.shape() != &shape[1..] {
                return Err(Error::Shape(format!("level {i} of image {b}: target {:?} vs {:?}", lv.shape(), &shape[1..])));
            }
            data.extend(lv.data().iter().map(|&v| T::from_f64(v)));
        }
        let tgt = Tensor::from_vec(&shape, data)?;
        terms.push(ctx.g.mse_const(p, tgt));
    }
    let s = ctx.g.sum(&terms);
    Ok(ctx.g.scale(s, T::one() / T::from_f64(preds.len() as f64)))
}

/// Level-wise elementwise sum; adds no parameters.
pub fn fuse<T: Real>(pyramid: &FeaturePyramid<T>, complement: &ComplementaryOutput<T>) -> Result<FeaturePyramid<T>> {
    fuse_pyramids(pyramid, &complement.features)
}

pub fn fuse_pyramids<T: Real>(a: &FeaturePyramid<T>, b: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
    if a.levels.len() != b.levels.len() {
        return Err(Error::Shape("fuse: level count mismatch".into()));
    }
    let levels = a
        .levels
        .iter()
        .zip(&b.levels)
        .enumerate()
        .map(|(i, (x, y))| x.add(y).map_err(|_| Error::Shape(format!("fuse: level {i} shape mismatch"))))
        .collect::<Result<_>>()?;
    Ok(FeaturePyramid { levels, strides: a.strides.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn ann(x: f64, y: f64, s: f64) -> Annotation {
        Annotation { id: 1, bbox: BBox::new(x, y, s, s).unwrap(), category_id: 0 }
    }

    #[test]
    fn no_annotations_zero_target() {
        let t = make_scale_target(&[], 64, 64, &pyramid_shapes(64, 64), 0.1).unwrap();
        assert_eq!(t.levels.len(), 3);
        assert!(t.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_box_peak_and_mass() {
        let full = full_resolution_target(&[ann(32.0, 32.0, 20.0)], 64, 64, 0.1);
        let d = full.data();
        let peak = d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!((peak / 64, peak % 64), (32, 32));
        assert!((full.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pooling_preserves_mean() {
        let full = full_resolution_target(&[ann(20.0, 30.0, 12.0), ann(40.0, 10.0, 6.0)], 64, 64, 0.1);
        for (h, w) in pyramid_shapes(64, 64) {
            let p = average_pool(&full, h, w).unwrap();
            let f = (64 * 64 / (h * w)) as f64;
            assert!((p.sum() * f - full.sum()).abs() < 1e-9);
        }
        assert!(average_pool(&full, 5, 5).is_err());
    }

    #[test]
    fn sigma_clamped() {
        assert_eq!(sigma_for(1.0, 1.0, 0.1, 64.0), 0.5);
        assert_eq!(sigma_for(400.0, 400.0, 0.1, 64.0), 16.0);
        assert!((sigma_for(20.0, 20.0, 0.1, 64.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_closed_forms() {
        let t = make_scale_target(&[ann(20.0, 20.0, 10.0)], 32, 32, &pyramid_shapes(32, 32), 0.1).unwrap();
        let same: Vec<Tensor<f64>> = t.levels.clone();
        assert!(scale_comple_loss(&same, &t).unwrap() <= 1e-12);
        let shifted: Vec<Tensor<f64>> = t.levels.iter().map(|l| l.map(|v| v + 0.25)).collect();
        assert!((scale_comple_loss(&shifted, &t).unwrap() - 0.0625).abs() <= 1e-12);
        let bad = vec![Tensor::<f64>::zeros(&[1, 2, 2]); 3];
        let err = scale_comple_loss(&bad, &t).unwrap_err();
        assert!(format!("{err}").contains("level 0"));
    }
}
