//! Joint objective graph and the SGD training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ProposalMode, TrainConfig};
use super::head::{refine, roi_specs, stage_graph, stage_stds};
use super::rpn::{anchors, decode_proposals, jitter_proposals, rpn_graph, sample_anchors, shuffle, AnchorSample};
use super::LossBreakdown;
use crate::boxes::{encode_deltas, BBox};
use crate::cscl;
use crate::data::{Dataset, ImageSample};
use crate::encoder;
use crate::error::{Error, Result};
use crate::graph::{RoiSpec, Var};
use crate::iccl::{self, assign_max_iou, group_by_category, Assignment};
use crate::params::{apply_bn_stats, Ctx, ModelParams, ParamKind};
use crate::real::Real;
use crate::tensor::Tensor;

/// Smooth-L1 transition point for box regression.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Everything one forward pass treats as constant: anchor samples, the boxes
/// every cascade stage sees, and the detached contrastive teacher blocks.
/// Empty fields are filled on first use; filled fields are replayed, so a
/// perturbed replay differentiates exactly what backprop differentiates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplePlan {
    pub anchors: Option<Vec<AnchorSample>>,
    /// `[stage][image]`.
    pub stage_boxes: Vec<Vec<Vec<BBox>>>,
    /// Teacher values, one `[R, C, P, P]` block set per contrastive stage.
    pub teachers: Vec<Tensor<f64>>,
}

/// Scalar graph nodes of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_cls: Var,
    pub l_reg: Var,
    pub l_contra_feat: Var,
    pub l_contra_label: Var,
    pub l_comple: Var,
    pub l_detect: Var,
    pub l_total: Var,
}

impl LossVars {
    /// Scalar values; the derived terms are recomposed in double precision
    /// so the breakdown identities hold exactly.
    pub fn breakdown<T: Real>(&self, ctx: &Ctx<'_, T>, cfg: &TrainConfig) -> Result<LossBreakdown> {
        let v = |x: Var| ctx.g.value(x).item().as_f64();
        let b = LossBreakdown::from_parts(
            v(self.l_cls),
            v(self.l_reg),
            v(self.l_contra_feat),
            v(self.l_contra_label),
            v(self.l_comple),
            cfg,
        );
        if b.is_ok() && !ctx.g.value(self.l_total).item().as_f64().is_finite() {
            return Err(Error::NonFinite(format!("graph l_total is not finite: {b:?}")));
        }
        b
    }
}

fn zero<T: Real>(ctx: &mut Ctx<'_, T>) -> Var {
    ctx.g.constant(Tensor::scalar(T::zero()))
}

fn mean_of<T: Real>(ctx: &mut Ctx<'_, T>, xs: &[Var]) -> Var {
    if xs.is_empty() {
        return zero(ctx);
    }
    let s = ctx.g.sum(xs);
    ctx.g.scale(s, T::one() / T::from_f64(xs.len() as f64))
}

/// Smooth-L1 summed over coordinates, averaged over rows.
fn box_loss<T: Real>(ctx: &mut Ctx<'_, T>, deltas: Var, rows: &[usize], targets: &[[f64; 4]]) -> Var {
    if rows.is_empty() {
        return zero(ctx);
    }
    let sel = ctx.g.select_rows(deltas, rows);
    let data = targets.iter().flat_map(|t| t.map(T::from_f64)).collect();
    let tgt = Tensor::from_vec(&[rows.len(), 4], data).expect("target shape");
    let l = ctx.g.smooth_l1(sel, tgt, T::from_f64(SMOOTH_L1_BETA));
    ctx.g.scale(l, T::from_f64(4.0))
}

/// Stage-0 training boxes of one image: proposals plus ground truth, then a
/// sample with a bounded positive share.
fn sample_rois(
    proposals: &[BBox],
    sample: &ImageSample,
    cfg: &TrainConfig,
    pos_iou: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<BBox> {
    let mut cand = proposals.to_vec();
    cand.extend(sample.annotations.iter().map(|a| a.bbox));
    let asg = assign_max_iou(&cand, &sample.annotations, pos_iou);
    let mut pos: Vec<usize> = (0..cand.len()).filter(|&i| asg[i].is_positive()).collect();
    let mut neg: Vec<usize> = (0..cand.len()).filter(|&i| !asg[i].is_positive()).collect();
    shuffle(&mut pos, rng);
    shuffle(&mut neg, rng);
    let n = cfg.rois_per_image.max(1);
    let max_pos = libm::round(n as f64 * cfg.roi_pos_fraction).max(1.0) as usize;
    pos.truncate(max_pos);
    neg.truncate(n - pos.len());
    let mut keep: Vec<usize> = pos.into_iter().chain(neg).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| cand[i]).collect()
}

/// Builds the full objective for a batch of images of equal size.
pub fn forward_losses<T: Real>(
    ctx: &mut Ctx<'_, T>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    batch: &[&ImageSample],
    plan: &mut SamplePlan,
    rng: &mut ChaCha8Rng,
) -> Result<LossVars> {
    let pixels: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.pixels).collect();
    let x = encoder::input_batch(ctx, &pixels)?;
    let (img_w, img_h) = (batch[0].width, batch[0].height);
    let raw = encoder::forward(ctx, x)?;
    let shapes: Vec<(usize, usize)> = raw.iter().map(|&v| (ctx.g.shape(v)[2], ctx.g.shape(v)[3])).collect();

    let (fused, l_comple) = if mcfg.enable_cscl {
        let dec = cscl::decoder_graph(ctx, mcfg, &raw)?;
        let fused: Vec<Var> = raw.iter().zip(&dec.features).map(|(&a, &b)| ctx.g.add(a, b)).collect();
        let targets = batch
            .iter()
            .map(|s| cscl::make_scale_target(&s.annotations, s.width, s.height, &shapes, tcfg.sigma_scale))
            .collect::<Result<Vec<_>>>()?;
        let l = cscl::scale_comple_loss_graph(ctx, &dec.scale_maps, &targets)?;
        (fused, l)
    } else {
        (raw.clone(), zero(ctx))
    };

    // Proposal head.
    let rpn = rpn_graph(ctx, &fused)?;
    let an = anchors(&shapes, mcfg.anchor_scale);
    let q = an.len();
    if plan.anchors.is_none() {
        plan.anchors = Some(
            batch.iter().map(|s| sample_anchors(&an, &s.annotations, tcfg.rpn_samples_per_image, rng)).collect(),
        );
    }
    let samples = plan.anchors.as_ref().expect("anchor plan");
    let mut obj_rows = Vec::new();
    let mut obj_labels = Vec::new();
    let mut reg_rows = Vec::new();
    let mut reg_targets = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        obj_rows.extend(s.indices.iter().map(|&i| b * q + i));
        obj_labels.extend(s.labels.iter().map(|&l| T::from_f64(l)));
        reg_rows.extend(s.positives.iter().map(|&i| b * q + i));
        reg_targets.extend_from_slice(&s.targets);
    }
    let rpn_cls = if obj_rows.is_empty() {
        zero(ctx)
    } else {
        let sel = ctx.g.select_rows(rpn.objectness, &obj_rows);
        ctx.g.bce_logits(sel, &obj_labels)
    };
    let rpn_reg = box_loss(ctx, rpn.deltas, &reg_rows, &reg_targets);

    // Cascade stages.
    let stages = mcfg.stages();
    if plan.stage_boxes.is_empty() {
        let mut first = Vec::with_capacity(batch.len());
        for (b, s) in batch.iter().enumerate() {
            let props: Vec<BBox> = match tcfg.proposal_mode {
                ProposalMode::Learned => decode_proposals(
                    ctx.g.value(rpn.objectness),
                    ctx.g.value(rpn.deltas),
                    b,
                    &an,
                    img_w,
                    img_h,
                    tcfg.num_proposals,
                    tcfg.rpn_nms_iou,
                )
                .into_iter()
                .map(|(bx, _)| bx)
                .collect(),
                ProposalMode::GtJitter { jitter, copies } => {
                    let seed = rand::Rng::gen::<u64>(rng);
                    jitter_proposals(&s.annotations, jitter, copies, img_w, img_h, seed)
                }
            };
            first.push(sample_rois(&props, s, tcfg, mcfg.cascade_ious[0], rng));
        }
        plan.stage_boxes.push(first);
    }

    let mut cls_terms = Vec::with_capacity(stages);
    let mut reg_terms = Vec::with_capacity(stages);
    let mut feat_terms = Vec::new();
    let mut label_terms = Vec::new();
    for s in 0..stages {
        let boxes = plan
            .stage_boxes
            .get(s)
            .ok_or_else(|| Error::Invalid(format!("sample plan lacks stage {s}")))?
            .clone();
        let mut rois: Vec<RoiSpec> = Vec::new();
        let mut offsets = Vec::with_capacity(batch.len());
        for (b, bx) in boxes.iter().enumerate() {
            offsets.push(rois.len());
            rois.extend(roi_specs(bx, b, fused.len()));
        }
        if rois.is_empty() {
            return Err(Error::Invalid("no training boxes in batch".into()));
        }
        let sv = stage_graph(ctx, mcfg, s, &fused, &rois)?;
        let stds = stage_stds(s);
        let mut labels = Vec::with_capacity(rois.len());
        let mut asg_all: Vec<Assignment> = Vec::with_capacity(rois.len());
        let mut pos_rows = Vec::new();
        let mut pos_targets = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (b, bx) in boxes.iter().enumerate() {
            let gts = &batch[b].annotations;
            let asg = assign_max_iou(bx, gts, mcfg.cascade_ious[s]);
            for (i, a) in asg.iter().enumerate() {
                labels.push(a.label(mcfg.background()));
                if let Some(g) = a.gt_index {
                    pos_rows.push(offsets[b] + i);
                    pos_targets.push(encode_deltas(&bx[i], &gts[g].bbox, stds));
                }
            }
            let cats: Vec<Option<usize>> = asg.iter().map(|a| a.category).collect();
            let g = group_by_category(bx, &cats, mcfg.num_classes).shifted(offsets[b]);
            groups.extend(g.groups.into_values());
            asg_all.extend(asg);
        }
        cls_terms.push(ctx.g.cross_entropy(sv.logits, &labels));
        reg_terms.push(box_loss(ctx, sv.deltas, &pos_rows, &pos_targets));

        if mcfg.enable_iccl && (tcfg.contra_every_stage || s == 0) {
            let small = ctx.g.roi_align(&raw, &rois, mcfg.roi_size, mcfg.roi_sampling, &super::head::level_scales(raw.len()));
            let cv = iccl::contrastive_graph(ctx, mcfg, s, small, sv.pooled, &groups)?;
            let k = feat_terms.len();
            let teacher = match plan.teachers.get(k) {
                Some(t) => ctx.g.constant(t.cast::<T>()),
                None => {
                    plan.teachers.push(ctx.g.value(cv.features).cast::<f64>());
                    cv.features
                }
            };
            feat_terms.push(iccl::contrastive_feature_loss_graph(ctx, teacher, sv.cls_block));
            let label_term = if tcfg.contra_positives_only {
                if pos_rows.is_empty() {
                    zero(ctx)
                } else {
                    let sel = ctx.g.select_rows(cv.logits, &pos_rows);
                    let pl: Vec<usize> = pos_rows.iter().map(|&r| labels[r]).collect();
                    ctx.g.cross_entropy(sel, &pl)
                }
            } else {
                ctx.g.cross_entropy(cv.logits, &labels)
            };
            label_terms.push(label_term);
        }

        if s + 1 < stages && plan.stage_boxes.len() == s + 1 {
            let d = ctx.g.value(sv.deltas).data().to_vec();
            let next = boxes.iter().enumerate().map(|(b, bx)| refine(bx, &d[offsets[b] * 4..], s, img_w, img_h)).collect();
            plan.stage_boxes.push(next);
        }
    }

    let stage_cls = mean_of(ctx, &cls_terms);
    let stage_reg = mean_of(ctx, &reg_terms);
    let l_cls = ctx.g.add(stage_cls, rpn_cls);
    let l_reg = ctx.g.add(stage_reg, rpn_reg);
    let feat = mean_of(ctx, &feat_terms);
    let l_contra_feat = ctx.g.scale(feat, T::from_f64(tcfg.contra_feat_weight));
    let label = mean_of(ctx, &label_terms);
    let l_contra_label = ctx.g.scale(label, T::from_f64(tcfg.contra_label_weight));
    let l_detect = ctx.g.sum(&[l_cls, l_reg, l_contra_feat, l_contra_label]);
    let a = ctx.g.scale(l_comple, T::from_f64(tcfg.lambda_comple));
    let b = ctx.g.scale(l_detect, T::from_f64(tcfg.lambda_detect));
    let l_total = ctx.g.add(a, b);
    Ok(LossVars { l_cls, l_reg, l_contra_feat, l_contra_label, l_comple, l_detect, l_total })
}

/// Momentum SGD with decoupled-from-buffers weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    /// One update; gradients are clipped to a global norm first.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64, cfg: &TrainConfig) {
        let mut scale = 1.0f64;
        if let Some(clip) = cfg.grad_clip {
            let norm = libm::sqrt(
                grads.values().flat_map(|g| g.data().iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>(),
            );
            if norm > clip {
                scale = clip / norm;
            }
        }
        let (mom, wd, lr) = (cfg.momentum as f32, cfg.weight_decay as f32, lr as f32);
        let scale = scale as f32;
        for (name, g) in grads {
            let Some(e) = params.entry(name) else { continue };
            if e.kind != ParamKind::Weight {
                continue;
            }
            let w = params.get_mut(name).expect("bound parameter exists");
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let d = gi * scale + wd * *wi;
                *vi = mom * *vi + d;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Owns parameters and optimiser state for one training run.
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams<f32>,
    pub step: usize,
    opt: Sgd,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Trainer> {
        model.validate()?;
        train.validate()?;
        let params = super::init_params(&model, train.seed)?;
        Ok(Trainer { model, train, params, step: 0, opt: Sgd::default() })
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed ^ 0x7a11_5eed);
        rng.set_stream(self.step as u64 + 1);
        rng
    }

    /// One optimiser update on `batch`.
    pub fn train_step(&mut self, batch: &[&ImageSample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut rng = self.step_rng();
        let mut ctx = Ctx::new(&self.params, true);
        let mut plan = SamplePlan::default();
        let vars = forward_losses(&mut ctx, &self.model, &self.train, batch, &mut plan, &mut rng)?;
        let breakdown = vars.breakdown(&ctx, &self.train)?;
        let grads = ctx.g.backward(vars.l_total);
        let pg = ctx.param_grads(&grads);
        if pg.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite gradient at step {}: {breakdown:?}", self.step)));
        }
        let stats = ctx.take_bn_stats();
        drop(ctx);
        let lr = self.train.lr_at(self.step);
        self.opt.step(&mut self.params, &pg, lr, &self.train);
        apply_bn_stats(&mut self.params, &stats);
        if !self.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters diverged at step {}: {breakdown:?}", self.step)));
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs `train.steps` updates over shuffled epochs of `dataset`,
    /// reporting every step.
    pub fn fit(&mut self, dataset: &Dataset, mut on_step: impl FnMut(usize, &LossBreakdown)) -> Result<()> {
        let n = dataset.samples.len();
        if n == 0 {
            return Err(Error::Invalid("cannot train on an empty dataset".into()));
        }
        let bs = self.train.batch_size.min(n);
        let per_epoch = n / bs;
        while self.step < self.train.steps {
            let epoch = self.step / per_epoch;
            let order = epoch_order(n, self.train.seed, epoch as u64);
            let k = self.step % per_epoch;
            let batch: Vec<&ImageSample> = order[k * bs..(k + 1) * bs].iter().map(|&i| &dataset.samples[i]).collect();
            let b = self.train_step(&batch)?;
            on_step(self.step - 1, &b);
        }
        Ok(())
    }
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe90c_4a11);
    rng.set_stream(epoch + 1);
    let mut v: Vec<usize> = (0..n).collect();
    shuffle(&mut v, &mut rng);
    v
}
