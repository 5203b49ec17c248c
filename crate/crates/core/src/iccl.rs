//! Inter-scale contrastive complementary learning.
//!
//! Proposals are labelled by a max-IoU assigner and grouped per category in
//! ascending box area. Every member of a group queries the pooled features of
//! the strictly later (larger) members with multi-head attention; the
//! attended result is added back onto its own raw features. The output
//! teaches the classification branch through a feature-matching loss and is
//! supervised itself by a classification loss. The branch runs only while
//! training.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::boxes::{iou, BBox};
use crate::data::Annotation;
use crate::detector::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ModelParams};
use crate::real::Real;
use crate::tensor::Tensor;

/// Default positive IoU threshold of the assigner.
pub const POS_THRESH: f64 = 0.5;

/// Label of one proposal; `category == None` is background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub gt_index: Option<usize>,
    pub category: Option<usize>,
    pub max_iou: f64,
}

impl Assignment {
    /// Class index with background mapped to `k`.
    pub fn label(&self, k: usize) -> usize {
        self.category.unwrap_or(k)
    }

    pub fn is_positive(&self) -> bool {
        self.category.is_some()
    }
}

/// Pooled features of one proposal plus its assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalFeatureBlock<T> {
    pub proposal_box: BBox,
    /// `[C, P, P]`.
    pub features: Tensor<T>,
    pub assigned_category: Option<usize>,
    pub assigned_gt_index: Option<usize>,
    pub max_iou: f64,
}

/// Positive proposals per category, each list in ascending box area.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryGroups {
    pub groups: BTreeMap<usize, Vec<usize>>,
}

impl CategoryGroups {
    /// Adds `offset` to every index.
    pub fn shifted(&self, offset: usize) -> CategoryGroups {
        CategoryGroups {
            groups: self.groups.iter().map(|(&k, v)| (k, v.iter().map(|i| i + offset).collect())).collect(),
        }
    }
}

/// Labels every proposal with its best-overlapping ground box; ties go to
/// the lower ground index.
pub fn assign_max_iou(proposals: &[BBox], gts: &[Annotation], pos_thresh: f64) -> Vec<Assignment> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, a) in gts.iter().enumerate() {
                let v = iou(p, &a.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= pos_thresh => {
                    Assignment { gt_index: Some(g), category: Some(gts[g].category_id), max_iou: v }
                }
                Some((_, v)) => Assignment { gt_index: None, category: None, max_iou: v },
                None => Assignment { gt_index: None, category: None, max_iou: 0.0 },
            }
        })
        .collect()
}

/// Groups positive indices by category, sorted by area (stable on index).
pub fn group_by_category(boxes: &[BBox], categories: &[Option<usize>], k: usize) -> CategoryGroups {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in categories.iter().enumerate() {
        if let Some(c) = *c {
            if c < k {
                groups.entry(c).or_default().push(i);
            }
        }
    }
    for members in groups.values_mut() {
        members.sort_by(|&a, &b| boxes[a].area().total_cmp(&boxes[b].area()).then(a.cmp(&b)));
    }
    CategoryGroups { groups }
}

pub fn intra_category_select<T>(blocks: &[ProposalFeatureBlock<T>], k: usize) -> CategoryGroups {
    let boxes: Vec<BBox> = blocks.iter().map(|b| b.proposal_box).collect();
    let cats: Vec<Option<usize>> = blocks.iter().map(|b| b.assigned_category).collect();
    group_by_category(&boxes, &cats, k)
}

pub(crate) fn init_params<T: Real>(cfg: &ModelConfig, init: &mut Init, p: &mut ModelParams<T>) -> Result<()> {
    let c = cfg.channels;
    let std = libm::sqrt(1.0 / c as f64);
    for s in 0..cfg.stages() {
        for proj in ["q", "k", "v"] {
            init.linear(p, &format!("iccl.s{s}.{proj}"), c, c, std)?;
        }
        init.linear(p, &format!("iccl.s{s}.o"), c, c, 0.1 * std)?;
        init.linear(p, &format!("iccl.s{s}.cls"), cfg.num_classes + 1, c, 0.01)?;
    }
    Ok(())
}

/// `[R, C, P, P]` → `[R·P², C]` token rows, proposal major.
fn to_tokens<T: Real>(ctx: &mut Ctx<'_, T>, x: Var) -> Var {
    let s = ctx.g.shape(x).to_vec();
    let (r, c, pp) = (s[0], s[1], s[2] * s[3]);
    let flat = ctx.g.reshape(x, &[r, c, pp]);
    let t = ctx.g.transpose_last2(flat);
    ctx.g.reshape(t, &[r * pp, c])
}

fn from_tokens<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, r: usize, c: usize, p: usize) -> Var {
    let t = ctx.g.reshape(x, &[r, p * p, c]);
    let t = ctx.g.transpose_last2(t);
    ctx.g.reshape(t, &[r, c, p, p])
}

/// Graph nodes of the contrastive branch.
pub struct ContrastVars {
    /// `[R, C, P, P]`.
    pub features: Var,
    /// `[R, K + 1]`.
    pub logits: Var,
}

/// Contrastive complement over `[R, C, P, P]` blocks: `small` pooled from
/// the raw pyramid, `large` from the fused one. `groups` index rows of both.
pub fn contrastive_graph<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    stage: usize,
    small: Var,
    large: Var,
    groups: &[Vec<usize>],
) -> Result<ContrastVars> {
    let s = ctx.g.shape(small).to_vec();
    if s.len() != 4 || ctx.g.shape(large) != s.as_slice() {
        return Err(Error::Shape(format!(
            "contrastive blocks disagree: small {:?} vs large {:?}",
            s,
            ctx.g.shape(large)
        )));
    }
    let (r, c, p) = (s[0], s[1], s[2]);
    let pp = p * p;
    let pre = format!("iccl.s{stage}");
    let small_t = to_tokens(ctx, small);

    // Query rows of members with a non-empty reference set.
    let mut queried: Vec<(usize, Vec<usize>)> = Vec::new();
    for members in groups {
        for (j, &m) in members.iter().enumerate() {
            if j + 1 < members.len() {
                queried.push((m, members[j + 1..].to_vec()));
            }
        }
    }
    let mut updated: BTreeMap<usize, Var> = BTreeMap::new();
    if !queried.is_empty() {
        let large_t = to_tokens(ctx, large);
        let q_all = ctx.linear(small_t, &format!("{pre}.q"))?;
        let k_all = ctx.linear(large_t, &format!("{pre}.k"))?;
        let v_all = ctx.linear(large_t, &format!("{pre}.v"))?;
        for (m, refs) in &queried {
            let qrows: Vec<usize> = (m * pp..(m + 1) * pp).collect();
            let krows: Vec<usize> = refs.iter().flat_map(|&i| i * pp..(i + 1) * pp).collect();
            let q = ctx.g.select_rows(q_all, &qrows);
            let k = ctx.g.select_rows(k_all, &krows);
            let v = ctx.g.select_rows(v_all, &krows);
            let a = ctx.g.attention(q, k, v, cfg.iccl_heads);
            let o = ctx.linear(a, &format!("{pre}.o"))?;
            let own = ctx.g.select_rows(small_t, &qrows);
            updated.insert(*m, ctx.g.add(own, o));
        }
    }

    let tokens = if updated.is_empty() {
        small_t
    } else {
        // Runs of pass-through rows are copied in one gather.
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for i in 0..r {
            if let Some(&u) = updated.get(&i) {
                if !run.is_empty() {
                    parts.push(ctx.g.select_rows(small_t, &run));
                    run.clear();
                }
                parts.push(u);
            } else {
                run.extend(i * pp..(i + 1) * pp);
            }
        }
        if !run.is_empty() {
            parts.push(ctx.g.select_rows(small_t, &run));
        }
        ctx.g.concat_rows(&parts)
    };
    let features = from_tokens(ctx, tokens, r, c, p);
    let per_prop = ctx.g.reshape(tokens, &[r, pp, c]);
    let pooled = ctx.g.mean_mid(per_prop);
    let logits = ctx.linear(pooled, &format!("{pre}.cls"))?;
    Ok(ContrastVars { features, logits })
}

/// Output of [`contrastive_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastOutput<T> {
    /// `[C, P, P]` per proposal.
    pub features: Vec<Tensor<T>>,
    /// `[R, K + 1]`.
    pub logits: Tensor<T>,
}

/// Evaluates the contrastive branch of `stage` on explicit blocks.
pub fn contrastive_forward<T: Real>(
    groups: &CategoryGroups,
    small_blocks: &[Tensor<T>],
    large_blocks: &[Tensor<T>],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    stage: usize,
) -> Result<ContrastOutput<T>> {
    if small_blocks.len() != large_blocks.len() {
        return Err(Error::Shape("small and large block counts differ".into()));
    }
    for (i, (a, b)) in small_blocks.iter().zip(large_blocks).enumerate() {
        if a.shape() != b.shape() || a.shape().len() != 3 {
            return Err(Error::Shape(format!("block {i}: small {:?} vs large {:?}", a.shape(), b.shape())));
        }
    }
    if small_blocks.is_empty() {
        return Ok(ContrastOutput { features: Vec::new(), logits: Tensor::zeros(&[0, cfg.num_classes + 1]) });
    }
    let members: Vec<Vec<usize>> = groups.groups.values().cloned().collect();
    if members.iter().flatten().any(|&i| i >= small_blocks.len()) {
        return Err(Error::Shape("group index out of range".into()));
    }
    let mut ctx = Ctx::inference(params);
    let small = ctx.g.constant(Tensor::stack(small_blocks)?);
    let large = ctx.g.constant(Tensor::stack(large_blocks)?);
    let out = contrastive_graph(&mut ctx, cfg, stage, small, large, &members)?;
    let f = ctx.g.value(out.features);
    Ok(ContrastOutput {
        features: (0..small_blocks.len()).map(|i| f.index0(i)).collect(),
        logits: ctx.g.value(out.logits).clone(),
    })
}

/// Mean over proposals of the per-block mean squared difference.
pub fn contrastive_feature_loss<T: Real>(contra: &[Tensor<T>], cls_branch: &[Tensor<T>]) -> Result<f64> {
    if contra.len() != cls_branch.len() {
        return Err(Error::Shape(format!("{} teacher blocks vs {} student blocks", contra.len(), cls_branch.len())));
    }
    if contra.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, (a, b)) in contra.iter().zip(cls_branch).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("block {i}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()) * (x.as_f64() - y.as_f64())).sum();
        total += s / a.numel().max(1) as f64;
    }
    Ok(total / contra.len() as f64)
}

/// Graph form: gradients reach `cls_branch` only.
pub fn contrastive_feature_loss_graph<T: Real>(ctx: &mut Ctx<'_, T>, contra: Var, cls_branch: Var) -> Var {
    let teacher = ctx.g.detach(contra);
    ctx.g.mse(cls_branch, teacher)
}

/// Mean cross-entropy of `[R, K + 1]` logits against assigned labels.
pub fn contrastive_label_loss<T: Real>(logits: &Tensor<T>, assignments: &[Assignment]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.dim(0) != assignments.len() {
        return Err(Error::Shape(format!(
            "logits {:?} for {} assignments",
            logits.shape(),
            assignments.len()
        )));
    }
    let k1 = logits.dim(1);
    let n = assignments.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, a) in logits.data().chunks_exact(k1).zip(assignments) {
        let label = a.label(k1 - 1);
        let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + libm::log(row.iter().map(|v| libm::exp(v.as_f64() - mx)).sum::<f64>());
        total += lse - row[label].as_f64();
    }
    Ok(total / n as f64)
}
