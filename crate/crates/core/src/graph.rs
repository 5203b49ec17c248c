//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operators
//! append nodes; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar root with respect to every node that depends on
//! a trainable leaf. Shapes follow the `[N, C, H, W]` convention for maps and
//! `[rows, features]` for token matrices.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{col2im, conv_out, gemm, im2col, Bilinear};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One region of interest for [`Graph::roi_align`], in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSpec {
    pub batch: usize,
    pub level: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Geometry of the multi-level token layout used by deformable sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLayout {
    pub shapes: Vec<(usize, usize)>,
    pub batch: usize,
}

impl LevelLayout {
    pub fn tokens_per_image(&self) -> usize {
        self.shapes.iter().map(|&(h, w)| h * w).sum()
    }

    pub fn level_start(&self, level: usize) -> usize {
        self.shapes[..level].iter().map(|&(h, w)| h * w).sum()
    }

    /// Level and `(y, x)` of the token at `q` within one image.
    fn locate(&self, mut q: usize) -> (usize, usize, usize) {
        for (l, &(h, w)) in self.shapes.iter().enumerate() {
            if q < h * w {
                return (l, q / w, q % w);
            }
            q -= h * w;
        }
        panic!("token index out of range");
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    Sum(Vec<Var>),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    PixelShuffle { x: Var, r: usize },
    ConcatChannels(Vec<Var>),
    Crop(Var),
    Upsample2x(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax { x: Var, group: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    DeformSample { values: Var, offsets: Var, weights: Var, layout: LevelLayout, heads: usize, points: usize },
    RoiAlign { levels: Vec<Var>, rois: Vec<RoiSpec>, pooled: usize, sampling: usize, scales: Vec<f64> },
    Reshape(Var),
    TransposeLast2(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MeanMid(Var),
    FlattenLevels(Vec<Var>),
    UnflattenLevel { x: Var, layout: LevelLayout, level: usize },
    MseConst { a: Var, target: Tensor<T> },
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SmoothL1 { pred: Var, target: Tensor<T>, beta: T },
    BceLogits { x: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp_libm();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("add: shape mismatch");
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Elementwise sum of equally shaped operands.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            let v = self.value(x);
            assert_eq!(v.shape(), out.shape(), "sum: shape mismatch");
            for (o, &i) in out.data_mut().iter_mut().zip(v.data()) {
                *o += i;
            }
        }
        let ng = self.ng(xs);
        self.push(out, Op::Sum(xs.to_vec()), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N,C,H,W]");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let plane = ho * wo;
        let kk = ci * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        let mut col = if direct { Vec::new() } else { vec![T::zero(); kk * plane] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for b_i in 0..n {
                let xin = &xv[b_i * ci * h * wd..(b_i + 1) * ci * h * wd];
                let src: &[T] = if direct {
                    xin
                } else {
                    im2col(xin, ci, h, wd, k, stride, pad, &mut col);
                    &col
                };
                gemm(co, kk, plane, wv, false, src, false, &mut od[b_i * co * plane..(b_i + 1) * co * plane], T::zero());
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for b_i in 0..n {
                    for c in 0..co {
                        let off = (b_i * co + c) * plane;
                        od[off..off + plane].iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Batch normalisation over `(N, H, W)` per channel.
    ///
    /// With `running = None` batch statistics are used and returned as
    /// `(mean, unbiased variance)`; otherwise the supplied running statistics
    /// normalise the input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Option<(Vec<T>, Vec<T>)>) {
        let xs = self.shape(x).to_vec();
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = n * plane;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let train = running.is_none();
        match running {
            None => {
                for ch in 0..c {
                    let mut s = T::zero();
                    for b_i in 0..n {
                        let off = (b_i * c + ch) * plane;
                        s += xv[off..off + plane].iter().copied().sum::<T>();
                    }
                    let mu = s / T::from_f64(m as f64);
                    let mut v = T::zero();
                    for b_i in 0..n {
                        let off = (b_i * c + ch) * plane;
                        v += xv[off..off + plane].iter().map(|&t| (t - mu) * (t - mu)).sum::<T>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / T::from_f64(m as f64);
                }
            }
            Some((rm, rv)) => {
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(&xs);
        {
            let od = out.data_mut();
            for b_i in 0..n {
                for ch in 0..c {
                    let off = (b_i * c + ch) * plane;
                    for i in off..off + plane {
                        let xh = (xv[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = xh;
                        od[i] = g[ch] * xh + bt[ch];
                    }
                }
            }
        }
        let stats = if train {
            let unbias = if m > 1 { T::from_f64(m as f64 / (m - 1) as f64) } else { T::one() };
            Some((mean, var.iter().map(|&v| v * unbias).collect()))
        } else {
            None
        };
        let ng = self.ng(&[x, gamma, beta]);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, ng);
        (v, stats)
    }

    /// `[N, C·r², H, W] → [N, C, rH, rW]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, cr, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(cr % (r * r), 0, "pixel_shuffle channel count");
        let c = cr / (r * r);
        let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for (dst, src) in shuffle_index(n, c, h, w, r) {
                od[dst] = xv[src];
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::PixelShuffle { x, r }, ng)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let s0 = self.shape(xs[0]).to_vec();
        let (n, h, w) = (s0[0], s0[2], s0[3]);
        let total: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let mut out = Tensor::zeros(&[n, total, h, w]);
        {
            let plane = h * w;
            let mut c_off = 0;
            for &v in xs {
                let t = &self.nodes[v.0].value;
                assert_eq!((t.dim(0), t.dim(2), t.dim(3)), (n, h, w), "concat shape mismatch");
                let ci = t.dim(1);
                for b_i in 0..n {
                    let src = &t.data()[b_i * ci * plane..(b_i + 1) * ci * plane];
                    let dst = (b_i * total + c_off) * plane;
                    out.data_mut()[dst..dst + ci * plane].copy_from_slice(src);
                }
                c_off += ci;
            }
        }
        let ng = self.ng(xs);
        self.push(out, Op::ConcatChannels(xs.to_vec()), ng)
    }

    /// Keeps the top-left `h × w` window of every plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        if xs[2] == h && xs[3] == w {
            return x;
        }
        assert!(h <= xs[2] && w <= xs[3]);
        let mut out = Tensor::zeros(&[xs[0], xs[1], h, w]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for p in 0..xs[0] * xs[1] {
                for y in 0..h {
                    let s = p * xs[2] * xs[3] + y * xs[3];
                    let d = p * h * w + y * w;
                    od[d..d + w].copy_from_slice(&xv[s..s + w]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Crop(x), ng)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        let mut out = Tensor::zeros(&[xs[0], xs[1], 2 * h, 2 * w]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for p in 0..xs[0] * xs[1] {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        od[p * 4 * h * w + y * 2 * w + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Upsample2x(x), ng)
    }

    /// `x·wᵀ + b` with `x: [n, din]`, `w: [dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be 2-d");
        assert_eq!(xs[1], ws[1], "linear feature mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, dout]);
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, out.data_mut(), T::zero());
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data().to_vec();
            for row in out.data_mut().chunks_exact_mut(dout) {
                row.iter_mut().zip(&bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Softmax over consecutive groups of `group` elements.
    pub fn softmax(&mut self, x: Var, group: usize) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.numel() % group, 0);
        out.data_mut().chunks_exact_mut(group).for_each(softmax_in_place);
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax { x, group }, ng)
    }

    /// Multi-head scaled dot-product attention on already projected
    /// `q: [Lq, D]`, `k, v: [Lk, D]`; heads split `D` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (lq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let lk = self.shape(k)[0];
        assert_eq!(self.shape(k)[1], d);
        assert_eq!(self.shape(v), &[lk, d]);
        assert_eq!(d % heads, 0, "attention dim not divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = Tensor::zeros(&[lq, d]);
        let od = out.data_mut();
        for h in 0..heads {
            let base = h * dh;
            for i in 0..lq {
                let row = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let qi = &qv[i * d + base..i * d + base + dh];
                for (j, p) in row.iter_mut().enumerate() {
                    let kj = &kv[j * d + base..j * d + base + dh];
                    *p = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(row);
                let o = &mut od[i * d + base..i * d + base + dh];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vv[j * d + base..j * d + base + dh];
                    o.iter_mut().zip(vj).for_each(|(oo, &x)| *oo += p * x);
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Multi-level deformable sampling.
    ///
    /// `values` holds `[B·Q, C]` tokens in [`LevelLayout`] order; `offsets`
    /// is `[B·Q, heads·L·points·2]` as `(dx, dy)` pairs in pixels of the
    /// sampled level; `weights` is `[B·Q, heads·L·points]`. Each query's
    /// reference point is its own normalised centre, projected into every
    /// level. Output is `[B·Q, C]`, head `h` filling channels
    /// `h·C/heads .. (h+1)·C/heads`.
    pub fn deform_sample(
        &mut self,
        values: Var,
        offsets: Var,
        weights: Var,
        layout: &LevelLayout,
        heads: usize,
        points: usize,
    ) -> Var {
        let q_img = layout.tokens_per_image();
        let rows = layout.batch * q_img;
        let c = self.shape(values)[1];
        let nl = layout.shapes.len();
        assert_eq!(self.shape(values)[0], rows);
        assert_eq!(self.shape(offsets), &[rows, heads * nl * points * 2]);
        assert_eq!(self.shape(weights), &[rows, heads * nl * points]);
        assert_eq!(c % heads, 0);
        let mut out = Tensor::zeros(&[rows, c]);
        {
            let vv = self.value(values).data();
            let ov = self.value(offsets).data();
            let wv = self.value(weights).data();
            let od = out.data_mut();
            for_each_deform_sample(layout, heads, points, ov, |row, h, l, p, val_base, bl| {
                let a = wv[row * heads * nl * points + (h * nl + l) * points + p];
                let dh = c / heads;
                let o = &mut od[row * c + h * dh..row * c + (h + 1) * dh];
                for (d, oo) in o.iter_mut().enumerate() {
                    let ch = h * dh + d;
                    let mut s = T::zero();
                    for corner in 0..4 {
                        if let Some(i) = bl.idx[corner] {
                            s += bl.wgt[corner] * vv[(val_base + i) * c + ch];
                        }
                    }
                    *oo += a * s;
                }
            });
        }
        let ng = self.ng(&[values, offsets, weights]);
        self.push(
            out,
            Op::DeformSample { values, offsets, weights, layout: layout.clone(), heads, points },
            ng,
        )
    }

    /// Align-style RoI pooling to `[R, C, P, P]` from per-level maps.
    ///
    /// `scales[l]` converts image pixels into level-`l` pixels.
    pub fn roi_align(&mut self, levels: &[Var], rois: &[RoiSpec], pooled: usize, sampling: usize, scales: &[f64]) -> Var {
        let c = self.shape(levels[0])[1];
        let mut out = Tensor::zeros(&[rois.len(), c, pooled, pooled]);
        {
            let od = out.data_mut();
            for (r, roi) in rois.iter().enumerate() {
                let t = &self.nodes[levels[roi.level].0].value;
                let (h, w) = (t.dim(2), t.dim(3));
                for_each_roi_sample::<T>(roi, pooled, sampling, scales[roi.level], h, w, |bin, bl, wt| {
                    for ch in 0..c {
                        let plane = t.plane(roi.batch, ch);
                        od[(r * c + ch) * pooled * pooled + bin] += wt * bl.sample(plane);
                    }
                });
            }
        }
        let ng = self.ng(levels);
        self.push(
            out,
            Op::RoiAlign { levels: levels.to_vec(), rois: rois.to_vec(), pooled, sampling, scales: scales.to_vec() },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape");
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let nd = xs.len();
        let (a, b) = (xs[nd - 2], xs[nd - 1]);
        let outer: usize = xs[..nd - 2].iter().product();
        let mut shape = xs.clone();
        shape.swap(nd - 2, nd - 1);
        let mut out = Tensor::zeros(&shape);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..a {
                    for j in 0..b {
                        od[o * a * b + j * a + i] = xv[o * a * b + i * b + j];
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::TransposeLast2(x), ng)
    }

    /// Gathers sub-tensors along the leading axis.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xs = self.shape(x).to_vec();
        let inner: usize = xs[1..].iter().product();
        let mut shape = xs.clone();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * inner);
        {
            let xv = self.value(x).data();
            for &i in idx {
                data.extend_from_slice(&xv[i * inner..(i + 1) * inner]);
            }
        }
        let out = Tensor::from_vec(&shape, data).expect("select_rows");
        let ng = self.ng(&[x]);
        self.push(out, Op::SelectRows(x, idx.to_vec()), ng)
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            assert_eq!(&t.shape()[1..], &tail[..], "concat_rows trailing shape");
            rows += t.dim(0);
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data).expect("concat_rows");
        let ng = self.ng(xs);
        self.push(out, Op::ConcatRows(xs.to_vec()), ng)
    }

    /// `[R, S, C] → [R, C]`, mean over the middle axis.
    pub fn mean_mid(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (r, s, c) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(&[r, c]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            let inv = T::one() / T::from_f64(s as f64);
            for i in 0..r {
                for j in 0..s {
                    for k in 0..c {
                        od[i * c + k] += xv[(i * s + j) * c + k] * inv;
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::MeanMid(x), ng)
    }

    /// Stacks `[B, C, H_l, W_l]` maps into `[B·ΣH_lW_l, C]` tokens, image
    /// major, then level, then raster order.
    pub fn flatten_levels(&mut self, levels: &[Var]) -> (Var, LevelLayout) {
        let s0 = self.shape(levels[0]).to_vec();
        let (b, c) = (s0[0], s0[1]);
        let layout = LevelLayout {
            shapes: levels.iter().map(|&v| (self.shape(v)[2], self.shape(v)[3])).collect(),
            batch: b,
        };
        let q = layout.tokens_per_image();
        let mut out = Tensor::zeros(&[b * q, c]);
        {
            let od = out.data_mut();
            for (l, &v) in levels.iter().enumerate() {
                let t = &self.nodes[v.0].value;
                let (h, w) = layout.shapes[l];
                let start = layout.level_start(l);
                for bi in 0..b {
                    for ch in 0..c {
                        let plane = t.plane(bi, ch);
                        for p in 0..h * w {
                            od[(bi * q + start + p) * c + ch] = plane[p];
                        }
                    }
                }
            }
        }
        let ng = self.ng(levels);
        let v = self.push(out, Op::FlattenLevels(levels.to_vec()), ng);
        (v, layout)
    }

    /// Inverse of [`Graph::flatten_levels`] for one level.
    pub fn unflatten_level(&mut self, x: Var, layout: &LevelLayout, level: usize) -> Var {
        let c = self.shape(x)[1];
        let q = layout.tokens_per_image();
        let (h, w) = layout.shapes[level];
        let start = layout.level_start(level);
        let mut out = Tensor::zeros(&[layout.batch, c, h, w]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for bi in 0..layout.batch {
                for ch in 0..c {
                    for p in 0..h * w {
                        od[(bi * c + ch) * h * w + p] = xv[(bi * q + start + p) * c + ch];
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::UnflattenLevel { x, layout: layout.clone(), level }, ng)
    }

    /// Mean squared error against a fixed target.
    pub fn mse_const(&mut self, a: Var, target: Tensor<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "mse target shape");
        let n = T::from_f64(av.numel().max(1) as f64);
        let s: T = av.data().iter().zip(target.data()).map(|(&x, &t)| (x - t) * (x - t)).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s / n), Op::MseConst { a, target }, ng)
    }

    /// Mean squared error between two graph values (gradients to both).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape");
        let n = T::from_f64(av.numel().max(1) as f64);
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &t)| (x - t) * (x - t)).sum();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng)
    }

    /// Mean softmax cross-entropy of `[R, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        let (r, k) = (s[0], s[1]);
        assert_eq!(labels.len(), r);
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_exact_mut(k).enumerate() {
            softmax_in_place(row);
            let lg = &self.nodes[logits.0].value.data()[i * k..(i + 1) * k];
            let mx = lg.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + lg.iter().map(|&v| (v - mx).exp_libm()).sum::<T>().ln_libm();
            loss += lse - lg[labels[i]];
        }
        let loss = if r > 0 { loss / T::from_f64(r as f64) } else { T::zero() };
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng)
    }

    /// Elementwise mean smooth-L1 against a fixed target.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor<T>, beta: T) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape());
        let half = T::from_f64(0.5);
        let mut s = T::zero();
        for (&p, &t) in pv.data().iter().zip(target.data()) {
            let d = (p - t).abs();
            s += if d < beta { half * d * d / beta } else { d - half * beta };
        }
        let n = pv.numel();
        let loss = if n > 0 { s / T::from_f64(n as f64) } else { T::zero() };
        let ng = self.ng(&[pred]);
        self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, target, beta }, ng)
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_logits(&mut self, x: Var, target: &[T]) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), target.len());
        let mut s = T::zero();
        for (&z, &t) in xv.iter().zip(target) {
            // log(1 + e^z) - t·z, stable form
            s += z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp_libm()).ln_libm();
        }
        let n = xv.len();
        let loss = if n > 0 { s / T::from_f64(n as f64) } else { T::zero() };
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(loss), Op::BceLogits { x, target: target.to_vec() }, ng)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Grads { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(o, &x)| *o += x * *s);
                }
            }
            Op::Sum(xs) => {
                for &v in xs {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Relu(a) => {
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &x), &yy) in d.iter_mut().zip(g).zip(y) {
                        if yy > T::zero() {
                            *o += x;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => self.backprop_conv(*x, *w, *b, *stride, *pad, g, grads),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*x).to_vec();
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = T::from_f64((n * plane) as f64);
                let gam = self.value(*gamma).data().to_vec();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for i in off..off + plane {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *gamma) {
                    d.iter_mut().zip(&sum_dy_xhat).for_each(|(o, &v)| *o += v);
                }
                if let Some(d) = self.acc(grads, *beta) {
                    d.iter_mut().zip(&sum_dy).for_each(|(o, &v)| *o += v);
                }
                if let Some(d) = self.acc(grads, *x) {
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                d[i] += if *train {
                                    k * (g[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::PixelShuffle { x, r } => {
                let xs = self.shape(*x).to_vec();
                let c = xs[1] / (r * r);
                if let Some(d) = self.acc(grads, *x) {
                    for (dst, src) in shuffle_index(xs[0], c, xs[2], xs[3], *r) {
                        d[src] += g[dst];
                    }
                }
            }
            Op::ConcatChannels(xs) => {
                let s = node.value.shape();
                let (n, total, plane) = (s[0], s[1], s[2] * s[3]);
                let mut c_off = 0;
                for &v in xs {
                    let ci = self.shape(v)[1];
                    if let Some(d) = self.acc(grads, v) {
                        for bi in 0..n {
                            let src = (bi * total + c_off) * plane;
                            let dst = &mut d[bi * ci * plane..(bi + 1) * ci * plane];
                            dst.iter_mut().zip(&g[src..src + ci * plane]).for_each(|(o, &x)| *o += x);
                        }
                    }
                    c_off += ci;
                }
            }
            Op::Crop(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (node.value.dim(2), node.value.dim(3));
                if let Some(d) = self.acc(grads, *x) {
                    for p in 0..xs[0] * xs[1] {
                        for y in 0..h {
                            let s = p * xs[2] * xs[3] + y * xs[3];
                            let gd = p * h * w + y * w;
                            d[s..s + w].iter_mut().zip(&g[gd..gd + w]).for_each(|(o, &v)| *o += v);
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                if let Some(d) = self.acc(grads, *x) {
                    for p in 0..xs[0] * xs[1] {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[p * h * w + (y / 2) * w + xx / 2] += g[p * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    gemm(n, dout, din, g, false, wv, false, d, T::one());
                }
                if let Some(d) = self.acc(grads, *w) {
                    gemm(dout, n, din, g, true, xv, false, d, T::one());
                }
                if let Some(b) = b {
                    if let Some(d) = self.acc(grads, *b) {
                        for row in g.chunks_exact(dout) {
                            d.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                        }
                    }
                }
            }
            Op::Softmax { x, group } => {
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((dr, yr), gr) in d.chunks_exact_mut(*group).zip(y.chunks_exact(*group)).zip(g.chunks_exact(*group)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *o += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::DeformSample { values, offsets, weights, layout, heads, points } => {
                self.backprop_deform(*values, *offsets, *weights, layout, *heads, *points, g, grads)
            }
            Op::RoiAlign { levels, rois, pooled, sampling, scales } => {
                let c = self.shape(levels[0])[1];
                for (r, roi) in rois.iter().enumerate() {
                    let lv = levels[roi.level];
                    let s = self.shape(lv).to_vec();
                    let (h, w) = (s[2], s[3]);
                    let Some(d) = self.acc(grads, lv) else { continue };
                    for_each_roi_sample::<T>(roi, *pooled, *sampling, scales[roi.level], h, w, |bin, bl, wt| {
                        for ch in 0..c {
                            let gv = g[(r * c + ch) * pooled * pooled + bin] * wt;
                            let base = (roi.batch * c + ch) * h * w;
                            for corner in 0..4 {
                                if let Some(i) = bl.idx[corner] {
                                    d[base + i] += gv * bl.wgt[corner];
                                }
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
            Op::TransposeLast2(x) => {
                let xs = self.shape(*x).to_vec();
                let nd = xs.len();
                let (a, b) = (xs[nd - 2], xs[nd - 1]);
                let outer: usize = xs[..nd - 2].iter().product();
                if let Some(d) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..a {
                            for j in 0..b {
                                d[o * a * b + i * b + j] += g[o * a * b + j * a + i];
                            }
                        }
                    }
                }
            }
            Op::SelectRows(x, idx) => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                if let Some(d) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        d[i * inner..(i + 1) * inner]
                            .iter_mut()
                            .zip(&g[r * inner..(r + 1) * inner])
                            .for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).numel();
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(o, &x)| *o += x);
                    }
                    off += n;
                }
            }
            Op::MeanMid(x) => {
                let xs = self.shape(*x).to_vec();
                let (r, s, c) = (xs[0], xs[1], xs[2]);
                let inv = T::one() / T::from_f64(s as f64);
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..s {
                            for k in 0..c {
                                d[(i * s + j) * c + k] += g[i * c + k] * inv;
                            }
                        }
                    }
                }
            }
            Op::FlattenLevels(levels) => {
                let c = node.value.dim(1);
                let b = self.shape(levels[0])[0];
                let q = node.value.dim(0) / b;
                let mut start = 0;
                for &v in levels {
                    let s = self.shape(v).to_vec();
                    let hw = s[2] * s[3];
                    if let Some(d) = self.acc(grads, v) {
                        for bi in 0..b {
                            for ch in 0..c {
                                for p in 0..hw {
                                    d[(bi * c + ch) * hw + p] += g[(bi * q + start + p) * c + ch];
                                }
                            }
                        }
                    }
                    start += hw;
                }
            }
            Op::UnflattenLevel { x, layout, level } => {
                let c = self.shape(*x)[1];
                let q = layout.tokens_per_image();
                let (h, w) = layout.shapes[*level];
                let start = layout.level_start(*level);
                if let Some(d) = self.acc(grads, *x) {
                    for bi in 0..layout.batch {
                        for ch in 0..c {
                            for p in 0..h * w {
                                d[(bi * q + start + p) * c + ch] += g[(bi * c + ch) * h * w + p];
                            }
                        }
                    }
                }
            }
            Op::MseConst { a, target } => {
                let av = self.value(*a).data();
                let k = g[0] * T::from_f64(2.0) / T::from_f64(av.len().max(1) as f64);
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &x), &t) in d.iter_mut().zip(av).zip(target.data()) {
                        *o += k * (x - t);
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let k = g[0] * T::from_f64(2.0) / T::from_f64(av.len().max(1) as f64);
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &x), &t) in d.iter_mut().zip(&av).zip(&bv) {
                        *o += k * (x - t);
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((o, &x), &t) in d.iter_mut().zip(&av).zip(&bv) {
                        *o -= k * (x - t);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let r = labels.len();
                if r == 0 {
                    return;
                }
                let scale = g[0] / T::from_f64(r as f64);
                if let Some(d) = self.acc(grads, *logits) {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let ind = if j == lab { T::one() } else { T::zero() };
                            d[i * k + j] += scale * (probs[i * k + j] - ind);
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                let pv = self.value(*pred).data();
                let n = pv.len();
                if n == 0 {
                    return;
                }
                let scale = g[0] / T::from_f64(n as f64);
                if let Some(d) = self.acc(grads, *pred) {
                    for ((o, &p), &t) in d.iter_mut().zip(pv).zip(target.data()) {
                        let diff = p - t;
                        let dd = if diff.abs() < *beta { diff / *beta } else { diff.signum() };
                        *o += scale * dd;
                    }
                }
            }
            Op::BceLogits { x, target } => {
                let xv = self.value(*x).data();
                let n = xv.len();
                if n == 0 {
                    return;
                }
                let scale = g[0] / T::from_f64(n as f64);
                if let Some(d) = self.acc(grads, *x) {
                    for ((o, &z), &t) in d.iter_mut().zip(xv).zip(target) {
                        let s = T::one() / (T::one() + (-z).exp_libm());
                        *o += scale * (s - t);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let plane = ho * wo;
        let kk = ci * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(b) = b {
            if let Some(d) = self.acc(grads, b) {
                for bi in 0..n {
                    for c in 0..co {
                        let off = (bi * co + c) * plane;
                        d[c] += g[off..off + plane].iter().copied().sum::<T>();
                    }
                }
            }
        }
        let need_w = self.nodes[w.0].needs_grad;
        let need_x = self.nodes[x.0].needs_grad;
        let mut col = if direct { Vec::new() } else { vec![T::zero(); kk * plane] };
        if need_w {
            let d = self.acc(grads, w).unwrap();
            for bi in 0..n {
                let xin = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                let src: &[T] = if direct {
                    xin
                } else {
                    im2col(xin, ci, h, wd, k, stride, pad, &mut col);
                    &col
                };
                gemm(co, plane, kk, &g[bi * co * plane..(bi + 1) * co * plane], false, src, true, d, T::one());
            }
        }
        if need_x {
            let d = self.acc(grads, x).unwrap();
            for bi in 0..n {
                let gy = &g[bi * co * plane..(bi + 1) * co * plane];
                let dx = &mut d[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                if direct {
                    gemm(kk, co, plane, wv, true, gy, false, dx, T::one());
                } else {
                    gemm(kk, co, plane, wv, true, gy, false, &mut col, T::zero());
                    col2im(&col, ci, h, wd, k, stride, pad, dx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (lq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let lk = self.shape(k)[0];
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut dq = vec![T::zero(); lq * d];
        let mut dk = vec![T::zero(); lk * d];
        let mut dv = vec![T::zero(); lk * d];
        let mut ds = vec![T::zero(); lk];
        for h in 0..heads {
            let base = h * dh;
            for i in 0..lq {
                let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let gi = &g[i * d + base..i * d + base + dh];
                let mut dot = T::zero();
                for j in 0..lk {
                    let vj = &vv[j * d + base..j * d + base + dh];
                    let dp: T = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    ds[j] = dp;
                    dot += dp * p[j];
                    let dvj = &mut dv[j * d + base..j * d + base + dh];
                    dvj.iter_mut().zip(gi).for_each(|(o, &x)| *o += p[j] * x);
                }
                for j in 0..lk {
                    let s = p[j] * (ds[j] - dot) * scale;
                    if s == T::zero() {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * d + base + t] += s * kv[j * d + base + t];
                        dk[j * d + base + t] += s * qv[i * d + base + t];
                    }
                }
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(dd) = self.acc(grads, var) {
                dd.iter_mut().zip(&src).for_each(|(o, &x)| *o += x);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_deform(
        &self,
        values: Var,
        offsets: Var,
        weights: Var,
        layout: &LevelLayout,
        heads: usize,
        points: usize,
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let c = self.shape(values)[1];
        let nl = layout.shapes.len();
        let dh = c / heads;
        let vv = self.value(values).data();
        let ov = self.value(offsets).data();
        let wv = self.value(weights).data();
        let mut dval = vec![T::zero(); vv.len()];
        let mut doff = vec![T::zero(); ov.len()];
        let mut dw = vec![T::zero(); wv.len()];
        for_each_deform_sample(layout, heads, points, ov, |row, h, l, p, val_base, bl| {
            let wi = row * heads * nl * points + (h * nl + l) * points + p;
            let a = wv[wi];
            let mut da = T::zero();
            let mut dy = T::zero();
            let mut dx = T::zero();
            let one = T::one();
            for dd in 0..dh {
                let ch = h * dh + dd;
                let go = g[row * c + ch];
                let corner = |ci: usize| bl.idx[ci].map_or(T::zero(), |i| vv[(val_base + i) * c + ch]);
                let (v00, v01, v10, v11) = (corner(0), corner(1), corner(2), corner(3));
                let s = bl.wgt[0] * v00 + bl.wgt[1] * v01 + bl.wgt[2] * v10 + bl.wgt[3] * v11;
                da += go * s;
                dy += go * ((one - bl.fx) * (v10 - v00) + bl.fx * (v11 - v01));
                dx += go * ((one - bl.fy) * (v01 - v00) + bl.fy * (v11 - v10));
                for ci in 0..4 {
                    if let Some(i) = bl.idx[ci] {
                        dval[(val_base + i) * c + ch] += a * bl.wgt[ci] * go;
                    }
                }
            }
            dw[wi] += da;
            doff[wi * 2] += a * dx;
            doff[wi * 2 + 1] += a * dy;
        });
        for (var, src) in [(values, dval), (offsets, doff), (weights, dw)] {
            if let Some(dd) = self.acc(grads, var) {
                dd.iter_mut().zip(&src).for_each(|(o, &x)| *o += x);
            }
        }
    }
}

/// `(output index, input index)` pairs of a pixel shuffle.
fn shuffle_index(n: usize, c: usize, h: usize, w: usize, r: usize) -> impl Iterator<Item = (usize, usize)> {
    let (oh, ow) = (h * r, w * r);
    (0..n * c).flat_map(move |nc| {
        let (b, ch) = (nc / c, nc % c);
        (0..oh).flat_map(move |y| {
            (0..ow).map(move |x| {
                let (i, j) = (y % r, x % r);
                let src_c = ch * r * r + i * r + j;
                let src = ((b * c * r * r + src_c) * h + y / r) * w + x / r;
                let dst = ((b * c + ch) * oh + y) * ow + x;
                (dst, src)
            })
        })
    })
}

/// Visits every deformable sampling point: `(row, head, level, point,
/// first token row of that level in the image, bilinear stencil)`.
fn for_each_deform_sample<T: Real>(
    layout: &LevelLayout,
    heads: usize,
    points: usize,
    offsets: &[T],
    mut f: impl FnMut(usize, usize, usize, usize, usize, &Bilinear<T>),
) {
    let q_img = layout.tokens_per_image();
    let nl = layout.shapes.len();
    let half = T::from_f64(0.5);
    for bi in 0..layout.batch {
        for q in 0..q_img {
            let row = bi * q_img + q;
            let (l, y, x) = layout.locate(q);
            let (hq, wq) = layout.shapes[l];
            let ref_x = (T::from_f64(x as f64) + half) / T::from_f64(wq as f64);
            let ref_y = (T::from_f64(y as f64) + half) / T::from_f64(hq as f64);
            for h in 0..heads {
                for (lp, &(hl, wl)) in layout.shapes.iter().enumerate() {
                    let base = bi * q_img + layout.level_start(lp);
                    for p in 0..points {
                        let oi = (row * heads * nl * points + (h * nl + lp) * points + p) * 2;
                        let sx = ref_x * T::from_f64(wl as f64) - half + offsets[oi];
                        let sy = ref_y * T::from_f64(hl as f64) - half + offsets[oi + 1];
                        let bl = Bilinear::zero_padded(sy, sx, hl, wl);
                        f(row, h, lp, p, base, &bl);
                    }
                }
            }
        }
    }
}

/// Visits every RoI-align sample: `(bin index, stencil, averaging weight)`.
fn for_each_roi_sample<T: Real>(
    roi: &RoiSpec,
    pooled: usize,
    sampling: usize,
    scale: f64,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, &Bilinear<T>, T),
) {
    let x1 = roi.x1 * scale - 0.5;
    let y1 = roi.y1 * scale - 0.5;
    let rw = (roi.x2 - roi.x1) * scale;
    let rh = (roi.y2 - roi.y1) * scale;
    let bw = rw / pooled as f64;
    let bh = rh / pooled as f64;
    let wt = T::from_f64(1.0 / (sampling * sampling) as f64);
    for py in 0..pooled {
        for px in 0..pooled {
            let bin = py * pooled + px;
            for sy in 0..sampling {
                let yy = y1 + py as f64 * bh + (sy as f64 + 0.5) * bh / sampling as f64;
                for sx in 0..sampling {
                    let xx = x1 + px as f64 * bw + (sx as f64 + 0.5) * bw / sampling as f64;
                    let bl = Bilinear::clamped(T::from_f64(yy), T::from_f64(xx), h, w);
                    f(bin, &bl, wt);
                }
            }
        }
    }
}
