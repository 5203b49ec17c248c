//! Central finite differences against the tape gradient of every graph op,
//! in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sclnet_core::graph::{Graph, LevelLayout, RoiSpec, Var};
use sclnet_core::Tensor;

const EPS: f64 = 1e-6;
const REL_TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Builds `build(inputs)`, reduces it to a scalar through a fixed random
/// squared-error target, and checks `samples` coordinates of every input.
fn check(name: &str, inputs: Vec<Tensor<f64>>, samples: usize, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let eval = |ins: &[Tensor<f64>], target: Option<&Tensor<f64>>| -> (f64, Vec<Tensor<f64>>, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let tgt = match target {
            Some(t) => t.clone(),
            None => {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                rand_tensor(&mut r, &shape, 1.0)
            }
        };
        let loss = g.mse_const(out, tgt.clone());
        let grads = g.backward(loss);
        let gs = vars.iter().map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))).collect();
        (g.value(loss).item(), gs, tgt)
    };
    let (_, analytic, target) = eval(&inputs, None);
    for (k, input) in inputs.iter().enumerate() {
        for _ in 0..samples.min(input.numel()) {
            let i = rng.gen_range(0..input.numel());
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            let fd = (eval(&plus, Some(&target)).0 - eval(&minus, Some(&target)).0) / (2.0 * EPS);
            let an = analytic[k].data()[i];
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
            assert!(err < REL_TOL, "{name}: input {k}[{i}] analytic {an} vs numeric {fd} (rel {err:.2e})");
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv2d() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[2, 3, 7, 6], 1.0);
    let w = rand_tensor(&mut r, &[4, 3, 3, 3], 0.5);
    let b = rand_tensor(&mut r, &[4], 0.5);
    check("conv_s1", vec![x.clone(), w, b], 12, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    let w5 = rand_tensor(&mut r, &[2, 3, 5, 5], 0.5);
    check("conv_s2", vec![x, w5], 12, |g, v| g.conv2d(v[0], v[1], None, 2, 2));
}

#[test]
fn batch_norm_training_statistics() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[3, 2, 4, 4], 2.0);
    let gamma = rand_tensor(&mut r, &[2], 1.0);
    let beta = rand_tensor(&mut r, &[2], 1.0);
    check("bn", vec![x, gamma, beta], 12, |g, v| g.batch_norm(v[0], v[1], v[2], None, 1e-5).0);
}

#[test]
fn batch_norm_running_statistics() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[2, 2, 3, 3], 2.0);
    let gamma = rand_tensor(&mut r, &[2], 1.0);
    let beta = rand_tensor(&mut r, &[2], 1.0);
    let (mean, var) = (vec![0.3, -0.2], vec![1.5, 0.7]);
    check("bn_eval", vec![x, gamma, beta], 10, move |g, v| g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5).0);
}

#[test]
fn shuffle_concat_crop_upsample() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[1, 8, 3, 3], 1.0);
    let y = rand_tensor(&mut r, &[1, 2, 5, 5], 1.0);
    check("shuffle_cat_crop", vec![x, y], 15, |g, v| {
        let s = g.pixel_shuffle(v[0], 2);
        let s = g.crop(s, 5, 5);
        g.concat_channels(&[s, v[1]])
    });
    let z = rand_tensor(&mut r, &[2, 2, 3, 4], 1.0);
    check("upsample", vec![z], 10, |g, v| g.upsample2x(v[0]));
}

#[test]
fn linear_relu_scale_sum() {
    let mut r = rng(5);
    let x = rand_tensor(&mut r, &[5, 4], 1.0);
    let w = rand_tensor(&mut r, &[3, 4], 1.0);
    let b = rand_tensor(&mut r, &[3], 1.0);
    check("linear", vec![x, w, b], 10, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        let a = g.relu(y);
        let s = g.scale(y, 0.7);
        let t = g.sum(&[a, s, y]);
        g.add(t, a)
    });
}

#[test]
fn softmax_groups() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, &[3, 8], 2.0);
    check("softmax", vec![x], 12, |g, v| g.softmax(v[0], 4));
}

#[test]
fn multi_head_attention() {
    let mut r = rng(7);
    let q = rand_tensor(&mut r, &[3, 8], 1.0);
    let k = rand_tensor(&mut r, &[5, 8], 1.0);
    let vv = rand_tensor(&mut r, &[5, 8], 1.0);
    check("attention", vec![q, k, vv], 12, |g, v| g.attention(v[0], v[1], v[2], 2));
}

#[test]
fn deformable_sampling() {
    let mut r = rng(8);
    let layout = LevelLayout { shapes: vec![(4, 4), (2, 2)], batch: 2 };
    let rows = 2 * 20;
    let (heads, points, c) = (2, 2, 4);
    let values = rand_tensor(&mut r, &[rows, c], 1.0);
    let offsets = rand_tensor(&mut r, &[rows, heads * 2 * points * 2], 1.3);
    let logits = rand_tensor(&mut r, &[rows, heads * 2 * points], 1.0);
    check("deform", vec![values, offsets, logits], 20, move |g, v| {
        let w = g.softmax(v[2], 2 * points);
        g.deform_sample(v[0], v[1], w, &layout, heads, points)
    });
}

#[test]
fn roi_align_pooling() {
    let mut r = rng(9);
    let l0 = rand_tensor(&mut r, &[2, 3, 8, 8], 1.0);
    let l1 = rand_tensor(&mut r, &[2, 3, 4, 4], 1.0);
    let rois = vec![
        RoiSpec { batch: 0, level: 0, x1: 3.2, y1: 5.1, x2: 20.7, y2: 17.9 },
        RoiSpec { batch: 1, level: 1, x1: 0.0, y1: 2.5, x2: 31.0, y2: 30.2 },
        RoiSpec { batch: 1, level: 0, x1: -2.0, y1: 1.0, x2: 6.0, y2: 9.0 },
    ];
    check("roi_align", vec![l0, l1], 20, move |g, v| g.roi_align(&[v[0], v[1]], &rois, 3, 2, &[0.25, 0.125]));
}

#[test]
fn shape_plumbing() {
    let mut r = rng(10);
    let x = rand_tensor(&mut r, &[2, 3, 4], 1.0);
    let y = rand_tensor(&mut r, &[3, 12], 1.0);
    check("plumbing", vec![x, y], 12, |g, v| {
        let t = g.transpose_last2(v[0]);
        let f = g.reshape(t, &[2, 12]);
        let s = g.select_rows(v[1], &[2, 0, 2]);
        let c = g.concat_rows(&[f, s]);
        let m = g.reshape(c, &[5, 3, 4]);
        g.mean_mid(m)
    });
    let a = rand_tensor(&mut r, &[2, 2, 3, 3], 1.0);
    let b = rand_tensor(&mut r, &[2, 2, 2, 2], 1.0);
    check("levels", vec![a, b], 12, |g, v| {
        let (tok, layout) = g.flatten_levels(&[v[0], v[1]]);
        let s = g.scale(tok, 2.0);
        let back = g.unflatten_level(s, &layout, 1);
        let r = g.reshape(back, &[2, 8]);
        g.relu(r)
    });
}

#[test]
fn loss_terms() {
    let mut r = rng(11);
    let logits = rand_tensor(&mut r, &[4, 3], 2.0);
    check("ce", vec![logits.clone()], 12, |g, v| {
        let l = g.cross_entropy(v[0], &[0, 2, 1, 2]);
        g.reshape(l, &[1])
    });
    check("bce", vec![logits], 12, |g, v| g.bce_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0]));
    let pred = rand_tensor(&mut r, &[3, 4], 0.5);
    let target = rand_tensor(&mut r, &[3, 4], 0.5);
    check("smooth_l1", vec![pred.clone()], 12, move |g, v| g.smooth_l1(v[0], target.clone(), 1.0 / 9.0));
    let other = rand_tensor(&mut r, &[3, 4], 0.5);
    check("mse", vec![pred, other], 12, |g, v| g.mse(v[0], v[1]));
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = g.param(Tensor::from_vec(&[3], vec![0.0, 1.0, 2.0]).unwrap());
    let d = g.detach(x);
    let l = g.mse(y, d);
    let grads = g.backward(l);
    assert!(grads.get(x).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
    let gy = grads.get(y).unwrap();
    for i in 0..3 {
        let expect = 2.0 * (g.value(y).data()[i] - g.value(x).data()[i]) / 3.0;
        assert!((gy.data()[i] - expect).abs() < 1e-15);
    }
}
