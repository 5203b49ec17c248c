//! Named parameter storage and the forward-pass binding context.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable, updated by the optimiser.
    Weight,
    /// Running statistics; saved in checkpoints, never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Every array of the model, addressed by unique dotted names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Param(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), kind, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weights(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight)
    }

    pub fn num_scalars(&self) -> usize {
        self.weights().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), kind: e.kind, value: e.value.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for e in &self.entries {
            eat(e.name.as_bytes());
            for &d in e.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            buf.clear();
            T::to_le_bytes_vec(e.value.data(), &mut buf);
            eat(&buf);
        }
        h
    }

    /// Checks that `other` has exactly the same names, kinds and shapes.
    pub fn check_compatible(&self, other: &ModelParams<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Param(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for e in &self.entries {
            let o = other.entry(&e.name).ok_or_else(|| Error::Param(format!("missing parameter `{}`", e.name)))?;
            if o.value.shape() != e.value.shape() || o.kind != e.kind {
                return Err(Error::Param(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    o.value.shape(),
                    e.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = self.rng.gen::<f64>().max(1e-300);
        let u2: f64 = self.rng.gen::<f64>();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    fn normal_tensor<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.normal() * std)).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    /// He-normal convolution weight plus zero bias.
    pub fn conv<T: Real>(&mut self, p: &mut ModelParams<T>, name: &str, co: usize, ci: usize, k: usize, bias: bool) -> Result<()> {
        let std = libm::sqrt(2.0 / (ci * k * k) as f64);
        p.insert(&format!("{name}.weight"), ParamKind::Weight, self.normal_tensor(&[co, ci, k, k], std))?;
        if bias {
            p.insert(&format!("{name}.bias"), ParamKind::Weight, Tensor::zeros(&[co]))?;
        }
        Ok(())
    }

    /// Convolution with an explicit weight standard deviation and bias fill.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_std<T: Real>(
        &mut self,
        p: &mut ModelParams<T>,
        name: &str,
        co: usize,
        ci: usize,
        k: usize,
        std: f64,
        bias: f64,
    ) -> Result<()> {
        p.insert(&format!("{name}.weight"), ParamKind::Weight, self.normal_tensor(&[co, ci, k, k], std))?;
        p.insert(&format!("{name}.bias"), ParamKind::Weight, Tensor::full(&[co], T::from_f64(bias)))
    }

    pub fn linear<T: Real>(&mut self, p: &mut ModelParams<T>, name: &str, out: usize, inp: usize, std: f64) -> Result<()> {
        p.insert(&format!("{name}.weight"), ParamKind::Weight, self.normal_tensor(&[out, inp], std))?;
        p.insert(&format!("{name}.bias"), ParamKind::Weight, Tensor::zeros(&[out]))
    }

    pub fn batch_norm<T: Real>(&mut self, p: &mut ModelParams<T>, name: &str, c: usize) -> Result<()> {
        self.batch_norm_with_gamma(p, name, c, 1.0)
    }

    pub fn batch_norm_with_gamma<T: Real>(&mut self, p: &mut ModelParams<T>, name: &str, c: usize, gamma: f64) -> Result<()> {
        p.insert(&format!("{name}.gamma"), ParamKind::Weight, Tensor::full(&[c], T::from_f64(gamma)))?;
        p.insert(&format!("{name}.beta"), ParamKind::Weight, Tensor::zeros(&[c]))?;
        p.insert(&format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c]))?;
        p.insert(&format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[c], T::one()))
    }
}

/// Batch statistics observed by one batch-norm call during training.
#[derive(Clone, Debug)]
pub struct BnObservation<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Ctx<'p, T: Real> {
    pub g: Graph<T>,
    params: &'p ModelParams<T>,
    bound: BTreeMap<String, Var>,
    pub train: bool,
    bn_stats: Vec<BnObservation<T>>,
    frozen: bool,
}

impl<'p, T: Real> Ctx<'p, T> {
    pub fn new(params: &'p ModelParams<T>, train: bool) -> Self {
        Ctx { g: Graph::new(), params, bound: BTreeMap::new(), train, bn_stats: Vec::new(), frozen: false }
    }

    /// Context whose parameters are bound as constants (no gradients).
    pub fn inference(params: &'p ModelParams<T>) -> Self {
        let mut c = Self::new(params, false);
        c.frozen = true;
        c
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Graph leaf for a learnable parameter, bound once per pass.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Param(format!("missing parameter `{name}`")))?
            .clone();
        let v = if self.frozen { self.g.constant(t) } else { self.g.param(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn buffer(&self, name: &str) -> Result<&'p Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Param(format!("missing buffer `{name}`")))
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let bname = format!("{prefix}.bias");
        let b = if self.has(&bname) { Some(self.p(&bname)?) } else { None };
        let (ci, wci) = (self.g.shape(x)[1], self.g.shape(w)[1]);
        if ci != wci {
            return Err(Error::Param(format!("`{prefix}` expects {wci} input channels, got {ci}")));
        }
        Ok(self.g.conv2d(x, w, b, stride, pad))
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let eps = T::from_f64(BN_EPS);
        if self.train {
            let (y, stats) = self.g.batch_norm(x, gamma, beta, None, eps);
            if let Some((mean, var)) = stats {
                self.bn_stats.push(BnObservation { prefix: prefix.to_string(), mean, var });
            }
            Ok(y)
        } else {
            let rm = self.buffer(&format!("{prefix}.running_mean"))?;
            let rv = self.buffer(&format!("{prefix}.running_var"))?;
            Ok(self.g.batch_norm(x, gamma, beta, Some((rm.data(), rv.data())), eps).0)
        }
    }

    /// Convolution, batch norm, ReLU.
    pub fn conv_bn_relu(&mut self, x: Var, conv: &str, bn: &str, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(x, conv, stride, pad)?;
        let y = self.batch_norm(y, bn)?;
        Ok(self.g.relu(y))
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        if self.g.shape(x)[1] != self.g.shape(w)[1] {
            return Err(Error::Param(format!(
                "`{prefix}` expects {} features, got {}",
                self.g.shape(w)[1],
                self.g.shape(x)[1]
            )));
        }
        Ok(self.g.linear(x, w, Some(b)))
    }

    /// Gradients of every bound learnable parameter, by name.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnObservation<T>> {
        core::mem::take(&mut self.bn_stats)
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_bn_stats<T: Real>(params: &mut ModelParams<T>, stats: &[BnObservation<T>]) {
    let m = T::from_f64(BN_MOMENTUM);
    for obs in stats {
        for (suffix, vals) in [("running_mean", &obs.mean), ("running_var", &obs.var)] {
            if let Some(t) = params.get_mut(&format!("{}.{suffix}", obs.prefix)) {
                for (r, &v) in t.data_mut().iter_mut().zip(vals.iter()) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
        }
    }
}
