//! Seeded parameter store and the small set of layers the models are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
}

/// Named trainable arrays of one model group.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("params", &self.vars.len()).field("dtype", &self.dtype).finish()
    }
}

impl ParamStore {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Vars whose names start with any of `prefixes`.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.vars.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.elem_count()).sum()
    }

    /// Values as `f64` arrays with shapes, in name order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                Ok((k.clone(), v.dims().to_vec(), data))
            })
            .collect()
    }

    /// Raw little-endian bytes per array, in name order.
    pub fn export_bytes(&self) -> Result<Vec<(String, Vec<usize>, DType, Vec<u8>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor().flatten_all()?;
                let bytes = match self.dtype {
                    DType::F32 => t.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
                    DType::F64 => t.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
                    other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
                };
                Ok((k.clone(), v.dims().to_vec(), self.dtype, bytes))
            })
            .collect()
    }

    /// Overwrites every var from `arrays`; names and shapes must match exactly.
    pub fn import(&self, arrays: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for name in arrays.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected array `{name}`")));
            }
        }
        for (name, var) in &self.vars {
            let (shape, data) =
                arrays.get(name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` has shape {shape:?}, model expects {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Copies matching arrays from `other` (by renamed key); returns how many were copied.
    pub fn copy_from(&self, other: &ParamStore, rename: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &other.vars {
            if let Some(dst) = rename(name).and_then(|k| self.vars.get(&k)) {
                if dst.dims() == var.dims() {
                    dst.set(&var.as_tensor().to_dtype(self.dtype)?)?;
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, shape, _, bytes) in self.export_bytes()? {
            h.update(name.as_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            h.update(&bytes);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Adds `N(0, scale^2)` noise to every array.
    pub fn perturb(&self, seed: u64, scale: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for var in self.vars.values() {
            let noise = randn(&mut rng, var.dims(), self.dtype, &self.device)?;
            var.set(&(var.as_tensor() + (noise * scale)?)?)?;
        }
        Ok(())
    }
}

/// Draws a standard-normal tensor from a seeded generator.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

struct BuilderInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Creates named parameters with deterministic initial values.
///
/// A frozen builder hands out detached tensors: the values still track later
/// imports into the store, but no gradients flow into them.
#[derive(Clone)]
pub struct ParamBuilder {
    inner: Rc<RefCell<BuilderInner>>,
    prefix: String,
    dtype: DType,
    device: Device,
    frozen: bool,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Rc::new(RefCell::new(BuilderInner { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) })),
            prefix: String::new(),
            dtype,
            device: device.clone(),
            frozen: false,
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Self { prefix, ..self.clone() }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let key = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = self.inner.borrow_mut();
        if inner.vars.contains_key(&key) {
            return Err(Error::InvalidInput(format!("parameter `{key}` declared twice")));
        }
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, self.dtype, &self.device)?,
            Init::Ones => Tensor::ones(shape, self.dtype, &self.device)?,
            Init::Normal(std) => (randn(&mut inner.rng, shape, self.dtype, &self.device)? * std)?,
            Init::FanIn(gain) => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                (randn(&mut inner.rng, shape, self.dtype, &self.device)? * (gain / (fan_in as f64).sqrt()))?
            }
        };
        let var = Var::from_tensor(&t)?;
        let out = if self.frozen { var.as_tensor().detach() } else { var.as_tensor().clone() };
        inner.vars.insert(key, var);
        Ok(out)
    }

    pub fn finish(&self) -> ParamStore {
        ParamStore { vars: self.inner.borrow().vars.clone(), dtype: self.dtype, device: self.device.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(pb, in_dim, out_dim, Init::FanIn(1.0), true)
    }

    pub fn zeros(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(pb, in_dim, out_dim, Init::Zeros, true)
    }

    pub fn with_init(pb: &ParamBuilder, in_dim: usize, out_dim: usize, init: Init, bias: bool) -> Result<Self> {
        let w = pb.get(&[out_dim, in_dim], "weight", init)?;
        let b = if bias { Some(pb.get(&[out_dim], "bias", Init::Zeros)?) } else { None };
        Ok(Self { w, b })
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[0]
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.broadcast_matmul(&self.w.t()?)?;
        match &self.b {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let w = pb.get(&[out_ch, in_ch, kernel, kernel], "weight", init)?;
        let b = pb.get(&[out_ch], "bias", Init::Zeros)?;
        Ok(Self { w, b, stride, padding })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        y.broadcast_add(&self.b.reshape((1, self.b.dims()[0], 1, 1))?)
    }
}

/// Layer norm over the last dim, no affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    xc.broadcast_div(&(var + eps)?.sqrt()?)
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Multi-head scaled dot-product attention on `(B, T, D)` projections.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (b, tq, d) = q.dims3()?;
    let tk = k.dim(1)?;
    let hd = d / heads;
    let split = |x: &Tensor, t: usize| x.reshape((b, t, heads, hd))?.transpose(1, 2)?.contiguous();
    let (q, k, v) = (split(q, tq)?, split(k, tk)?, split(v, tk)?);
    let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
    let p = softmax_last(&scores)?;
    p.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&pb.pp("fc1"), dim, hidden)?, fc2: Linear::new(&pb.pp("fc2"), hidden, out)? })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// `x * (1 + scale) + shift` with `(B, D)` modulation vectors.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> candle_core::Result<Tensor> {
    x.broadcast_mul(&(scale.unsqueeze(1)? + 1.0)?)?.broadcast_add(&shift.unsqueeze(1)?)
}

#[derive(Debug, Clone)]
struct StreamParams {
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    mlp: Mlp,
}

impl StreamParams {
    fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            modulation: Linear::zeros(&pb.pp("mod"), dim, 6 * dim)?,
            qkv: Linear::new(&pb.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&pb.pp("proj"), dim, dim)?,
            mlp: Mlp::new(&pb.pp("mlp"), dim, 4 * dim, dim)?,
        })
    }
}

/// Two-stream transformer block: each stream has its own weights and
/// adaptive-norm modulation, attention runs over the concatenated tokens.
#[derive(Debug, Clone)]
pub struct MmditBlock {
    ctx: StreamParams,
    img: StreamParams,
    heads: usize,
}

impl MmditBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::InvalidInput(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self { ctx: StreamParams::new(&pb.pp("ctx"), dim)?, img: StreamParams::new(&pb.pp("img"), dim)?, heads })
    }

    /// `img: (B, Ti, D)`, `ctx: (B, Tc, D)`, `vec: (B, D)`.
    pub fn forward(&self, img: &Tensor, ctx: &Tensor, vec: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let v = vec.silu()?;
        let mi = self.img.modulation.forward(&v)?.chunk(6, 1)?;
        let mc = self.ctx.modulation.forward(&v)?.chunk(6, 1)?;
        let ti = img.dim(1)?;
        let tc = ctx.dim(1)?;

        let xi = modulate(&layer_norm(img, 1e-6)?, &mi[0], &mi[1])?;
        let xc = modulate(&layer_norm(ctx, 1e-6)?, &mc[0], &mc[1])?;
        let qkv_i = self.img.qkv.forward(&xi)?.chunk(3, 2)?;
        let qkv_c = self.ctx.qkv.forward(&xc)?.chunk(3, 2)?;
        let q = Tensor::cat(&[&qkv_c[0], &qkv_i[0]], 1)?;
        let k = Tensor::cat(&[&qkv_c[1], &qkv_i[1]], 1)?;
        let vv = Tensor::cat(&[&qkv_c[2], &qkv_i[2]], 1)?;
        let out = attention(&q, &k, &vv, self.heads)?;
        let out_c = out.narrow(1, 0, tc)?;
        let out_i = out.narrow(1, tc, ti)?;

        let img = (img + self.img.proj.forward(&out_i)?.broadcast_mul(&mi[2].unsqueeze(1)?)?)?;
        let ctx = (ctx + self.ctx.proj.forward(&out_c)?.broadcast_mul(&mc[2].unsqueeze(1)?)?)?;
        let hi = self.img.mlp.forward(&modulate(&layer_norm(&img, 1e-6)?, &mi[3], &mi[4])?)?;
        let hc = self.ctx.mlp.forward(&modulate(&layer_norm(&ctx, 1e-6)?, &mc[3], &mc[4])?)?;
        let img = (img + hi.broadcast_mul(&mi[5].unsqueeze(1)?)?)?;
        let ctx = (ctx + hc.broadcast_mul(&mc[5].unsqueeze(1)?)?)?;
        Ok((img, ctx))
    }
}

/// Pre-norm self-attention transformer block.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    qkv: Linear,
    proj: Linear,
    mlp: Mlp,
    heads: usize,
}

impl SelfAttentionBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&pb.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&pb.pp("proj"), dim, dim)?,
            mlp: Mlp::new(&pb.pp("mlp"), dim, 4 * dim, dim)?,
            heads,
        })
    }
}

impl Module for SelfAttentionBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let qkv = self.qkv.forward(&layer_norm(x, 1e-6)?)?.chunk(3, 2)?;
        let x = (x + self.proj.forward(&attention(&qkv[0], &qkv[1], &qkv[2], self.heads)?)?)?;
        &x + self.mlp.forward(&layer_norm(&x, 1e-6)?)?
    }
}

/// Sinusoidal features `[sin(p w_0), cos(p w_0), sin(p w_1), ...]` with
/// `w_k = max_period^(-k / (dim/2))`.
pub fn sinusoid(position: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = max_period.powf(-(k as f64) / half as f64);
        out[2 * k] = (position * freq).sin();
        out[2 * k + 1] = (position * freq).cos();
    }
    out
}

/// `(T, dim)` table of 1-D sinusoidal position encodings for indices `0..len`.
pub fn sinusoid_table(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..len).flat_map(|i| sinusoid(i as f64, dim, 10_000.0)).collect();
    Ok(Tensor::from_vec(data, (len, dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic_and_names_are_unique() {
        let build = || {
            let pb = ParamBuilder::new(7, DType::F32, &Device::Cpu);
            Linear::new(&pb.pp("a"), 4, 3).unwrap();
            Linear::zeros(&pb.pp("b"), 4, 3).unwrap();
            pb.finish()
        };
        let (s1, s2) = (build(), build());
        assert_eq!(s1.checksum().unwrap(), s2.checksum().unwrap());
        assert_eq!(s1.names().collect::<Vec<_>>(), vec!["a.bias", "a.weight", "b.bias", "b.weight"]);
        let pb = ParamBuilder::new(7, DType::F32, &Device::Cpu);
        Linear::new(&pb.pp("a"), 4, 3).unwrap();
        assert!(Linear::new(&pb.pp("a"), 4, 3).is_err());
    }

    #[test]
    fn import_updates_model_tensors_in_place() {
        let pb = ParamBuilder::new(1, DType::F64, &Device::Cpu).frozen(true);
        let lin = Linear::new(&pb, 2, 1).unwrap();
        let store = pb.finish();
        let mut arrays = BTreeMap::new();
        arrays.insert("weight".to_string(), (vec![1, 2], vec![1.0, 2.0]));
        arrays.insert("bias".to_string(), (vec![1], vec![0.5]));
        store.import(&arrays).unwrap();
        let x = Tensor::new(&[[1.0f64, 1.0]], &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().to_vec2::<f64>().unwrap(), vec![vec![3.5]]);
        arrays.remove("bias");
        assert!(store.import(&arrays).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sinusoid_at_zero() {
        let s = sinusoid(0.0, 8, 10_000.0);
        assert_eq!(s, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
