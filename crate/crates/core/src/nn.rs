//! Small neural-network toolkit on top of candle: a seeded parameter store,
//! norms built from differentiable primitives, attention blocks and fixed
//! sinusoidal encodings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Result, Shape, Tensor, Var, D};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Trainable parameters keyed by name, initialized from a seed so that the
/// same architecture and seed always produce the same weights.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let vars = self.vars.lock().unwrap();
        vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path)
    }

    /// Overwrites every existing variable with the value stored under the
    /// same name in `path`.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let stored = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.set_from(&stored)
    }

    pub fn set_from(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        for (name, var) in vars.iter() {
            let value = tensors
                .get(name)
                .ok_or_else(|| candle_core::Error::Msg(format!("missing tensor {name}")))?;
            var.set(&value.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    fn init_tensor(&self, shape: &Shape, name: &str, init: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| mean + stdev * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..=up)).collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                    }
                    NormalOrUniform::Normal => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
                }
            }
        };
        Tensor::from_vec(values, shape, dev)?.to_dtype(dtype)
    }
}

impl candle_nn::var_builder::SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        if let Some(var) = self.vars.lock().unwrap().get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {s:?}", var.shape());
            }
            return Ok(var.as_tensor().clone());
        }
        let tensor = self.init_tensor(&s, name, h, dtype, dev)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.vars.lock().unwrap().insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> Result<Tensor> {
        match self.vars.lock().unwrap().get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown variable {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().unwrap().contains_key(name)
    }
}

/// Loads a frozen (non-trainable) set of weights.
pub fn frozen_var_builder(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<VarBuilder<'static>> {
    let tensors = candle_core::safetensors::load(path, device)?;
    Ok(VarBuilder::from_tensors(tensors, dtype, device))
}

pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    candle_nn::linear(in_dim, out_dim, vb)
}

/// Linear layer whose weight and bias start at zero.
pub fn zero_linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    let w = vb.get_with_hints((out_dim, in_dim), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

pub fn conv2d(cin: usize, cout: usize, kernel: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        ..Default::default()
    };
    candle_nn::conv2d(cin, cout, kernel, cfg, vb)
}

/// 1×1 convolution initialized to zero, the injection point of the control
/// branch.
pub fn zero_conv(cin: usize, cout: usize, vb: VarBuilder) -> Result<Conv2d> {
    let w = vb.get_with_hints((cout, cin, 1, 1), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(w, Some(b), Conv2dConfig::default()))
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Group normalization over `(B, C, H, W)` feature maps.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

/// Largest group count ≤ 8 dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            groups: group_count(channels),
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(dim, hidden, vb.pp("fc1"))?,
            fc2: linear(hidden, out, vb.pp("fc2"))?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs. Inputs are `(B, L, dim)`.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new(q_dim: usize, kv_dim: usize, dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            candle_core::bail!("attention dim {dim} not divisible by {heads} heads");
        }
        Ok(Self {
            q: linear(q_dim, dim, vb.pp("q"))?,
            k: linear(kv_dim, dim, vb.pp("k"))?,
            v: linear(kv_dim, dim, vb.pp("v"))?,
            out: linear(dim, dim, vb.pp("out"))?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        x.reshape((b, l, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor) -> Result<Tensor> {
        let (b, lq, _) = xq.dims3()?;
        let q = self.split_heads(&self.q.forward(xq)?)?;
        let k = self.split_heads(&self.k.forward(xkv)?)?;
        let v = self.split_heads(&self.v.forward(xkv)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let logits = (q.matmul(&k.t()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let o = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, lq, self.heads * self.head_dim))?;
        self.out.forward(&o)
    }
}

/// Pre-norm self-attention transformer block.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            attn: Attention::new(dim, dim, dim, heads, vb.pp("attn"))?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            mlp: Mlp::new(dim, dim * mlp_ratio, dim, vb.pp("mlp"))?,
        })
    }
}

impl Module for SelfAttentionBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

/// Pre-norm block where queries attend to an external token set. Queries do
/// not attend to each other, so each query row is processed independently.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn new(dim: usize, kv_dim: usize, heads: usize, mlp_ratio: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(dim, vb.pp("norm_q"))?,
            norm_kv: LayerNorm::new(kv_dim, vb.pp("norm_kv"))?,
            attn: Attention::new(dim, kv_dim, dim, heads, vb.pp("attn"))?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            mlp: Mlp::new(dim, dim * mlp_ratio, dim, vb.pp("mlp"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let kv = self.norm_kv.forward(context)?;
        let x = (x + self.attn.forward(&self.norm_q.forward(x)?, &kv)?)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

/// Fixed sinusoidal features: for each input scalar `x` and frequency
/// `2^k · π`, emits `sin` and `cos`. Output width is `in_dim · 2 · num_freqs`.
pub fn sinusoidal_features(values: &[f32], in_dim: usize, num_freqs: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(values.len() * 2 * num_freqs);
    for row in values.chunks(in_dim) {
        for &x in row {
            for k in 0..num_freqs {
                let arg = x as f64 * std::f64::consts::PI * (1u64 << k) as f64;
                out.push(arg.sin() as f32);
                out.push(arg.cos() as f32);
            }
        }
    }
    out
}

/// Transformer-style sinusoidal embedding of a scalar position (or time
/// step) into `dim` channels.
pub fn timestep_embedding(positions: &[f64], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((p * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((p * freq).cos() as f32);
        }
        if dim % 2 == 1 {
            out.push(0.0);
        }
    }
    out
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    (a - b)?.sqr()?.mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_is_seeded_and_order_independent() {
        let dev = Device::Cpu;
        let a = ParamStore::new(3);
        let vb = a.var_builder(DType::F32, &dev);
        let _ = linear(4, 5, vb.pp("x")).unwrap();
        let _ = linear(2, 2, vb.pp("y")).unwrap();
        let b = ParamStore::new(3);
        let vb = b.var_builder(DType::F32, &dev);
        let _ = linear(2, 2, vb.pp("y")).unwrap();
        let _ = linear(4, 5, vb.pp("x")).unwrap();
        let (ta, tb) = (a.tensors(), b.tensors());
        for (k, v) in ta {
            let diff = (v - &tb[&k]).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0, "{k}");
        }
        let c = ParamStore::new(4);
        let vb = c.var_builder(DType::F32, &dev);
        let _ = linear(4, 5, vb.pp("x")).unwrap();
        let diff = (&a.tensors()["x.weight"] - &c.tensors()["x.weight"])
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn layer_norm_normalizes() {
        let dev = Device::Cpu;
        let store = ParamStore::new(0);
        let ln = LayerNorm::new(4, store.var_builder(DType::F64, &dev)).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &dev).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn sinusoid_width() {
        let f = sinusoidal_features(&[0.0, 0.5, 1.0, 0.25], 2, 3);
        assert_eq!(f.len(), 4 * 2 * 3);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 1.0);
        assert_eq!(timestep_embedding(&[0.0, 5.0], 8).len(), 16);
    }

    #[test]
    fn save_load_round_trip() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let a = ParamStore::new(1);
        let _ = linear(3, 3, a.var_builder(DType::F32, &dev).pp("l")).unwrap();
        a.save(dir.path().join("w.safetensors")).unwrap();
        let b = ParamStore::new(2);
        let _ = linear(3, 3, b.var_builder(DType::F32, &dev).pp("l")).unwrap();
        b.load(dir.path().join("w.safetensors")).unwrap();
        let d = (&a.tensors()["l.weight"] - &b.tensors()["l.weight"])
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }
}
