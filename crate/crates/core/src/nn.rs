//! Parameter storage with seeded initialisation, and the layers shared by
//! every model in the crate.
//!
//! All sequence tensors are time-major `(length, width)`; utterances are
//! processed one at a time, so no padding masks are needed.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv1d, Conv1dConfig, Conv2d, Conv2dConfig, Linear};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

/// Named trainable parameters, created in a fixed order from a seeded
/// generator so that model construction is reproducible.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} defined twice")));
        }
        let len: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..len).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
                (0..len).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// All variables in name order.
    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Variables whose name starts with one of `prefixes`.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flattened `f64` copies of every parameter, keyed by name.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor();
                let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                Ok((k.clone(), (t.dims().to_vec(), data)))
            })
            .collect()
    }

    /// Overwrites every parameter from `entries`; names and shapes must match.
    pub fn import(&self, entries: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for (name, var) in &self.vars {
            let (shape, data) = entries
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {shape:?}, model expects {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Builds a `Linear` with weight `(out, in)`.
pub fn linear(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
    let w = ps.var(&format!("{name}.weight"), &[d_out, d_in], Init::FanIn(d_in))?;
    let b = if bias {
        Some(ps.var(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

pub fn linear_init(
    ps: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    init: Init,
) -> Result<Linear> {
    let w = ps.var(&format!("{name}.weight"), &[d_out, d_in], init)?;
    let b = ps.var(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
    Ok(Linear::new(w, Some(b)))
}

/// Time-major 1-D convolution with "same" padding (odd kernels).
#[derive(Debug, Clone)]
pub struct SeqConv {
    conv: Conv1d,
}

impl SeqConv {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel size {kernel} must be odd")));
        }
        let fan_in = d_in * kernel;
        let w = ps.var(&format!("{name}.weight"), &[d_out, d_in, kernel], Init::FanIn(fan_in))?;
        let b = ps.var(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        let cfg = Conv1dConfig {
            padding: kernel / 2,
            ..Default::default()
        };
        Ok(Self {
            conv: Conv1d::new(w, Some(b), cfg),
        })
    }

    /// `(len, d_in) -> (len, d_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(&x.t()?.unsqueeze(0)?)?;
        Ok(y.squeeze(0)?.t()?)
    }
}

pub fn conv2d(
    ps: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
) -> Result<Conv2d> {
    let fan_in = c_in * kernel * kernel;
    let w = ps.var(
        &format!("{name}.weight"),
        &[c_out, c_in, kernel, kernel],
        Init::Normal((2.0 / fan_in as f64).sqrt()),
    )?;
    let b = ps.var(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

const LN_EPS: f64 = 1e-5;

fn normalize_last(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.var(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.var(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize_last(x)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// Layer normalisation whose scale and shift are predicted from a
/// conditioning vector: `LN(x) * (1 + W_g c) + W_b c`.
#[derive(Debug, Clone)]
pub struct CondLayerNorm {
    scale: Linear,
    shift: Linear,
}

impl CondLayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, d_cond: usize) -> Result<Self> {
        let std = 0.1 / (d_cond as f64).sqrt();
        Ok(Self {
            scale: linear_init(ps, &format!("{name}.scale"), d_cond, dim, Init::Normal(std))?,
            shift: linear_init(ps, &format!("{name}.shift"), d_cond, dim, Init::Normal(std))?,
        })
    }

    /// `cond` has shape `(d_cond,)`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let c = cond.unsqueeze(0)?;
        let scale = (self.scale.forward(&c)? + 1.0)?;
        let shift = self.shift.forward(&c)?;
        Ok(normalize_last(x)?.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

#[derive(Debug, Clone)]
pub enum Norm {
    Plain(LayerNorm),
    Cond(CondLayerNorm),
}

impl Norm {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, d_cond: Option<usize>) -> Result<Self> {
        Ok(match d_cond {
            Some(dc) => Norm::Cond(CondLayerNorm::new(ps, name, dim, dc)?),
            None => Norm::Plain(LayerNorm::new(ps, name, dim)?),
        })
    }

    pub fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        match (self, cond) {
            (Norm::Plain(ln), _) => ln.forward(x),
            (Norm::Cond(ln), Some(c)) => ln.forward(x, c),
            (Norm::Cond(_), None) => Err(Error::invalid("conditional norm needs a conditioning vector")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: linear(ps, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            out: linear(ps, &format!("{name}.out"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// `mask` is additive, shape `(len, len)`.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let len = x.dim(0)?;
        let hd = self.dim / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((len, 3, self.heads, hd))?
            .permute((1, 2, 0, 3))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs.matmul(&v)?.permute((1, 0, 2))?.reshape((len, self.dim))?;
        Ok(self.out.forward(&ctx)?)
    }
}

/// Pre-norm transformer block, optionally conditioned through its norms.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        d_cond: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(ps, &format!("{name}.norm1"), dim, d_cond)?,
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm2: Norm::new(ps, &format!("{name}.norm2"), dim, d_cond)?,
            ff1: linear(ps, &format!("{name}.ff1"), dim, dim * ff_mult, true)?,
            ff2: linear(ps, &format!("{name}.ff2"), dim * ff_mult, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, cond: Option<&Tensor>) -> Result<Tensor> {
        let h = self.attn.forward(&self.norm1.forward(x, cond)?, mask)?;
        let x = (x + h)?;
        let h = self
            .ff2
            .forward(&self.ff1.forward(&self.norm2.forward(&x, cond)?)?.relu()?)?;
        Ok((x + h)?)
    }
}

pub fn blocks(
    ps: &mut ParamStore,
    name: &str,
    count: usize,
    dim: usize,
    heads: usize,
    ff_mult: usize,
    d_cond: Option<usize>,
) -> Result<Vec<Block>> {
    (0..count)
        .map(|i| Block::new(ps, &format!("{name}.{i}"), dim, heads, ff_mult, d_cond))
        .collect()
}

/// Fixed sinusoidal position table, `(len, dim)`.
pub fn sinusoidal_positions(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            data[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), device)?.to_dtype(dtype)?)
}

/// Repeats row `i` of `h` `durations[i]` times, in order.
pub fn expand_rows(h: &Tensor, durations: &[u32]) -> Result<Tensor> {
    let n = h.dim(0)?;
    if durations.len() != n {
        return Err(Error::invalid(format!(
            "{} durations for {n} rows",
            durations.len()
        )));
    }
    let index: Vec<u32> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i as u32, d as usize))
        .collect();
    if index.is_empty() {
        return Err(Error::invalid("durations sum to zero"));
    }
    let idx = Tensor::from_vec(index.clone(), index.len(), h.device())?;
    Ok(h.index_select(&idx, 0)?)
}

/// Scalar value of a 0-d tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec2(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn to_vec1(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Scales the gradients in `grads` so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut candle_core::backprop::GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = total.sqrt();
    if norm.is_finite() && norm > max_norm {
        let factor = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * factor)?);
            }
        }
    }
    Ok(norm)
}
