//! Parameter storage and the transformer layers shared by the language model
//! and the vision encoder-decoder. Everything works on unbatched 2-D
//! `(positions, features)` tensors; batching is a loop in the trainer.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Additive mask value for blocked attention positions.
const MASKED: f64 = -1e9;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Named trainable tensors. Names are unique and iterate in sorted order,
/// which fixes the optimizer and checkpoint layouts.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
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

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::ones(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    /// Swaps in a new tensor (possibly of a different shape) under an
    /// existing name and returns the tensor layers should hold from now on.
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if !self.vars.contains_key(name) {
            return Err(Error::Config(format!("unknown parameter {name}")));
        }
        self.vars.remove(name);
        self.insert(name, t)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameter values in place. Shapes must match.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64) -> Result<Self> {
        Ok(Linear {
            weight: store.normal(&format!("{name}.weight"), &[d_in, d_out], std)?,
            bias: Some(store.zeros(&format!("{name}.bias"), &[d_out])?),
        })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64) -> Result<Self> {
        Ok(Linear {
            weight: store.normal(&format!("{name}.weight"), &[d_in, d_out], std)?,
            bias: None,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.ones(&format!("{name}.gain"), &[dim])?,
            bias: store.zeros(&format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Additive causal mask of shape `(n, n)`: 0 on and below the diagonal.
pub fn causal_mask(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j <= i { 0.0 } else { MASKED }))
        .collect();
    Ok(Tensor::from_vec(data, (n, n), device)?.to_dtype(dtype)?)
}

/// Multi-head scaled dot-product attention from `query` rows to `context`
/// rows.
#[derive(Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        out_std: f64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} is not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, 0.02)?,
            k: Linear::new(store, &format!("{name}.k"), context_dim, dim, 0.02)?,
            v: Linear::new(store, &format!("{name}.v"), context_dim, dim, 0.02)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, out_std)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        Ok(x
            .reshape((n, self.heads, d / self.heads))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (n, d) = query.dims2()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let attn = softmax_last(&scores)?;
        let mixed = attn.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((n, d))?;
        self.out.forward(&mixed)
    }
}

#[derive(Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, out_std: f64) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, 0.02)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, out_std)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone)]
pub struct SelfAttentionBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, n_layers: usize) -> Result<Self> {
        let out_std = 0.02 / (2.0 * n_layers as f64).sqrt();
        Ok(SelfAttentionBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, out_std)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, out_std)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, mask)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Pre-norm block where query rows attend over a fixed context.
#[derive(Clone)]
pub struct CrossAttentionBlock {
    ln_q: LayerNorm,
    ln_ctx: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, n_layers: usize) -> Result<Self> {
        let out_std = 0.02 / (2.0 * n_layers as f64).sqrt();
        Ok(CrossAttentionBlock {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim)?,
            ln_ctx: LayerNorm::new(store, &format!("{name}.ln_ctx"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, out_std)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, out_std)?,
        })
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.ln_q.forward(query)?;
        let ctx = self.ln_ctx.forward(context)?;
        let x = (query + self.attn.forward(&q, &ctx, None)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}
