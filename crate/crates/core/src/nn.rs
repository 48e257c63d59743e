//! Layers shared by the denoiser and the contrastive encoders.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_std(store, name, fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn num_params(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim]))?,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Pre-norm transformer encoder block: self-attention then a GELU MLP, each
/// wrapped in a residual connection.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

/// MLP hidden width as a multiple of the model width.
pub const MLP_RATIO: usize = 4;

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = MLP_RATIO * dim;
        // Residual branches start small so a deep stack begins near identity.
        let out_std = 0.5 / (hidden as f64).sqrt();
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            proj: Linear::with_std(store, &format!("{name}.proj"), dim, dim, out_std, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::with_std(store, &format!("{name}.fc2"), hidden, dim, out_std, rng)?,
            heads,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        let hidden = MLP_RATIO * dim;
        2 * LayerNorm::num_params(dim)
            + Linear::num_params(dim, 3 * dim)
            + Linear::num_params(dim, dim)
            + Linear::num_params(dim, hidden)
            + Linear::num_params(hidden, dim)
    }

    /// `x` is `[batch * tokens, dim]`; attention stays within each sequence.
    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let att = g.attention(qkv, batch, self.heads)?;
        let att = self.proj.forward(g, att)?;
        let x = g.add(x, att)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Standard sinusoidal encoding of a scalar position: interleaved sin/cos
/// over geometrically spaced frequencies.
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (position * freq).sin();
        out[2 * i + 1] = (position * freq).cos();
    }
    out
}

/// `[len, dim]` table of sinusoidal encodings for positions `0..len`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros([len, dim]);
    for p in 0..len {
        t.row_mut(p).copy_from_slice(&sinusoidal(p as f64, dim));
    }
    t
}
