//! Layers built from graph ops. Each layer holds only [`ParamId`]s; values
//! live in the [`ParamStore`] it was registered into.

use rand::Rng;

use super::kernels::AttnShape;
use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform initialisation in `[-scale/sqrt(fan_in), scale/sqrt(fan_in)]`.
pub fn scaled_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, scale: f64) -> Tensor {
    let bound = scale / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        scale: f64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            scaled_uniform(rng, &[fan_in, fan_out], fan_in, scale),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, d_hidden, 1.0),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), d_hidden, d_out, 1.0),
        }
    }

    pub fn param_count(d_in: usize, d_hidden: usize, d_out: usize) -> usize {
        Linear::param_count(d_in, d_hidden) + Linear::param_count(d_hidden, d_out)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head self-attention projections.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Mhsa {
            query: Linear::new(store, rng, &format!("{name}.query"), d, d, 1.0),
            key: Linear::new(store, rng, &format!("{name}.key"), d, d, 1.0),
            value: Linear::new(store, rng, &format!("{name}.value"), d, d, 1.0),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d, 1.0),
            heads,
        })
    }

    pub fn param_count(d: usize) -> usize {
        4 * Linear::param_count(d, d)
    }

    /// `x` is `[batch * seq, d]` with each sequence stored contiguously.
    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, seq: usize, causal: bool) -> Result<Var> {
        let d = g.value(x).cols();
        check_heads(d, self.heads)?;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let shape = AttnShape {
            batch,
            seq,
            heads: self.heads,
            head_dim: d / self.heads,
            causal,
        };
        let a = g.attention(q, k, v, shape)?;
        self.out.forward(g, a)
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Single-sequence multi-head self-attention over `[n_tok, d]`.
pub fn mhsa(g: &mut Graph, x: Var, params: &Mhsa, heads: usize, causal: bool) -> Result<Var> {
    let d = g.value(x).cols();
    check_heads(d, heads)?;
    if heads != params.heads {
        return Err(Error::Config(format!(
            "attention built for {} heads, called with {heads}",
            params.heads
        )));
    }
    let n_tok = g.value(x).rows();
    params.forward(g, x, 1, n_tok, causal)
}

/// Pre-norm transformer block: attention then a 4x MLP, residual around both.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: Mhsa,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

pub const MLP_EXPANSION: usize = 4;

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Block {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: Mhsa::new(store, rng, &format!("{name}.attn"), d, heads)?,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, MLP_EXPANSION * d, d),
        })
    }

    pub fn param_count(d: usize) -> usize {
        2 * LayerNorm::param_count(d) + Mhsa::param_count(d) + Mlp::param_count(d, MLP_EXPANSION * d, d)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, seq: usize, causal: bool) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let h = self.attn.forward(g, h, batch, seq, causal)?;
        let x = g.add(x, h)?;
        let h = self.ln_mlp.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}

/// Gated recurrent unit cell.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub update_x: Linear,
    pub update_h: Linear,
    pub reset_x: Linear,
    pub reset_h: Linear,
    pub cand_x: Linear,
    pub cand_h: Linear,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        let mut lin = |part: &str| Linear::new(store, rng, &format!("{name}.{part}"), d, d, 1.0);
        GruCell {
            update_x: lin("update_x"),
            update_h: lin("update_h"),
            reset_x: lin("reset_x"),
            reset_h: lin("reset_h"),
            cand_x: lin("cand_x"),
            cand_h: lin("cand_h"),
        }
    }

    pub fn param_count(d: usize) -> usize {
        6 * Linear::param_count(d, d)
    }

    /// One step: `h' = (1 - z) * n + z * h`.
    pub fn forward(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let zx = self.update_x.forward(g, x)?;
        let zh = self.update_h.forward(g, h)?;
        let z = g.add(zx, zh)?;
        let z = g.sigmoid(z);
        let rx = self.reset_x.forward(g, x)?;
        let rh = self.reset_h.forward(g, h)?;
        let r = g.add(rx, rh)?;
        let r = g.sigmoid(r);
        let nx = self.cand_x.forward(g, x)?;
        let nh = self.cand_h.forward(g, h)?;
        let nh = g.mul(r, nh)?;
        let n = g.add(nx, nh)?;
        let n = g.tanh(n);
        let one_minus_z = g.affine(z, -1.0, 1.0);
        let a = g.mul(one_minus_z, n)?;
        let b = g.mul(z, h)?;
        g.add(a, b)
    }
}
