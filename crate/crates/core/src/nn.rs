//! Layer building blocks. Each layer holds [`ParamId`]s into a shared
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Parameter registration context: a store, a name prefix and an RNG.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub<'b>(&'b mut self, name: &str) -> Builder<'b, R> {
        Builder {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = uniform_init(shape, fan_in, self.rng);
        let name = self.name(leaf);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, Tensor::full(shape.to_vec(), 1.0))
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let mut t = Tensor::randn(shape.to_vec(), std, self.rng);
        t.round_to_f32();
        let name = self.name(leaf);
        self.store.add(name, t)
    }
}

/// `y = x W + b` on `[L, in]` rows; the weight is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<R>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = b.uniform("weight", &[in_dim, out_dim], in_dim);
        let bias = bias.then(|| b.uniform("bias", &[out_dim], in_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Zero weight and bias: the layer outputs exactly `0.0` at init.
    pub fn zero<R: Rng>(b: &mut Builder<R>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: b.zeros("weight", &[in_dim, out_dim]),
            bias: Some(b.zeros("bias", &[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_rows(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: b.uniform("weight", &[cout, cin, kernel, kernel], fan_in),
            bias: b.uniform("bias", &[cout], fan_in),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn zero<R: Rng>(
        b: &mut Builder<R>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            weight: b.zeros("weight", &[cout, cin, kernel, kernel]),
            bias: b.zeros("bias", &[cout]),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        let b = g.param(self.bias);
        g.add_channels(y, b)
    }
}

/// Group normalisation over `[C, H, W]` with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<R: Rng>(b: &mut Builder<R>, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels, {groups} groups");
        Self {
            gamma: b.ones("gamma", &[channels]),
            beta: b.zeros("beta", &[channels]),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let grouped = g.reshape(x, &[self.groups, n / self.groups])?;
        let normed = g.normalize_rows(grouped, 1e-5);
        let normed = g.reshape(normed, &shape)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_channels(normed, gamma)?;
        g.add_channels(y, beta)
    }
}

/// Layer normalisation over the rows of `[L, D]`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<R>, dim: usize) -> Self {
        Self {
            gamma: b.ones("gamma", &[dim]),
            beta: b.zeros("beta", &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let normed = g.normalize_rows(x, 1e-5);
        let gamma = g.param(self.gamma);
        let y = g.mul_rows(normed, gamma)?;
        let beta = g.param(self.beta);
        g.add_rows(y, beta)
    }
}

/// Multi-head cross-attention: queries from `x`, keys and values from
/// `context`. With `zero_out` the output projection starts at exactly zero.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        query_dim: usize,
        context_dim: usize,
        inner_dim: usize,
        out_dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        assert!(inner_dim.is_multiple_of(heads), "{inner_dim} not divisible by {heads} heads");
        let to_q = Linear::new(&mut b.sub("to_q"), query_dim, inner_dim, false);
        let to_k = Linear::new(&mut b.sub("to_k"), context_dim, inner_dim, false);
        let to_v = Linear::new(&mut b.sub("to_v"), context_dim, inner_dim, false);
        let to_out = if zero_out {
            Linear::zero(&mut b.sub("to_out"), inner_dim, out_dim)
        } else {
            Linear::new(&mut b.sub("to_out"), inner_dim, out_dim, true)
        };
        Self {
            to_q,
            to_k,
            to_v,
            to_out,
            heads,
        }
    }

    /// `x: [Lq, query_dim]`, `context: [Lk, context_dim]` → `[Lq, out_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var, context: Var) -> Result<Var> {
        if g.shape(context)[1] != self.to_k.in_dim {
            return Err(dim_err!(
                "attention context width {} != {}",
                g.shape(context)[1],
                self.to_k.in_dim
            ));
        }
        let q = self.to_q.forward(g, x)?;
        let k = self.to_k.forward(g, context)?;
        let v = self.to_v.forward(g, context)?;
        let mixed = multi_head_attention(g, q, k, v, self.heads)?;
        self.to_out.forward(g, mixed)
    }
}

/// Scaled dot-product attention over column-split heads.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let inner = g.shape(q)[1];
    let dh = inner / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Two-layer SiLU feed-forward `[L, dim] -> [L, dim]`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<R>, dim: usize, mult: usize) -> Self {
        Self {
            up: Linear::new(&mut b.sub("up"), dim, dim * mult, true),
            down: Linear::new(&mut b.sub("down"), dim * mult, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

/// `[C, H, W]` feature map to `[H*W, C]` tokens.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// `[H*W, C]` tokens back to `[C, H, W]`.
pub fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(t)[1];
    let flat = g.transpose(t)?;
    g.reshape(flat, &[c, h, w])
}
