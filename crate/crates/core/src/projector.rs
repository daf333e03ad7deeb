//! Identity projector: the ID embedding is expanded into `N` query tokens
//! that attend over the general image encoder's patch tokens.
//!
//! Per layer: `y = W_out · attn(q, K(patches), V(patches))`, then a residual
//! feed-forward `y + FF(y)`. Layers after the first derive their queries from
//! the previous tokens and add onto them. Patch order carries no information.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{IdEmbedding, PatchFeatures, ID_DIM};
use crate::error::{dim_err, Error, Result};
use crate::nn::{multi_head_attention, Builder, FeedForward, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub n_tokens: usize,
    pub d_attn: usize,
    pub heads: usize,
    pub depth: usize,
    pub ff_mult: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            n_tokens: 4,
            d_attn: 32,
            heads: 4,
            depth: 1,
            ff_mult: 2,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.depth == 0 || self.ff_mult == 0 {
            return Err(Error::Config(
                "projector n_tokens, depth and ff_mult must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.d_attn.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "projector d_attn {} not divisible by {} heads",
                self.d_attn, self.heads
            )));
        }
        Ok(())
    }
}

/// `N x d_ctx` identity conditioning tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTokens {
    pub tokens: Tensor,
}

impl FaceTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] == 0 {
            return Err(dim_err!("face tokens must be [N>=1, d], got {:?}", tokens.shape()));
        }
        if !tokens.all_finite() {
            return Err(Error::Range("non-finite face token".into()));
        }
        Ok(Self { tokens })
    }

    pub fn count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Debug, Clone)]
struct ProjectorLayer {
    to_q: Option<Linear>,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Projector {
    pub config: ProjectorConfig,
    pub d_vis: usize,
    pub d_ctx: usize,
    id_to_queries: Linear,
    layers: Vec<ProjectorLayer>,
}

impl Projector {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        config: &ProjectorConfig,
        d_vis: usize,
        d_ctx: usize,
    ) -> Result<Self> {
        config.validate()?;
        let (n, da) = (config.n_tokens, config.d_attn);
        let id_to_queries = Linear::new(&mut b.sub("id_to_queries"), ID_DIM, n * da, true);
        let layers = (0..config.depth)
            .map(|i| {
                let mut lb = b.sub(&format!("layers{i}"));
                ProjectorLayer {
                    to_q: (i > 0).then(|| Linear::new(&mut lb.sub("to_q"), d_ctx, da, false)),
                    to_k: Linear::new(&mut lb.sub("to_k"), d_vis, da, false),
                    to_v: Linear::new(&mut lb.sub("to_v"), d_vis, da, false),
                    to_out: Linear::new(&mut lb.sub("to_out"), da, d_ctx, true),
                    ff: FeedForward::new(&mut lb.sub("ff"), d_ctx, config.ff_mult),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            d_vis,
            d_ctx,
            id_to_queries,
            layers,
        })
    }

    /// `id: [1, 512]`, `patches: [P, d_vis]` → `[N, d_ctx]`.
    pub fn forward(&self, g: &mut Graph, id: Var, patches: Var) -> Result<Var> {
        if g.shape(id) != [1, ID_DIM] {
            return Err(dim_err!("projector id input {:?}, expected [1, {ID_DIM}]", g.shape(id)));
        }
        if g.shape(patches).len() != 2 || g.shape(patches)[1] != self.d_vis {
            return Err(dim_err!(
                "projector patch width {:?} != d_vis {}",
                g.shape(patches),
                self.d_vis
            ));
        }
        let (n, da) = (self.config.n_tokens, self.config.d_attn);
        let q0 = self.id_to_queries.forward(g, id)?;
        let q0 = g.reshape(q0, &[n, da])?;
        let mut tokens: Option<Var> = None;
        for layer in &self.layers {
            let q = match (&layer.to_q, tokens) {
                (Some(to_q), Some(t)) => to_q.forward(g, t)?,
                _ => q0,
            };
            let k = layer.to_k.forward(g, patches)?;
            let v = layer.to_v.forward(g, patches)?;
            let a = multi_head_attention(g, q, k, v, self.config.heads)?;
            let y = layer.to_out.forward(g, a)?;
            let t = match tokens {
                Some(prev) => g.add(prev, y)?,
                None => y,
            };
            let f = layer.ff.forward(g, t)?;
            tokens = Some(g.add(t, f)?);
        }
        Ok(tokens.expect("depth >= 1"))
    }

    pub fn project(
        &self,
        store: &ParamStore,
        id: &IdEmbedding,
        patches: &PatchFeatures,
    ) -> Result<FaceTokens> {
        let mut g = Graph::new(store);
        let i = g.constant(id.to_tensor());
        let p = g.constant(patches.tokens.clone());
        let out = self.forward(&mut g, i, p)?;
        FaceTokens::new(g.value(out).clone())
    }
}

/// `normalize(alpha * a + (1 - alpha) * b)`; the endpoints return the inputs
/// unchanged.
pub fn mix_identities(a: &IdEmbedding, b: &IdEmbedding, alpha: f64) -> Result<IdEmbedding> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("mix alpha {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(a.clone());
    }
    if alpha == 0.0 {
        return Ok(b.clone());
    }
    let raw = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
        .collect();
    IdEmbedding::from_raw(raw)
}

/// Token-space alternative: `alpha * a + (1 - alpha) * b` on projected tokens.
pub fn mix_face_tokens(a: &FaceTokens, b: &FaceTokens, alpha: f64) -> Result<FaceTokens> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("mix alpha {alpha} outside [0, 1]")));
    }
    let t = a.tokens.zip_map(&b.tokens, |x, y| alpha * x + (1.0 - alpha) * y)?;
    FaceTokens::new(t)
}
