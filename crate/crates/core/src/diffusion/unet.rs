//! The denoiser: a small UNet over `[C, s, s]` latents with a text/face
//! transformer block at selected levels and at the bottleneck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{from_tokens, to_tokens, Builder, Conv2d, CrossAttention, FeedForward, GroupNorm, LayerNorm, Linear};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_side: usize,
    pub base_width: usize,
    pub level_mults: Vec<usize>,
    /// Encoder/decoder levels that carry a transformer block; the bottleneck
    /// always has one.
    pub attn_levels: Vec<usize>,
    pub heads: usize,
    pub groups: usize,
    pub d_ctx: usize,
    pub n_face_tokens: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Channels of the strided pose-map embedding in PoseNet.
    pub pose_embed_width: usize,
    /// Side of the pose map (the training image resolution).
    pub image_side: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_side: 8,
            base_width: 32,
            level_mults: vec![1, 2, 2],
            attn_levels: vec![0, 1, 2],
            heads: 2,
            groups: 4,
            d_ctx: 32,
            n_face_tokens: 4,
            timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            pose_embed_width: 8,
            image_side: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.level_mults.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.level_mults.iter().map(|m| m * self.base_width).collect()
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.base_width
    }

    pub fn has_attn(&self, level: usize) -> bool {
        self.attn_levels.contains(&level)
    }

    /// Number of stride-2 convolutions taking the pose map to latent size.
    pub fn pose_downsamples(&self) -> usize {
        (self.image_side / self.latent_side).trailing_zeros() as usize
    }

    /// `[C_l, H_l, W_l]` of the skip tensor at every encoder level.
    pub fn skip_shapes(&self) -> Vec<[usize; 3]> {
        self.widths()
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let s = self.latent_side >> l;
                [c, s, s]
            })
            .collect()
    }

    pub fn mid_shape(&self) -> [usize; 3] {
        let l = self.levels() - 1;
        let s = self.latent_side >> l;
        [self.widths()[l], s, s]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_side, self.latent_side]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.levels() < 2 {
            return err(format!("denoiser needs at least 2 levels, got {}", self.levels()));
        }
        if self.latent_channels == 0 || self.base_width == 0 || self.level_mults.contains(&0) {
            return err("denoiser widths must be positive".into());
        }
        if !self.base_width.is_multiple_of(2) {
            return err(format!("base width {} must be even", self.base_width));
        }
        if self.latent_side == 0 || !self.latent_side.is_multiple_of(1 << (self.levels() - 1)) {
            return err(format!(
                "latent side {} not divisible by 2^{}",
                self.latent_side,
                self.levels() - 1
            ));
        }
        if self.heads == 0 || self.groups == 0 {
            return err("heads and groups must be positive".into());
        }
        for w in self.widths() {
            if w % self.heads != 0 || w % self.groups != 0 {
                return err(format!(
                    "width {w} not divisible by {} heads and {} groups",
                    self.heads, self.groups
                ));
            }
        }
        if !self.base_width.is_multiple_of(self.groups) {
            return err("groups must divide the base width".into());
        }
        if let Some(&l) = self.attn_levels.iter().find(|&&l| l >= self.levels()) {
            return err(format!("attention level {l} out of range"));
        }
        if self.d_ctx == 0 || self.n_face_tokens == 0 {
            return err("d_ctx and n_face_tokens must be positive".into());
        }
        if self.timesteps < 2 {
            return err(format!("timesteps {} must be at least 2", self.timesteps));
        }
        let ratio = self.image_side / self.latent_side.max(1);
        if !self.image_side.is_multiple_of(self.latent_side) || !ratio.is_power_of_two() {
            return err(format!(
                "image side {} must be a power-of-two multiple of latent side {}",
                self.image_side, self.latent_side
            ));
        }
        if self.pose_embed_width == 0 {
            return err("pose_embed_width must be positive".into());
        }
        Ok(())
    }

    /// Closed-form scalar count of the denoiser's trainable tensors.
    pub fn param_count(&self) -> usize {
        let ws = self.widths();
        let (b, td, c0) = (self.base_width, self.temb_dim(), ws[0]);
        let mut n = time_mlp_params(b, td);
        n += conv_params(self.latent_channels, c0, 3);
        let mut prev = c0;
        for (l, &c) in ws.iter().enumerate() {
            n += resblock_params(prev, c, td);
            if self.has_attn(l) {
                n += transformer_params(c, self.d_ctx);
            }
            if l + 1 < ws.len() {
                n += conv_params(c, c, 3);
            }
            prev = c;
        }
        n += resblock_params(prev, prev, td) + transformer_params(prev, self.d_ctx);
        for l in (0..ws.len()).rev() {
            let c = ws[l];
            n += resblock_params(prev + c, c, td);
            if self.has_attn(l) {
                n += transformer_params(c, self.d_ctx);
            }
            if l > 0 {
                n += conv_params(c, c, 3);
            }
            prev = c;
        }
        n + 2 * c0 + conv_params(c0, self.latent_channels, 3)
    }
}

pub(crate) fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

pub(crate) fn time_mlp_params(base: usize, td: usize) -> usize {
    base * td + td + td * td + td
}

pub(crate) fn resblock_params(cin: usize, cout: usize, td: usize) -> usize {
    let skip = if cin == cout { 0 } else { conv_params(cin, cout, 1) };
    2 * cin + conv_params(cin, cout, 3) + td * cout + cout + 2 * cout + conv_params(cout, cout, 3) + skip
}

fn attn_params(c: usize, d_ctx: usize) -> usize {
    c * c + 2 * d_ctx * c + c * c + c
}

fn transformer_params(c: usize, d_ctx: usize) -> usize {
    2 * c + 2 * attn_params(c, d_ctx) + (c * 2 * c + 2 * c) + (2 * c * c + c)
}

/// `[dim]` sinusoidal features: `sin(t f_i)` then `cos(t f_i)` with
/// `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    Tensor::from_parts(vec![1, dim], out)
}

/// Sinusoidal features followed by a two-layer SiLU MLP; returns the
/// activated embedding consumed by every residual block.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new<R: Rng>(b: &mut Builder<R>, base: usize, out: usize) -> Self {
        Self {
            dim: base,
            l1: Linear::new(&mut b.sub("l1"), base, out, true),
            l2: Linear::new(&mut b.sub("l2"), out, out, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, t: usize) -> Result<Var> {
        let x = g.constant(timestep_features(t, self.dim));
        let h = self.l1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.l2.forward(g, h)?;
        Ok(g.silu(h))
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng>(b: &mut Builder<R>, cin: usize, cout: usize, td: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(&mut b.sub("norm1"), cin, groups),
            conv1: Conv2d::new(&mut b.sub("conv1"), cin, cout, 3, 1),
            temb: Linear::new(&mut b.sub("temb"), td, cout, true),
            norm2: GroupNorm::new(&mut b.sub("norm2"), cout, groups),
            conv2: Conv2d::new(&mut b.sub("conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(&mut b.sub("skip"), cin, cout, 1, 1)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, h)?;
        let tb = self.temb.forward(g, temb)?;
        let cout = g.shape(tb)[1];
        let tb = g.reshape(tb, &[cout])?;
        let h = g.add_channels(h, tb)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(h, s)
    }
}

/// `h + FF(TextAttn(LN h, text) + FaceAttn(LN h, face))` on the token view
/// of a feature map. The face attention's output projection starts at zero.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    norm: LayerNorm,
    text_attn: CrossAttention,
    face_attn: CrossAttention,
    ff: FeedForward,
}

impl FusionBlock {
    pub fn new<R: Rng>(b: &mut Builder<R>, c: usize, d_ctx: usize, heads: usize) -> Self {
        Self {
            norm: LayerNorm::new(&mut b.sub("norm"), c),
            text_attn: CrossAttention::new(&mut b.sub("text_attn"), c, d_ctx, c, c, heads, false),
            face_attn: CrossAttention::new(&mut b.sub("face_attn"), c, d_ctx, c, c, heads, true),
            ff: FeedForward::new(&mut b.sub("ff"), c, 2),
        }
    }

    /// `face = None` disables the face pathway entirely.
    pub fn forward(&self, g: &mut Graph, h: Var, text: Var, face: Option<Var>) -> Result<Var> {
        let (hh, ww) = (g.shape(h)[1], g.shape(h)[2]);
        let tok = to_tokens(g, h)?;
        let n = self.norm.forward(g, tok)?;
        let mut a = self.text_attn.forward(g, n, text)?;
        if let Some(f) = face {
            let fa = self.face_attn.forward(g, n, f)?;
            a = g.add(a, fa)?;
        }
        let f = self.ff.forward(g, a)?;
        let tok = g.add(tok, f)?;
        from_tokens(g, tok, hh, ww)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<FusionBlock>,
    resample: Option<Conv2d>,
}

/// Residual tensors injected into the denoiser, as graph nodes.
#[derive(Debug, Clone)]
pub struct InjectedResiduals {
    pub skips: Vec<Var>,
    pub mid: Var,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    time: TimeEmbedding,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid_res: ResBlock,
    mid_attn: FusionBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new<R: Rng>(b: &mut Builder<R>, config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let ws = config.widths();
        let (td, gr, dc, hd) = (config.temb_dim(), config.groups, config.d_ctx, config.heads);
        let time = TimeEmbedding::new(&mut b.sub("time"), config.base_width, td);
        let conv_in = Conv2d::new(&mut b.sub("conv_in"), config.latent_channels, ws[0], 3, 1);
        let mut down = Vec::new();
        let mut prev = ws[0];
        for (l, &c) in ws.iter().enumerate() {
            let mut lb = b.sub(&format!("down{l}"));
            down.push(Level {
                res: ResBlock::new(&mut lb.sub("res"), prev, c, td, gr),
                attn: config.has_attn(l).then(|| FusionBlock::new(&mut lb.sub("attn"), c, dc, hd)),
                resample: (l + 1 < ws.len()).then(|| Conv2d::new(&mut lb.sub("downsample"), c, c, 3, 2)),
            });
            prev = c;
        }
        let mid_res = ResBlock::new(&mut b.sub("mid.res"), prev, prev, td, gr);
        let mid_attn = FusionBlock::new(&mut b.sub("mid.attn"), prev, dc, hd);
        let mut up = Vec::new();
        for l in (0..ws.len()).rev() {
            let c = ws[l];
            let mut lb = b.sub(&format!("up{l}"));
            up.push(Level {
                res: ResBlock::new(&mut lb.sub("res"), prev + c, c, td, gr),
                attn: config.has_attn(l).then(|| FusionBlock::new(&mut lb.sub("attn"), c, dc, hd)),
                resample: (l > 0).then(|| Conv2d::new(&mut lb.sub("upsample"), c, c, 3, 1)),
            });
            prev = c;
        }
        Ok(Self {
            config: config.clone(),
            time,
            conv_in,
            down,
            mid_res,
            mid_attn,
            up,
            norm_out: GroupNorm::new(&mut b.sub("norm_out"), ws[0], gr),
            conv_out: Conv2d::new(&mut b.sub("conv_out"), ws[0], config.latent_channels, 3, 1),
        })
    }

    /// Epsilon prediction for `x: [C, s, s]` at timestep `t`. `text` is
    /// `[L, d_ctx]`; `face` is `[N, d_ctx]` or `None` to bypass the face
    /// pathway; `pose` residuals are added to the skips and the bottleneck.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        t: usize,
        text: Var,
        face: Option<Var>,
        pose: Option<&InjectedResiduals>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if g.shape(x) != cfg.latent_shape() {
            return Err(dim_err!(
                "denoiser input {:?}, expected {:?}",
                g.shape(x),
                cfg.latent_shape()
            ));
        }
        if t >= cfg.timesteps {
            return Err(Error::Parameter(format!("timestep {t} outside [0, {})", cfg.timesteps)));
        }
        if g.shape(text).len() != 2 || g.shape(text)[1] != cfg.d_ctx {
            return Err(dim_err!("text context {:?}, expected [L, {}]", g.shape(text), cfg.d_ctx));
        }
        if let Some(f) = face {
            if g.shape(f) != [cfg.n_face_tokens, cfg.d_ctx] {
                return Err(dim_err!(
                    "face tokens {:?}, expected [{}, {}]",
                    g.shape(f),
                    cfg.n_face_tokens,
                    cfg.d_ctx
                ));
            }
        }
        if let Some(p) = pose {
            check_residuals(g, p, cfg)?;
        }
        let temb = self.time.forward(g, t)?;
        let mut h = self.conv_in.forward(g, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, lvl) in self.down.iter().enumerate() {
            h = lvl.res.forward(g, h, temb)?;
            if let Some(a) = &lvl.attn {
                h = a.forward(g, h, text, face)?;
            }
            let skip = match pose {
                Some(p) => g.add(h, p.skips[l])?,
                None => h,
            };
            skips.push(skip);
            if let Some(d) = &lvl.resample {
                h = d.forward(g, h)?;
            }
        }
        h = self.mid_res.forward(g, h, temb)?;
        h = self.mid_attn.forward(g, h, text, face)?;
        if let Some(p) = pose {
            h = g.add(h, p.mid)?;
        }
        for lvl in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat_rows(&[h, skip])?;
            h = lvl.res.forward(g, cat, temb)?;
            if let Some(a) = &lvl.attn {
                h = a.forward(g, h, text, face)?;
            }
            if let Some(u) = &lvl.resample {
                let up = g.upsample2x(h)?;
                h = u.forward(g, up)?;
            }
        }
        let h = self.norm_out.forward(g, h)?;
        let h = g.silu(h);
        self.conv_out.forward(g, h)
    }
}

fn check_residuals(g: &Graph, p: &InjectedResiduals, cfg: &DenoiserConfig) -> Result<()> {
    let shapes = cfg.skip_shapes();
    if p.skips.len() != shapes.len() {
        return Err(dim_err!(
            "{} pose residuals for {} denoiser levels",
            p.skips.len(),
            shapes.len()
        ));
    }
    for (v, s) in p.skips.iter().zip(&shapes) {
        if g.shape(*v) != s {
            return Err(dim_err!("pose residual {:?}, expected skip {:?}", g.shape(*v), s));
        }
    }
    if g.shape(p.mid) != cfg.mid_shape() {
        return Err(dim_err!(
            "pose mid residual {:?}, expected {:?}",
            g.shape(p.mid),
            cfg.mid_shape()
        ));
    }
    Ok(())
}
