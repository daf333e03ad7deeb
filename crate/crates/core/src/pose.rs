//! Pose branch: keypoint rendering and PoseNet.
//!
//! PoseNet mirrors the denoiser encoder (time embedding, one residual block
//! per level, strided downsampling, bottleneck block). Its input is the noisy
//! latent plus an embedding of the pose map from a strided convolution stack
//! whose last layer is zero-initialised. A zero 1x1 convolution per level and
//! one for the bottleneck produce the residuals, so a fresh PoseNet emits
//! exact zeros.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::diffusion::unet::{DenoiserConfig, InjectedResiduals, ResBlock, TimeEmbedding};
use crate::error::{dim_err, Error, Result};
use crate::image::ImageTensor;
use crate::nn::{Builder, Conv2d};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Left eye, right eye, nose, left mouth corner, right mouth corner.
pub const KEYPOINT_COLORS: [[f64; 3]; 5] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
];

/// `max(1, round(0.02 * min(H, W)))` in integer arithmetic (half rounds up).
pub fn disk_radius(height: usize, width: usize) -> usize {
    ((2 * height.min(width) + 50) / 100).max(1)
}

/// Five filled disks on a `-1` background. Keypoints are rounded to the
/// nearest pixel centre; a pixel is inside iff its squared distance to the
/// centre is at most `r^2`. Later keypoints paint over earlier ones.
pub fn render_pose_map(keypoints: &[[f64; 2]; 5], height: usize, width: usize) -> Result<ImageTensor> {
    for &[x, y] in keypoints {
        if !(x.is_finite() && y.is_finite() && (0.0..width as f64).contains(&x) && (0.0..height as f64).contains(&y)) {
            return Err(Error::Range(format!(
                "keypoint ({x}, {y}) outside {width}x{height}"
            )));
        }
    }
    let r = disk_radius(height, width) as i64;
    let mut data = vec![-1.0; height * width * 3];
    for (k, &[x, y]) in keypoints.iter().enumerate() {
        let cx = (x.round() as i64).min(width as i64 - 1);
        let cy = (y.round() as i64).min(height as i64 - 1);
        for py in (cy - r).max(0)..=(cy + r).min(height as i64 - 1) {
            for px in (cx - r).max(0)..=(cx + r).min(width as i64 - 1) {
                let (dx, dy) = (px - cx, py - cy);
                if dx * dx + dy * dy <= r * r {
                    let i = (py as usize * width + px as usize) * 3;
                    data[i..i + 3].copy_from_slice(&KEYPOINT_COLORS[k]);
                }
            }
        }
    }
    ImageTensor::new(height, width, data)
}

/// Concrete residual tensors: one per denoiser level plus the bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseResiduals {
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
}

impl PoseResiduals {
    pub fn zeros(cfg: &DenoiserConfig) -> Self {
        Self {
            skips: cfg.skip_shapes().iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            mid: Tensor::zeros(cfg.mid_shape().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.skips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skips.is_empty()
    }

    pub fn all_zero(&self) -> bool {
        self.skips.iter().chain([&self.mid]).all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.skips.iter().chain([&self.mid]).map(Tensor::max_abs).fold(0.0, f64::max)
    }

    pub fn to_graph(&self, g: &mut Graph) -> InjectedResiduals {
        InjectedResiduals {
            skips: self.skips.iter().map(|t| g.constant(t.clone())).collect(),
            mid: g.constant(self.mid.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseNet {
    config: DenoiserConfig,
    embed: Vec<Conv2d>,
    embed_out: Conv2d,
    time: TimeEmbedding,
    conv_in: Conv2d,
    res: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    mid_res: ResBlock,
    zero_skips: Vec<Conv2d>,
    zero_mid: Conv2d,
}

impl PoseNet {
    pub fn new<R: Rng>(b: &mut Builder<R>, config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let ws = config.widths();
        let (td, gr, pe) = (config.temb_dim(), config.groups, config.pose_embed_width);
        let mut embed = Vec::new();
        let mut cin = 3;
        for i in 0..config.pose_downsamples() {
            embed.push(Conv2d::new(&mut b.sub(&format!("embed{i}")), cin, pe, 3, 2));
            cin = pe;
        }
        let embed_out = Conv2d::zero(&mut b.sub("embed_out"), cin, ws[0], 3, 1);
        let time = TimeEmbedding::new(&mut b.sub("time"), config.base_width, td);
        let conv_in = Conv2d::new(&mut b.sub("conv_in"), config.latent_channels, ws[0], 3, 1);
        let mut res = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = ws[0];
        for (l, &c) in ws.iter().enumerate() {
            res.push(ResBlock::new(&mut b.sub(&format!("down{l}.res")), prev, c, td, gr));
            if l + 1 < ws.len() {
                downsample.push(Conv2d::new(&mut b.sub(&format!("down{l}.downsample")), c, c, 3, 2));
            }
            prev = c;
        }
        let mid_res = ResBlock::new(&mut b.sub("mid.res"), prev, prev, td, gr);
        let zero_skips = ws
            .iter()
            .enumerate()
            .map(|(l, &c)| Conv2d::zero(&mut b.sub(&format!("zero{l}")), c, c, 1, 1))
            .collect();
        let zero_mid = Conv2d::zero(&mut b.sub("zero_mid"), prev, prev, 1, 1);
        let net = Self {
            config: config.clone(),
            embed,
            embed_out,
            time,
            conv_in,
            res,
            downsample,
            mid_res,
            zero_skips,
            zero_mid,
        };
        net.check_mirror()?;
        Ok(net)
    }

    /// Residual shapes must equal the denoiser skip shapes.
    fn check_mirror(&self) -> Result<()> {
        if self.zero_skips.len() != self.config.levels() {
            return Err(dim_err!(
                "PoseNet has {} outputs for {} denoiser levels",
                self.zero_skips.len(),
                self.config.levels()
            ));
        }
        Ok(())
    }

    /// `x: [C, s, s]` noisy latent, `pose_map: [3, H, W]` channel-first.
    pub fn forward(&self, g: &mut Graph, x: Var, t: usize, pose_map: Var) -> Result<InjectedResiduals> {
        let cfg = &self.config;
        if g.shape(x) != cfg.latent_shape() {
            return Err(dim_err!("PoseNet latent {:?}, expected {:?}", g.shape(x), cfg.latent_shape()));
        }
        let pm = [3, cfg.image_side, cfg.image_side];
        if g.shape(pose_map) != pm {
            return Err(dim_err!("pose map {:?}, expected {:?}", g.shape(pose_map), pm));
        }
        if t >= cfg.timesteps {
            return Err(Error::Parameter(format!("timestep {t} outside [0, {})", cfg.timesteps)));
        }
        let mut p = pose_map;
        for c in &self.embed {
            p = c.forward(g, p)?;
            p = g.silu(p);
        }
        let p = self.embed_out.forward(g, p)?;
        let temb = self.time.forward(g, t)?;
        let h0 = self.conv_in.forward(g, x)?;
        let mut h = g.add(h0, p)?;
        let mut skips = Vec::with_capacity(self.res.len());
        for (l, r) in self.res.iter().enumerate() {
            h = r.forward(g, h, temb)?;
            skips.push(self.zero_skips[l].forward(g, h)?);
            if let Some(d) = self.downsample.get(l) {
                h = d.forward(g, h)?;
            }
        }
        h = self.mid_res.forward(g, h, temb)?;
        let mid = self.zero_mid.forward(g, h)?;
        Ok(InjectedResiduals { skips, mid })
    }

    pub fn residuals(
        &self,
        store: &ParamStore,
        x: &Tensor,
        t: usize,
        pose_map: &ImageTensor,
    ) -> Result<PoseResiduals> {
        let mut g = Graph::new(store);
        let xv = g.constant(x.clone());
        let pv = g.constant(pose_map.to_chw());
        let r = self.forward(&mut g, xv, t, pv)?;
        Ok(PoseResiduals {
            skips: r.skips.iter().map(|&v| g.value(v).clone()).collect(),
            mid: g.value(r.mid).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_rule() {
        assert_eq!(disk_radius(64, 64), 1);
        assert_eq!(disk_radius(8, 8), 1);
        assert_eq!(disk_radius(75, 100), 2);
        assert_eq!(disk_radius(512, 512), 10);
    }

    #[test]
    fn out_of_bounds_keypoint() {
        let mut kp = [[10.0, 10.0]; 5];
        kp[4] = [64.0, 3.0];
        assert!(matches!(render_pose_map(&kp, 64, 64), Err(Error::Range(_))));
        kp[4] = [-0.5, 3.0];
        assert!(matches!(render_pose_map(&kp, 64, 64), Err(Error::Range(_))));
    }
}
