//! The conditioned model: denoiser, projector, PoseNet and the learned null
//! face block, with the training objective and the guided sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::unet::{Denoiser, DenoiserConfig};
use super::{add_noise, cfg_combine, ddim_step, make_schedule, timestep_grid, NoiseSchedule, DEFAULT_CLIP};
use crate::autograd::{Graph, Var};
use crate::encoders::{IdEmbedding, PatchFeatures};
use crate::error::{dim_err, param_err, Error, Result};
use crate::hash::derive_seed;
use crate::image::ImageTensor;
use crate::nn::Builder;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::pose::{PoseNet, PoseResiduals};
use crate::projector::{FaceTokens, Projector, ProjectorConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub projector: ProjectorConfig,
    /// Width of the general image encoder's patch tokens.
    pub d_vis: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            projector: ProjectorConfig::default(),
            d_vis: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.projector.validate()?;
        if self.projector.n_tokens != self.denoiser.n_face_tokens {
            return Err(Error::Config(format!(
                "projector emits {} face tokens, denoiser expects {}",
                self.projector.n_tokens, self.denoiser.n_face_tokens
            )));
        }
        if self.d_vis == 0 {
            return Err(Error::Config("d_vis must be positive".into()));
        }
        Ok(())
    }
}

/// Which conditioning pathways the denoiser evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchToggles {
    pub face: bool,
    pub pose: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        Self {
            face: true,
            pose: true,
        }
    }
}

/// Conditioning for one denoiser evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub text: Tensor,
    pub face: FaceTokens,
    pub pose: Option<PoseResiduals>,
    pub null_face: bool,
    pub null_text: bool,
}

pub struct FaceMakeUp {
    pub config: ModelConfig,
    pub denoiser: Denoiser,
    pub projector: Projector,
    pub posenet: PoseNet,
    pub null_face: ParamId,
}

impl FaceMakeUp {
    /// Fresh weights drawn from the `model.init` stream of `seed`. Sections:
    /// `denoiser`, `projector`, `posenet`, `null_tokens`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model.init"));
        let d = &config.denoiser;
        let denoiser = Denoiser::new(&mut Builder::new(&mut store, &mut rng, "denoiser"), d)?;
        let projector = Projector::new(
            &mut Builder::new(&mut store, &mut rng, "projector"),
            &config.projector,
            config.d_vis,
            d.d_ctx,
        )?;
        let posenet = PoseNet::new(&mut Builder::new(&mut store, &mut rng, "posenet"), d)?;
        let null_face = Builder::new(&mut store, &mut rng, "null_tokens").normal(
            "face",
            &[d.n_face_tokens, d.d_ctx],
            0.02,
        );
        Ok((
            Self {
                config: config.clone(),
                denoiser,
                projector,
                posenet,
                null_face,
            },
            store,
        ))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.config.denoiser;
        make_schedule(d.timesteps, d.beta_start, d.beta_end)
    }

    pub fn null_face_tokens(&self, store: &ParamStore) -> FaceTokens {
        FaceTokens {
            tokens: store.get(self.null_face).clone(),
        }
    }

    pub fn face_tokens(
        &self,
        store: &ParamStore,
        id: &IdEmbedding,
        patches: &PatchFeatures,
    ) -> Result<FaceTokens> {
        self.projector.project(store, id, patches)
    }

    pub fn pose_residuals(
        &self,
        store: &ParamStore,
        x_t: &Tensor,
        t: usize,
        pose_map: &ImageTensor,
    ) -> Result<PoseResiduals> {
        self.posenet.residuals(store, x_t, t, pose_map)
    }

    /// Epsilon prediction for a concrete latent.
    pub fn denoise(
        &self,
        store: &ParamStore,
        x_t: &Tensor,
        t: usize,
        cond: &ConditioningBundle,
        toggles: BranchToggles,
    ) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let x = g.constant(x_t.clone());
        let text = g.constant(cond.text.clone());
        let face = toggles.face.then(|| g.constant(cond.face.tokens.clone()));
        let pose = match (&cond.pose, toggles.pose) {
            (Some(p), true) => Some(p.to_graph(&mut g)),
            _ => None,
        };
        let out = self.denoiser.forward(&mut g, x, t, text, face, pose.as_ref())?;
        Ok(g.value(out).clone())
    }

    /// Graph-level prediction used by the training objective.
    fn predict_train(
        &self,
        g: &mut Graph,
        sample: &TrainingSample,
        draw: &SampleDraw,
        x_t: Var,
    ) -> Result<Var> {
        let text = g.constant(if draw.drop_text {
            sample.null_text.clone()
        } else {
            sample.text.clone()
        });
        let face = if draw.drop_face {
            g.param(self.null_face)
        } else {
            let id = g.constant(sample.id.to_tensor());
            let p = g.constant(sample.patches.tokens.clone());
            self.projector.forward(g, id, p)?
        };
        let pm = g.constant(sample.pose_map.clone());
        let pose = self.posenet.forward(g, x_t, draw.t, pm)?;
        self.denoiser.forward(g, x_t, draw.t, text, Some(face), Some(&pose))
    }
}

/// One training example with frozen encoder outputs.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub latent: Tensor,
    pub text: Tensor,
    pub null_text: Tensor,
    pub id: IdEmbedding,
    pub patches: PatchFeatures,
    /// Channel-first `[3, H, W]` pose map.
    pub pose_map: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub dropout_face: f64,
    pub dropout_text: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dropout_face: 0.5,
            dropout_text: 0.0,
        }
    }
}

/// Per-sample random choices, drawn in a fixed order: timestep, face drop,
/// text drop, then the noise tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    pub t: usize,
    pub drop_face: bool,
    pub drop_text: bool,
    pub eps: Tensor,
}

pub fn draw_conditioning<R: Rng + ?Sized>(
    n: usize,
    latent_shape: &[usize],
    timesteps: usize,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<Vec<SampleDraw>> {
    for (name, p) in [("dropout_face", cfg.dropout_face), ("dropout_text", cfg.dropout_text)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(param_err!("{name} {p} outside [0, 1]"));
        }
    }
    Ok((0..n)
        .map(|_| {
            let t = rng.random_range(0..timesteps);
            let drop_face = rng.random::<f64>() < cfg.dropout_face;
            let drop_text = rng.random::<f64>() < cfg.dropout_text;
            let eps = Tensor::randn(latent_shape.to_vec(), 1.0, rng);
            SampleDraw {
                t,
                drop_face,
                drop_text,
                eps,
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub draws: Vec<SampleDraw>,
}

impl LossOutput {
    pub fn null_face_fraction(&self) -> f64 {
        self.draws.iter().filter(|d| d.drop_face).count() as f64 / self.draws.len() as f64
    }
}

/// Batch-mean epsilon MSE with a caller-supplied predictor. Samples are
/// evaluated independently and their gradients summed in batch order, so the
/// result does not depend on the worker count.
pub fn training_loss_with<R, F>(
    store: &ParamStore,
    batch: &[TrainingSample],
    schedule: &NoiseSchedule,
    cfg: &LossConfig,
    rng: &mut R,
    predict: F,
) -> Result<LossOutput>
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph, &TrainingSample, &SampleDraw, Var) -> Result<Var> + Sync,
{
    if batch.is_empty() {
        return Err(param_err!("training batch is empty"));
    }
    let shape = batch[0].latent.shape().to_vec();
    if let Some(s) = batch.iter().find(|s| s.latent.shape() != shape) {
        return Err(dim_err!("mixed latent shapes {:?} and {:?}", shape, s.latent.shape()));
    }
    let draws = draw_conditioning(batch.len(), &shape, schedule.len(), cfg, rng)?;
    let per_sample: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(sample, draw)| {
            let mut g = Graph::new(store);
            let x_t = add_noise(&sample.latent, &draw.eps, draw.t, schedule)?;
            let xv = g.constant(x_t);
            let pred = predict(&mut g, sample, draw, xv)?;
            let loss = g.mse_to(pred, &draw.eps)?;
            Ok((g.value(loss).data()[0], g.backward(loss)))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(store);
    for r in per_sample {
        let (l, gr) = r?;
        loss += l;
        grads.accumulate(&gr);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok(LossOutput {
        loss: loss * inv,
        grads,
        draws,
    })
}

/// Face tokens are replaced by the learned null block with probability
/// `dropout_face`; the pose branch is always active.
pub fn training_loss<R: Rng + ?Sized>(
    model: &FaceMakeUp,
    store: &ParamStore,
    batch: &[TrainingSample],
    schedule: &NoiseSchedule,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    training_loss_with(store, batch, schedule, cfg, rng, |g, s, d, x| {
        model.predict_train(g, s, d, x)
    })
}

/// Conditioning for guided sampling.
#[derive(Debug, Clone)]
pub struct SampleConditioning {
    pub text: Tensor,
    pub null_text: Tensor,
    pub face: FaceTokens,
    pub pose_map: Option<ImageTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub clip: Option<f64>,
    pub use_pose: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            seed: 0,
            clip: Some(DEFAULT_CLIP),
            use_pose: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: Tensor,
    pub timesteps: Vec<usize>,
    pub cond_evals: usize,
    pub uncond_evals: usize,
}

/// DDIM with classifier-free guidance from seeded Gaussian noise. The
/// unconditional branch uses the null text and null face tokens; pose
/// residuals are computed once per step and shared by both branches. At
/// guidance 1 the unconditional branch is skipped.
pub fn sample(
    model: &FaceMakeUp,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cond: &SampleConditioning,
    opts: &SampleOptions,
) -> Result<SampleOutput> {
    let grid = timestep_grid(schedule.len(), opts.steps)?;
    let shape = model.config.denoiser.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "sample.noise"));
    let mut x = Tensor::randn(shape.to_vec(), 1.0, &mut rng);
    let null_face = model.null_face_tokens(store);
    let (mut cond_evals, mut uncond_evals) = (0, 0);
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied();
        let pose = match (&cond.pose_map, opts.use_pose) {
            (Some(pm), true) => Some(model.pose_residuals(store, &x, t, pm)?),
            _ => None,
        };
        let c = ConditioningBundle {
            text: cond.text.clone(),
            face: cond.face.clone(),
            pose: pose.clone(),
            null_face: false,
            null_text: false,
        };
        let eps_c = model.denoise(store, &x, t, &c, BranchToggles::default())?;
        cond_evals += 1;
        let eps = if opts.guidance == 1.0 {
            eps_c
        } else {
            let u = ConditioningBundle {
                text: cond.null_text.clone(),
                face: null_face.clone(),
                pose,
                null_face: true,
                null_text: true,
            };
            let eps_u = model.denoise(store, &x, t, &u, BranchToggles::default())?;
            uncond_evals += 1;
            cfg_combine(&eps_u, &eps_c, opts.guidance)?
        };
        x = ddim_step(&x, &eps, t, t_prev, schedule, opts.clip)?;
    }
    if !x.all_finite() {
        return Err(Error::Range("sampler produced non-finite latent".into()));
    }
    Ok(SampleOutput {
        latent: x,
        timesteps: grid,
        cond_evals,
        uncond_evals,
    })
}
