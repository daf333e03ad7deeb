//! Run configuration: one TOML file covering encoders, model, curation,
//! training and inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::PipelineConfig;
use crate::diffusion::{LossConfig, ModelConfig, SampleOptions};
use crate::encoders::{BackendSpec, EncoderConfig};
use crate::error::{Error, Result};

pub const SEED_ENV: &str = "FACEMAKEUP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub dropout_face: f64,
    pub dropout_text: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 10,
            steps: 200,
            dropout_face: 0.5,
            dropout_text: 0.1,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            dropout_face: self.dropout_face,
            dropout_text: self.dropout_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub steps: usize,
    pub guidance: f64,
    /// Bound on the predicted clean latent; zero or negative disables it.
    pub clip: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            clip: crate::diffusion::DEFAULT_CLIP,
        }
    }
}

impl InferenceConfig {
    pub fn sample_options(&self, seed: u64, use_pose: bool) -> SampleOptions {
        SampleOptions {
            steps: self.steps,
            guidance: self.guidance,
            seed,
            clip: (self.clip > 0.0).then_some(self.clip),
            use_pose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub encoders: EncoderConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl RunConfig {
    /// Defaults everywhere except the seed.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            encoders: EncoderConfig::default(),
            model: ModelConfig::default(),
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse, apply the seed override from the environment, validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pipeline.validate()?;
        let d = &self.model.denoiser;
        let e = &self.encoders;
        if e.d_vis != self.model.d_vis {
            return Err(Error::Config(format!(
                "encoders.d_vis {} differs from model.d_vis {}",
                e.d_vis, self.model.d_vis
            )));
        }
        if e.d_ctx != d.d_ctx {
            return Err(Error::Config(format!(
                "encoders.d_ctx {} differs from model.denoiser.d_ctx {}",
                e.d_ctx, d.d_ctx
            )));
        }
        if e.patch_size == 0 || e.patch_size > d.image_side {
            return Err(Error::Config(format!(
                "patch_size {} must lie in [1, image_side {}]",
                e.patch_size, d.image_side
            )));
        }
        for spec in [&e.vision, &e.identity, &e.text, &e.detector] {
            if let BackendSpec::Pretrained(p) = spec {
                if !p.exists() {
                    return Err(Error::Config(format!("backend weights {} not found", p.display())));
                }
            }
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.batch == 0 {
            return Err(Error::Config("train.lr and train.batch must be positive".into()));
        }
        for (name, p) in [("dropout_face", t.dropout_face), ("dropout_text", t.dropout_text)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("train.{name} {p} outside [0, 1]")));
            }
        }
        if t.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be positive".into()));
        }
        let i = &self.inference;
        if i.steps == 0 || !d.timesteps.is_multiple_of(i.steps) {
            return Err(Error::Config(format!(
                "inference.steps {} must divide timesteps {}",
                i.steps, d.timesteps
            )));
        }
        if !i.guidance.is_finite() {
            return Err(Error::Config("inference.guidance must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::from_toml_str("[train]\nsteps = 3\n").is_err());
        let c = RunConfig::from_toml_str("seed = 5\n[train]\nsteps = 3\n").unwrap();
        assert_eq!((c.seed, c.train.steps, c.train.batch), (5, 3, 10));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::new(9);
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
    }

    #[test]
    fn env_override() {
        let mut c = RunConfig::new(1);
        c.apply_seed_override(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_override(Some("x")).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("seed = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut c = RunConfig::new(1);
        c.encoders.d_vis = 16;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
