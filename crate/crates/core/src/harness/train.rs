//! Training loop: frozen encoders, Adam on the denoiser, projector, PoseNet
//! and null tokens, CSV loss log and periodic checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::face_view;
use crate::datapipe::{confident_faces, resolve_path, ManifestEntry};
use crate::diffusion::{training_loss, FaceMakeUp, TrainingSample};
use crate::encoders::EncoderSet;
use crate::error::{param_err, Error, Result};
use crate::hash::derive_seed;
use crate::image::ImageTensor;
use crate::latent::LatentCodec;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::pose::render_pose_map;

/// Encode every usable manifest entry. Entries with a failing filter verdict
/// are skipped, as are entries without an annotated or detected face.
pub fn prepare_samples(
    cfg: &RunConfig,
    entries: &[ManifestEntry],
    root: &Path,
    encoders: &EncoderSet,
) -> Result<Vec<TrainingSample>> {
    let d = &cfg.model.denoiser;
    let codec = LatentCodec::new(d.image_side, d.latent_side)?;
    let null_text = encoders.text.encode_text("")?.tokens;
    let mut out = Vec::new();
    for e in entries {
        if e.filter_flags.values().any(|v| !v.passes()) {
            continue;
        }
        let path = resolve_path(root, &e.image_path);
        let image = ImageTensor::load(&path)?;
        let face = match e.face {
            Some(f) => f,
            None => match confident_faces(
                &encoders.detector.detect(&image, Some(&path))?,
                cfg.pipeline.face_score_min,
            )
            .first()
            {
                Some(f) => *f,
                None => {
                    log::warn!("{}: no face, skipped", e.image_path);
                    continue;
                }
            },
        };
        let view = face_view(&image, &face, e.crop, cfg.pipeline.expansion_factor, d.image_side)?;
        out.push(TrainingSample {
            latent: codec.encode(&view.image)?,
            text: encoders.text.encode_text(&e.caption)?.tokens,
            null_text: null_text.clone(),
            id: encoders.identity.encode_identity(&view.image)?,
            patches: encoders.vision.encode_patches(&view.image)?,
            pose_map: render_pose_map(&view.keypoints, d.image_side, d.image_side)?.to_chw(),
        });
    }
    if out.is_empty() {
        return Err(param_err!("no usable training samples"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where the loss CSV and checkpoints go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Run on a single worker thread.
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub null_face_fraction: f64,
}

pub struct TrainReport {
    pub model: FaceMakeUp,
    pub store: ParamStore,
    pub adam: Adam,
    pub log: Vec<StepLog>,
    pub step: u64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|l| l.loss).collect()
    }
}

pub fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.fmk"))
}

pub const LOSS_CSV: &str = "loss.csv";

/// Train until `cfg.train.steps` optimizer steps have been taken in total.
/// Each step's batch and noise come from a stream keyed by the seed and the
/// step index, so a resumed run draws what an uninterrupted one would.
pub fn train(cfg: &RunConfig, samples: &[TrainingSample], opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if opts.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| train_inner(cfg, samples, opts))
    } else {
        train_inner(cfg, samples, opts)
    }
}

fn train_inner(cfg: &RunConfig, samples: &[TrainingSample], opts: &TrainOptions) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(param_err!("no training samples"));
    }
    let (model, mut store, mut adam, start) = match &opts.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.config.model != cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model config",
                    p.display()
                )));
            }
            let adam = ck.adam.unwrap_or_else(|| Adam::new(adam_config(cfg), &ck.store));
            (ck.model, ck.store, adam, ck.step)
        }
        None => {
            let (m, s) = FaceMakeUp::new(&cfg.model, cfg.seed)?;
            let a = Adam::new(adam_config(cfg), &s);
            (m, s, a, 0)
        }
    };
    adam.config.lr = cfg.train.lr;
    let schedule = model.schedule()?;
    let loss_cfg = cfg.train.loss_config();
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_CSV);
            let fresh = opts.resume.is_none() || !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "step,loss,null_face_fraction").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let n = samples.len();
    let b = cfg.train.batch.min(n);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = start;
    while step < cfg.train.steps as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("train.step.{step}")));
        let batch: Vec<TrainingSample> = if b == n {
            samples.to_vec()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, n, b).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| samples[i].clone()).collect()
        };
        let out = training_loss(&model, &store, &batch, &schedule, &loss_cfg, &mut rng)?;
        step += 1;
        if !out.loss.is_finite() || !out.grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                value: out.loss,
            });
        }
        adam.step(&mut store, &out.grads);
        let entry = StepLog {
            step,
            loss: out.loss,
            null_face_fraction: out.null_face_fraction(),
        };
        log::info!("step {step} loss {:.6}", entry.loss);
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{},{},{}", entry.step, entry.loss, entry.null_face_fraction)
                .map_err(|e| Error::io(&*path, e))?;
        }
        log.push(entry);
        if let Some(dir) = &opts.out_dir {
            if step % cfg.train.checkpoint_every as u64 == 0 || step == cfg.train.steps as u64 {
                let p = checkpoint_path(dir, step);
                save_checkpoint(&p, cfg, &store, Some(&adam), step)?;
                checkpoints.push(p);
            }
        }
    }
    Ok(TrainReport {
        model,
        store,
        adam,
        log,
        step,
        checkpoints,
    })
}

fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.train.lr,
        ..AdamConfig::default()
    }
}
