//! Reference image + prompt to PNG, with a provenance sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::load_checkpoint;
use super::config::{InferenceConfig, RunConfig};
use super::{face_view, FaceView};
use crate::datapipe::{confident_faces, CropRect};
use crate::diffusion::{sample, FaceMakeUp, SampleConditioning};
use crate::encoders::{sidecar_path, EncoderSet, FaceBox, IdEmbedding};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::latent::LatentCodec;
use crate::params::ParamStore;
use crate::pose::render_pose_map;
use crate::projector::mix_identities;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub reference: PathBuf,
    pub prompt: String,
    pub seed: u64,
    pub use_pose: bool,
    /// Second identity and the weight given to it.
    pub mix: Option<(PathBuf, f64)>,
    /// Overrides the checkpoint's inference settings.
    pub inference: Option<InferenceConfig>,
}

impl GenerateRequest {
    pub fn new(reference: impl Into<PathBuf>, prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            reference: reference.into(),
            prompt: prompt.into(),
            seed,
            use_pose: true,
            mix: None,
            inference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub face: FaceBox,
    pub crop: CropRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub reference: ReferenceRecord,
    pub mix: Option<ReferenceRecord>,
    pub alpha: Option<f64>,
    pub prompt: String,
    pub seed: u64,
    pub use_pose: bool,
    pub inference: InferenceConfig,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_sha256: Option<String>,
    pub checkpoint_step: Option<u64>,
    pub config: RunConfig,
    pub output: Option<PathBuf>,
    pub output_sha256: Option<String>,
}

pub struct GenerateResult {
    pub image: ImageTensor,
    pub png: Vec<u8>,
    pub provenance: Provenance,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

struct Reference {
    view: FaceView,
    id: IdEmbedding,
    record: ReferenceRecord,
}

fn load_reference(path: &Path, cfg: &RunConfig, enc: &EncoderSet) -> Result<Reference> {
    let image = ImageTensor::load(path)?;
    let faces = confident_faces(&enc.detector.detect(&image, Some(path))?, cfg.pipeline.face_score_min);
    let face = *faces.first().ok_or_else(|| Error::NoFace(path.to_path_buf()))?;
    let side = cfg.model.denoiser.image_side;
    let view = face_view(&image, &face, None, cfg.pipeline.expansion_factor, side)?;
    let id = enc.identity.encode_identity(&view.image)?;
    let record = ReferenceRecord {
        path: path.to_path_buf(),
        sha256: file_sha256(path)?,
        face,
        crop: view.crop,
    };
    Ok(Reference { view, id, record })
}

/// Detect, crop, encode, project, render the pose map, sample and decode.
pub fn render(
    cfg: &RunConfig,
    model: &FaceMakeUp,
    store: &ParamStore,
    encoders: &EncoderSet,
    req: &GenerateRequest,
) -> Result<GenerateResult> {
    let d = &cfg.model.denoiser;
    let inference = req.inference.clone().unwrap_or_else(|| cfg.inference.clone());
    let primary = load_reference(&req.reference, cfg, encoders)?;
    let patches = encoders.vision.encode_patches(&primary.view.image)?;
    let (id, mix, alpha) = match &req.mix {
        Some((path, alpha)) => {
            let other = load_reference(path, cfg, encoders)?;
            (mix_identities(&primary.id, &other.id, *alpha)?, Some(other.record), Some(*alpha))
        }
        None => (primary.id.clone(), None, None),
    };
    let face = model.face_tokens(store, &id, &patches)?;
    let pose_map = render_pose_map(&primary.view.keypoints, d.image_side, d.image_side)?;
    let cond = SampleConditioning {
        text: encoders.text.encode_text(&req.prompt)?.tokens,
        null_text: encoders.text.encode_text("")?.tokens,
        face,
        pose_map: Some(pose_map),
    };
    let schedule = model.schedule()?;
    let opts = inference.sample_options(req.seed, req.use_pose);
    let out = sample(model, store, &schedule, &cond, &opts)?;
    let image = LatentCodec::new(d.image_side, d.latent_side)?.decode(&out.latent)?;
    let png = image.encode_png()?;
    let provenance = Provenance {
        reference: primary.record,
        mix,
        alpha,
        prompt: req.prompt.clone(),
        seed: req.seed,
        use_pose: req.use_pose,
        inference,
        checkpoint: None,
        checkpoint_sha256: None,
        checkpoint_step: None,
        config: cfg.clone(),
        output: None,
        output_sha256: Some(sha256_hex(&png)),
    };
    Ok(GenerateResult {
        image,
        png,
        provenance,
    })
}

pub fn provenance_path(out: &Path) -> PathBuf {
    sidecar_path(out, "provenance.json")
}

/// Load a checkpoint, render, and write `out` plus `<out>.provenance.json`.
pub fn generate(checkpoint: &Path, req: &GenerateRequest, out: &Path) -> Result<GenerateResult> {
    let ck = load_checkpoint(checkpoint)?;
    let encoders = EncoderSet::from_config(&ck.config.encoders, ck.config.seed)?;
    let mut res = render(&ck.config, &ck.model, &ck.store, &encoders, req)?;
    std::fs::write(out, &res.png).map_err(|e| Error::io(out, e))?;
    let p = &mut res.provenance;
    p.checkpoint = Some(checkpoint.to_path_buf());
    p.checkpoint_sha256 = Some(file_sha256(checkpoint)?);
    p.checkpoint_step = Some(ck.step);
    p.output = Some(out.to_path_buf());
    let side = provenance_path(out);
    let json = serde_json::to_string_pretty(&res.provenance)?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(res)
}
