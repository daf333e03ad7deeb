//! Configuration, checkpoints, synthetic data and the end-to-end
//! curate / train / generate / evaluate pipelines.

pub mod checkpoint;
pub mod config;
pub mod generate;
pub mod synth;
pub mod train;

pub use checkpoint::{
    inspect_checkpoint, load_checkpoint, save_checkpoint, CheckpointSummary, LoadedCheckpoint,
};
pub use config::{InferenceConfig, RunConfig, TrainConfig, SEED_ENV};
pub use generate::{generate, provenance_path, render, sha256_hex, GenerateRequest, GenerateResult, Provenance, ReferenceRecord};
pub use synth::{generate_synthetic_dataset, synthetic_face, SyntheticFaceSample, MANIFEST_NAME};
pub use train::{checkpoint_path, prepare_samples, train, window_mean, StepLog, TrainOptions, TrainReport, LOSS_CSV};

use crate::datapipe::{crop_rect, CropRect};
use crate::encoders::FaceBox;
use crate::error::Result;
use crate::image::ImageTensor;

/// The face region at model resolution with keypoints in its frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceView {
    pub image: ImageTensor,
    pub keypoints: [[f64; 2]; 5],
    pub crop: CropRect,
}

/// Crop with the curation rule (or a given rectangle), resize to `side` and
/// map the keypoints along.
pub fn face_view(
    image: &ImageTensor,
    face: &FaceBox,
    crop: Option<CropRect>,
    expansion: f64,
    side: usize,
) -> Result<FaceView> {
    let crop = match crop {
        Some(c) => c,
        None => crop_rect(image.width(), image.height(), face, expansion)?,
    };
    let view = image.crop_square(crop.x, crop.y, crop.side)?.resize(side, side)?;
    let scale = side as f64 / crop.side as f64;
    let hi = side as f64 - 0.5;
    let keypoints = face.keypoints.map(|[x, y]| {
        [
            ((x - crop.x as f64) * scale).clamp(0.0, hi),
            ((y - crop.y as f64) * scale).clamp(0.0, hi),
        ]
    });
    Ok(FaceView {
        image: view,
        keypoints,
        crop,
    })
}
