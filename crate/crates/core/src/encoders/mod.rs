//! Conditioning encoders: general vision (patch tokens), face identity,
//! text, and the face detector.
//!
//! Every encoder is a trait object selected by a [`BackendSpec`]. The stub
//! backends are pure functions of `(input, seed)` so they can stand in for
//! gigabyte checkpoints in tests; the `pretrained:<path>` backends load
//! learned projection weights from a tensor container.

mod detector;
mod pretrained;
mod stub;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Tensor;

pub use detector::{read_face_sidecar, sidecar_path, write_face_sidecar, SidecarDetector};
pub use pretrained::{PretrainedIdentity, PretrainedText, PretrainedVision};
pub use stub::{tokenize, StubIdentity, StubText, StubVision, ID_STUB_SIDE};

pub const ID_DIM: usize = 512;

/// `P x d_vis` patch tokens from the general image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub tokens: Tensor,
}

impl PatchFeatures {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] == 0 {
            return Err(dim_err!("patch features must be [P>=1, d], got {:?}", tokens.shape()));
        }
        if !tokens.all_finite() {
            return Err(Error::Range("non-finite patch feature".into()));
        }
        Ok(Self { tokens })
    }

    pub fn count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Mean over patches; the pooled image feature used by the metrics.
    pub fn pooled(&self) -> Vec<f64> {
        mean_rows(&self.tokens)
    }
}

/// Unit-norm identity embedding of length [`ID_DIM`].
#[derive(Debug, Clone, PartialEq)]
pub struct IdEmbedding {
    vector: Vec<f64>,
}

impl IdEmbedding {
    /// Normalises `raw`; zero or non-finite vectors are rejected.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.len() != ID_DIM {
            return Err(dim_err!("identity embedding has {} values, expected {ID_DIM}", raw.len()));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::Degenerate(format!(
                "identity vector norm {norm} cannot be normalised"
            )));
        }
        Ok(Self {
            vector: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, ID_DIM], self.vector.clone())
    }

    pub fn cosine(&self, other: &IdEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

/// `L x d_ctx` text tokens. `truncated` is set when the prompt exceeded the
/// configured token budget.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Tensor,
    pub truncated: bool,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn pooled(&self) -> Vec<f64> {
        mean_rows(&self.tokens)
    }
}

/// Face box in pixels (origin top-left) with five keypoints: left eye,
/// right eye, nose, left mouth corner, right mouth corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub keypoints: [[f64; 2]; 5],
}

impl FaceBox {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (wf, hf) = (width as f64, height as f64);
        let ok = self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= wf
            && self.y + self.h <= hf
            && (0.0..=1.0).contains(&self.score);
        if !ok {
            return Err(Error::Range(format!(
                "face box ({}, {}, {}, {}) score {} invalid for {width}x{height}",
                self.x, self.y, self.w, self.h, self.score
            )));
        }
        for [kx, ky] in self.keypoints {
            if !(0.0..wf).contains(&kx) || !(0.0..hf).contains(&ky) {
                return Err(Error::Range(format!(
                    "keypoint ({kx}, {ky}) outside {width}x{height}"
                )));
            }
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

pub trait VisionEncoder: Send + Sync {
    fn patch_size(&self) -> usize;
    fn width(&self) -> usize;
    fn encode_patches(&self, image: &ImageTensor) -> Result<PatchFeatures>;
}

pub trait IdentityEncoder: Send + Sync {
    fn encode_identity(&self, face: &ImageTensor) -> Result<IdEmbedding>;
}

pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn max_tokens(&self) -> usize;
    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding>;
}

/// Detectors may consult the image's source path (the stub reads sidecar
/// annotations next to it).
pub trait FaceDetector: Send + Sync {
    fn detect(&self, image: &ImageTensor, source: Option<&Path>) -> Result<Vec<FaceBox>>;
}

/// Non-overlapping `patch x patch` blocks, each flattened `(dy, dx, c)`.
pub fn extract_patches(image: &ImageTensor, patch: usize) -> Result<(usize, Vec<f64>)> {
    if patch == 0 || image.height() < patch || image.width() < patch {
        return Err(dim_err!(
            "image {}x{} is smaller than one {patch}x{patch} patch",
            image.height(),
            image.width()
        ));
    }
    let (gh, gw) = (image.height() / patch, image.width() / patch);
    let per = patch * patch * 3;
    let mut out = Vec::with_capacity(gh * gw * per);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    out.extend_from_slice(&image.pixel(py * patch + dy, px * patch + dx));
                }
            }
        }
    }
    Ok((gh * gw, out))
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; d];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// `stub` or `pretrained:<path>`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum BackendSpec {
    #[default]
    Stub,
    Pretrained(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "stub" {
            Ok(Self::Stub)
        } else if let Some(p) = s.strip_prefix("pretrained:") {
            if p.is_empty() {
                return Err(Error::Config("pretrained backend needs a path".into()));
            }
            Ok(Self::Pretrained(PathBuf::from(p)))
        } else {
            Err(Error::Config(format!(
                "backend must be `stub` or `pretrained:<path>`, got `{s}`"
            )))
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Stub => f.write_str("stub"),
            Self::Pretrained(p) => write!(f, "pretrained:{}", p.display()),
        }
    }
}

impl Serialize for BackendSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BackendSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The `[encoders]` configuration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vision: BackendSpec,
    pub identity: BackendSpec,
    pub text: BackendSpec,
    pub detector: BackendSpec,
    pub patch_size: usize,
    pub d_vis: usize,
    pub d_ctx: usize,
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vision: BackendSpec::Stub,
            identity: BackendSpec::Stub,
            text: BackendSpec::Stub,
            detector: BackendSpec::Stub,
            patch_size: 16,
            d_vis: 32,
            d_ctx: 32,
            max_tokens: 77,
        }
    }
}

/// Widths used when pretrained backends are attached at full scale.
pub const PRETRAINED_D_VIS: usize = 1280;
pub const PRETRAINED_D_CTX: usize = 768;

/// The four encoders used by training, generation and evaluation.
pub struct EncoderSet {
    pub vision: Box<dyn VisionEncoder>,
    pub identity: Box<dyn IdentityEncoder>,
    pub text: Box<dyn TextEncoder>,
    pub detector: Box<dyn FaceDetector>,
}

impl EncoderSet {
    pub fn from_config(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let vision: Box<dyn VisionEncoder> = match &cfg.vision {
            BackendSpec::Stub => Box::new(StubVision::new(seed, cfg.patch_size, cfg.d_vis)?),
            BackendSpec::Pretrained(p) => Box::new(PretrainedVision::load(p)?),
        };
        let identity: Box<dyn IdentityEncoder> = match &cfg.identity {
            BackendSpec::Stub => Box::new(StubIdentity::new(seed)),
            BackendSpec::Pretrained(p) => Box::new(PretrainedIdentity::load(p)?),
        };
        let text: Box<dyn TextEncoder> = match &cfg.text {
            BackendSpec::Stub => Box::new(StubText::new(seed, cfg.d_ctx, cfg.max_tokens)?),
            BackendSpec::Pretrained(p) => Box::new(PretrainedText::load(p, seed, cfg.max_tokens)?),
        };
        let detector: Box<dyn FaceDetector> = match &cfg.detector {
            BackendSpec::Stub => Box::new(SidecarDetector),
            BackendSpec::Pretrained(p) => {
                return Err(Error::UnsupportedBackend(format!(
                    "no weight-based face detector is bundled ({}); use the sidecar stub",
                    p.display()
                )))
            }
        };
        if vision.width() == 0 || text.width() == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(Self {
            vision,
            identity,
            text,
            detector,
        })
    }
}
