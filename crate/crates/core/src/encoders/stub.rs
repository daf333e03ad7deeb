use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    extract_patches, IdEmbedding, IdentityEncoder, PatchFeatures, TextEmbedding, TextEncoder,
    VisionEncoder, ID_DIM,
};
use crate::error::{dim_err, Error, Result};
use crate::hash::{derive_seed, fnv1a64, splitmix64};
use crate::image::ImageTensor;
use crate::tensor::{matmul, Tensor};

/// Side of the downsampled face crop fed to the identity stub.
pub const ID_STUB_SIDE: usize = 16;

/// Fixed seeded linear projection of non-overlapping patches, zero bias.
#[derive(Debug, Clone)]
pub struct StubVision {
    patch: usize,
    projection: Tensor,
}

impl StubVision {
    pub fn new(seed: u64, patch: usize, width: usize) -> Result<Self> {
        Self::with_stream(seed, "encoders.vision", patch, width)
    }

    /// A separately seeded projection, e.g. for the self-supervised metric
    /// encoder.
    pub fn with_stream(seed: u64, stream: &str, patch: usize, width: usize) -> Result<Self> {
        if patch == 0 || width == 0 {
            return Err(Error::Config("patch size and width must be positive".into()));
        }
        let fan_in = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
        let projection = Tensor::randn([fan_in, width], 1.0 / (fan_in as f64).sqrt(), &mut rng);
        Ok(Self { patch, projection })
    }

    pub(crate) fn from_projection(patch: usize, projection: Tensor) -> Self {
        Self { patch, projection }
    }
}

impl VisionEncoder for StubVision {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn width(&self) -> usize {
        self.projection.shape()[1]
    }

    fn encode_patches(&self, image: &ImageTensor) -> Result<PatchFeatures> {
        let (count, flat) = extract_patches(image, self.patch)?;
        let per = self.patch * self.patch * 3;
        let patches = Tensor::new([count, per], flat)?;
        PatchFeatures::new(matmul(&patches, &self.projection)?)
    }
}

/// Seeded random projection of a 16x16 downsample, then L2 normalisation.
#[derive(Debug, Clone)]
pub struct StubIdentity {
    projection: Tensor,
}

impl StubIdentity {
    pub fn new(seed: u64) -> Self {
        let fan_in = ID_STUB_SIDE * ID_STUB_SIDE * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoders.identity"));
        Self {
            projection: Tensor::randn([fan_in, ID_DIM], 1.0 / (fan_in as f64).sqrt(), &mut rng),
        }
    }
}

pub(crate) fn identity_forward(projection: &Tensor, face: &ImageTensor) -> Result<IdEmbedding> {
    if face.height() != face.width() {
        return Err(dim_err!(
            "face crop must be square, got {}x{}",
            face.height(),
            face.width()
        ));
    }
    let small = face.resize(ID_STUB_SIDE, ID_STUB_SIDE)?;
    let x = Tensor::new([1, ID_STUB_SIDE * ID_STUB_SIDE * 3], small.data().to_vec())?;
    let raw = matmul(&x, projection)?;
    IdEmbedding::from_raw(raw.into_data())
}

impl IdentityEncoder for StubIdentity {
    fn encode_identity(&self, face: &ImageTensor) -> Result<IdEmbedding> {
        identity_forward(&self.projection, face)
    }
}

/// Lower-cased alphanumeric runs.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Per-token vectors drawn from a ChaCha8 stream seeded by
/// `splitmix64(fnv1a64(token) ^ seed)`. The empty prompt maps to one
/// dedicated null row.
#[derive(Debug, Clone)]
pub struct StubText {
    seed: u64,
    width: usize,
    max_tokens: usize,
}

pub(crate) const NULL_TOKEN_KEY: &str = "\u{0}<null>";

impl StubText {
    pub fn new(seed: u64, width: usize, max_tokens: usize) -> Result<Self> {
        if width == 0 || max_tokens == 0 {
            return Err(Error::Config("text width and max_tokens must be positive".into()));
        }
        Ok(Self {
            seed,
            width,
            max_tokens,
        })
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        token_vector(self.seed, self.width, token)
    }
}

pub(crate) fn token_vector(seed: u64, width: usize, token: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(fnv1a64(token.as_bytes()) ^ seed));
    Tensor::randn([width], 1.0, &mut rng).into_data()
}

pub(crate) fn encode_tokens(
    seed: u64,
    width: usize,
    max_tokens: usize,
    prompt: &str,
) -> (Vec<Vec<f64>>, bool) {
    let mut tokens = tokenize(prompt);
    let truncated = tokens.len() > max_tokens;
    if truncated {
        log::warn!(
            "prompt has {} tokens, truncating to {max_tokens}: {prompt:?}",
            tokens.len()
        );
        tokens.truncate(max_tokens);
    }
    if tokens.is_empty() {
        return (vec![token_vector(seed, width, NULL_TOKEN_KEY)], truncated);
    }
    (
        tokens
            .iter()
            .map(|t| token_vector(seed, width, t))
            .collect(),
        truncated,
    )
}

impl TextEncoder for StubText {
    fn width(&self) -> usize {
        self.width
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        let (rows, truncated) = encode_tokens(self.seed, self.width, self.max_tokens, prompt);
        let l = rows.len();
        Ok(TextEmbedding {
            tokens: Tensor::new([l, self.width], rows.concat())?,
            truncated,
        })
    }
}
