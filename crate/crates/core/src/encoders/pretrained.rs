//! Weight-file backends. Each file is a tensor container with an `encoder`
//! section:
//!
//! * vision: `projection` `[patch*patch*3, d_vis]`
//! * identity: `projection` `[16*16*3, 512]`
//! * text: `mix` `[d_ctx, d_ctx]` applied to hashed token rows, and `null` `[1, d_ctx]`

use std::path::Path;

use super::stub::{encode_tokens, identity_forward, StubVision, ID_STUB_SIDE};
use super::{
    IdEmbedding, IdentityEncoder, PatchFeatures, TextEmbedding, TextEncoder, VisionEncoder, ID_DIM,
};
use crate::container::{Container, Section};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{matmul, Tensor};

fn encoder_tensor<'a>(c: &'a Container, path: &Path, name: &str) -> Result<&'a Tensor> {
    c.section("encoder")
        .and_then(|s| s.get(name))
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: missing encoder tensor `{name}`",
                path.display()
            ))
        })
}

/// Write a single-section encoder weight file.
pub fn save_encoder_file(path: &Path, tensors: Vec<(String, Tensor)>) -> Result<()> {
    Container {
        meta: "{}".into(),
        step: 0,
        sections: vec![Section {
            name: "encoder".into(),
            tensors,
        }],
    }
    .save(path)
}

pub struct PretrainedVision(StubVision);

impl PretrainedVision {
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let proj = encoder_tensor(&c, path, "projection")?;
        if proj.shape().len() != 2 || proj.shape()[0] % 3 != 0 {
            return Err(Error::Format(format!("vision projection shape {:?}", proj.shape())));
        }
        let per_channel = proj.shape()[0] / 3;
        let patch = (per_channel as f64).sqrt().round() as usize;
        if patch * patch != per_channel {
            return Err(Error::Format(format!(
                "vision projection rows {} are not 3*patch^2",
                proj.shape()[0]
            )));
        }
        Ok(Self(StubVision::from_projection(patch, proj.clone())))
    }

    pub fn save(path: &Path, projection: Tensor) -> Result<()> {
        save_encoder_file(path, vec![("projection".into(), projection)])
    }
}

impl VisionEncoder for PretrainedVision {
    fn patch_size(&self) -> usize {
        self.0.patch_size()
    }

    fn width(&self) -> usize {
        self.0.width()
    }

    fn encode_patches(&self, image: &ImageTensor) -> Result<PatchFeatures> {
        self.0.encode_patches(image)
    }
}

pub struct PretrainedIdentity {
    projection: Tensor,
}

impl PretrainedIdentity {
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let proj = encoder_tensor(&c, path, "projection")?;
        let expected = [ID_STUB_SIDE * ID_STUB_SIDE * 3, ID_DIM];
        if proj.shape() != expected {
            return Err(Error::Format(format!(
                "identity projection shape {:?}, expected {:?}",
                proj.shape(),
                expected
            )));
        }
        Ok(Self {
            projection: proj.clone(),
        })
    }

    pub fn save(path: &Path, projection: Tensor) -> Result<()> {
        save_encoder_file(path, vec![("projection".into(), projection)])
    }
}

impl IdentityEncoder for PretrainedIdentity {
    fn encode_identity(&self, face: &ImageTensor) -> Result<IdEmbedding> {
        identity_forward(&self.projection, face)
    }
}

pub struct PretrainedText {
    seed: u64,
    max_tokens: usize,
    mix: Tensor,
    null: Tensor,
}

impl PretrainedText {
    pub fn load(path: &Path, seed: u64, max_tokens: usize) -> Result<Self> {
        let c = Container::load(path)?;
        let mix = encoder_tensor(&c, path, "mix")?.clone();
        let null = encoder_tensor(&c, path, "null")?.clone();
        let w = mix.shape()[0];
        if mix.shape() != [w, w] || null.shape() != [1, w] {
            return Err(Error::Format(format!(
                "text weights mix {:?} null {:?}",
                mix.shape(),
                null.shape()
            )));
        }
        Ok(Self {
            seed,
            max_tokens,
            mix,
            null,
        })
    }

    pub fn save(path: &Path, mix: Tensor, null: Tensor) -> Result<()> {
        save_encoder_file(path, vec![("mix".into(), mix), ("null".into(), null)])
    }
}

impl TextEncoder for PretrainedText {
    fn width(&self) -> usize {
        self.mix.shape()[0]
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        let w = self.width();
        let (rows, truncated) = encode_tokens(self.seed, w, self.max_tokens, prompt);
        if rows.len() == 1 && super::tokenize(prompt).is_empty() {
            return Ok(TextEmbedding {
                tokens: self.null.clone(),
                truncated,
            });
        }
        let l = rows.len();
        let hashed = Tensor::new([l, w], rows.concat())?;
        Ok(TextEmbedding {
            tokens: matmul(&hashed, &self.mix)?,
            truncated,
        })
    }
}
