//! Fixed orthogonal block codec standing in for a learned VAE.
//!
//! Each `f x f` pixel block maps to four latent channels: the mean of the
//! red, green and blue values, and the top-minus-bottom half contrast of the
//! channel-averaged intensity (halved). The four basis patterns are mutually
//! orthogonal, so `decode(encode(x))` is the orthogonal projection of `x` onto
//! their span and `encode(decode(z)) == z` for latents whose decoded pixels
//! stay inside `[-1, 1]`.

use crate::error::{dim_err, Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    pub image_side: usize,
    pub latent_side: usize,
}

impl LatentCodec {
    pub fn new(image_side: usize, latent_side: usize) -> Result<Self> {
        if latent_side == 0 || !image_side.is_multiple_of(latent_side) {
            return Err(Error::Config(format!(
                "image side {image_side} is not a multiple of latent side {latent_side}"
            )));
        }
        let f = image_side / latent_side;
        if f < 2 || !f.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "codec block size {f} must be even and at least 2"
            )));
        }
        Ok(Self {
            image_side,
            latent_side,
        })
    }

    pub fn block(&self) -> usize {
        self.image_side / self.latent_side
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [LATENT_CHANNELS, self.latent_side, self.latent_side]
    }

    /// `[4, s, s]` latent of a square image at the codec resolution.
    pub fn encode(&self, image: &ImageTensor) -> Result<Tensor> {
        if image.height() != self.image_side || image.width() != self.image_side {
            return Err(dim_err!(
                "codec expects {0}x{0} images, got {1}x{2}",
                self.image_side,
                image.height(),
                image.width()
            ));
        }
        let (s, f) = (self.latent_side, self.block());
        let half = f / 2;
        let n = (f * f) as f64;
        let mut out = vec![0.0; LATENT_CHANNELS * s * s];
        for by in 0..s {
            for bx in 0..s {
                let mut sums = [0.0; 3];
                let mut contrast = 0.0;
                for dy in 0..f {
                    let sign = if dy < half { 1.0 } else { -1.0 };
                    for dx in 0..f {
                        let p = image.pixel(by * f + dy, bx * f + dx);
                        for c in 0..3 {
                            sums[c] += p[c];
                            contrast += sign * p[c];
                        }
                    }
                }
                let cell = by * s + bx;
                for c in 0..3 {
                    out[c * s * s + cell] = sums[c] / n;
                }
                out[3 * s * s + cell] = contrast / (3.0 * n);
            }
        }
        Tensor::new(self.latent_shape().to_vec(), out)
    }

    /// Image reconstruction; pixel values are clamped into `[-1, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<ImageTensor> {
        if latent.shape() != self.latent_shape() {
            return Err(dim_err!(
                "codec expects latent {:?}, got {:?}",
                self.latent_shape(),
                latent.shape()
            ));
        }
        let (s, f) = (self.latent_side, self.block());
        let side = self.image_side;
        let z = latent.data();
        let mut data = vec![0.0; side * side * 3];
        for y in 0..side {
            let (by, sign) = (y / f, if y % f < f / 2 { 1.0 } else { -1.0 });
            for x in 0..side {
                let cell = by * s + x / f;
                let d = z[3 * s * s + cell];
                for c in 0..3 {
                    data[(y * side + x) * 3 + c] = (z[c * s * s + cell] + sign * d).clamp(-1.0, 1.0);
                }
            }
        }
        ImageTensor::new(side, side, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(LatentCodec::new(64, 7).is_err());
        assert!(LatentCodec::new(8, 8).is_err());
        assert!(LatentCodec::new(64, 8).is_ok());
    }

    #[test]
    fn encode_decode_encode_is_stable() {
        let codec = LatentCodec::new(16, 4).unwrap();
        let data = (0..16 * 16 * 3)
            .map(|i| (((i * 29) % 97) as f64 / 48.5 - 1.0) * 0.5)
            .collect();
        let img = ImageTensor::new(16, 16, data).unwrap();
        let z = codec.encode(&img).unwrap();
        let z2 = codec.encode(&codec.decode(&z).unwrap()).unwrap();
        assert!(z.max_abs_diff(&z2) < 1e-12);
    }

    #[test]
    fn projection_residual_is_orthogonal() {
        let codec = LatentCodec::new(16, 4).unwrap();
        let data: Vec<f64> = (0..16 * 16 * 3)
            .map(|i| (((i * 13) % 31) as f64 / 15.5 - 1.0) * 0.3)
            .collect();
        let img = ImageTensor::new(16, 16, data).unwrap();
        let rec = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        let resid: Vec<f64> = img.data().iter().zip(rec.data()).map(|(a, b)| a - b).collect();
        let r = ImageTensor::new(16, 16, resid.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
            .unwrap();
        let zr = codec.encode(&r).unwrap();
        assert!(zr.max_abs() < 1e-12);
    }
}
