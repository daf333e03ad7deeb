//! `ImageTensor`: interleaved `H x W x 3` values in `[-1, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(dim_err!(
                "image {height}x{width} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            ));
        }
        if data.len() != height * width * 3 {
            return Err(dim_err!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Range(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data = img
            .as_raw()
            .iter()
            .map(|&b| b as f64 / 127.5 - 1.0)
            .collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// Pixel values on the 0–255 scale, interleaved.
    pub fn to_255(&self) -> Vec<f64> {
        self.data.iter().map(|&v| (v + 1.0) * 127.5).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Square crop at `(x, y)` with the given side; must lie inside the image.
    pub fn crop_square(&self, x: usize, y: usize, side: usize) -> Result<Self> {
        if x + side > self.width || y + side > self.height {
            return Err(Error::Range(format!(
                "crop ({x}, {y}, {side}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(side * side * 3);
        for row in y..y + side {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + side * 3]);
        }
        Self::new(side, side, data)
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width * 3);
        for oy in 0..height {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..width {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let (a, b, c, d) = (
                    self.pixel(y0, x0),
                    self.pixel(y0, x1),
                    self.pixel(y1, x0),
                    self.pixel(y1, x1),
                );
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - tx) + b[ch] * tx;
                    let bot = c[ch] * (1.0 - tx) + d[ch] * tx;
                    data.push((top * (1.0 - ty) + bot * ty).clamp(-1.0, 1.0));
                }
            }
        }
        Self::new(height, width, data)
    }

    /// Channel-first copy, `[3, H, W]`.
    pub fn to_chw(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(c * h + y) * w + x] = self.data[(y * w + x) * 3 + c];
                }
            }
        }
        Tensor::from_parts(vec![3, h, w], out)
    }

    /// Inverse of [`to_chw`](Self::to_chw); values are clamped into range.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(dim_err!("expected [3, H, W], got {:?}", s));
        }
        let (h, w) = (s[1], s[2]);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * 3 + c] = t.data()[(c * h + y) * w + x].clamp(-1.0, 1.0);
                }
            }
        }
        Self::new(h, w, data)
    }
}

fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}
