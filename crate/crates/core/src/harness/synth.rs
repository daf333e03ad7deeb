//! Procedural face-like images for desk-scale runs.
//!
//! Each sample is an elliptical head with a hair cap on a flat background,
//! two eyes, a nose and a mouth. Keypoints come from the same geometry used
//! for drawing, and the caption names the colours actually drawn.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{write_manifest, ManifestEntry};
use crate::encoders::{write_face_sidecar, FaceBox};
use crate::error::{param_err, Error, Result};
use crate::hash::derive_seed;
use crate::image::ImageTensor;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

const BACKGROUNDS: [(&str, [f64; 3]); 4] = [
    ("blue", [-0.6, -0.3, 0.6]),
    ("green", [-0.5, 0.4, -0.5]),
    ("gray", [0.0, 0.0, 0.0]),
    ("orange", [0.8, 0.1, -0.7]),
];
const HAIR: [(&str, [f64; 3]); 4] = [
    ("black", [-0.9, -0.9, -0.9]),
    ("brown", [-0.2, -0.5, -0.75]),
    ("blond", [0.8, 0.6, -0.1]),
    ("red", [0.6, -0.5, -0.6]),
];
const SKIN: [[f64; 3]; 3] = [[0.85, 0.55, 0.35], [0.5, 0.15, -0.1], [0.1, -0.2, -0.4]];
const SUBJECTS: [&str; 3] = ["person", "man", "woman"];
const EXPRESSIONS: [&str; 3] = ["smiling", "calm", "serious"];

/// One drawn sample and its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFaceSample {
    pub image: ImageTensor,
    pub caption: String,
    pub face: FaceBox,
}

fn pick<'a, T, R: Rng>(rng: &mut R, xs: &'a [T]) -> &'a T {
    &xs[rng.random_range(0..xs.len())]
}

/// Draw sample `index` of the dataset for `seed` on a `side x side` canvas.
pub fn synthetic_face(seed: u64, index: usize, side: usize) -> Result<SyntheticFaceSample> {
    if side < 32 {
        return Err(param_err!("synthetic images need side >= 32, got {side}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("synth.{index}")));
    let s = side as f64;
    let (bg_name, bg) = *pick(&mut rng, &BACKGROUNDS);
    let (hair_name, hair) = *pick(&mut rng, &HAIR);
    let skin = *pick(&mut rng, &SKIN);
    let subject = *pick(&mut rng, &SUBJECTS);
    let expression = *pick(&mut rng, &EXPRESSIONS);

    let rx = s * rng.random_range(0.17..0.24);
    let ry = rx * rng.random_range(1.15..1.3);
    let cx = rng.random_range(rx + 2.0..s - rx - 2.0);
    let cy = rng.random_range(ry + 2.0..s - ry - 2.0);
    let eye_dx = rx * rng.random_range(0.3..0.42);
    let eye_y = cy - ry * rng.random_range(0.1..0.25);
    let mouth_dx = rx * rng.random_range(0.25..0.4);
    let mouth_y = cy + ry * rng.random_range(0.4..0.55);
    let nose_y = cy + ry * 0.12;
    let keypoints = [
        [cx - eye_dx, eye_y],
        [cx + eye_dx, eye_y],
        [cx, nose_y],
        [cx - mouth_dx, mouth_y],
        [cx + mouth_dx, mouth_y],
    ];
    let feature_r = (rx * 0.12).max(1.0);
    let dark = [-0.85, -0.85, -0.8];
    let lips = [0.4, -0.6, -0.5];

    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let e = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
            let near = |k: [f64; 2], r: f64| (px - k[0]).powi(2) + (py - k[1]).powi(2) <= r * r;
            let mut c = bg;
            if e <= 1.0 {
                c = if py < cy - 0.55 * ry { hair } else { skin };
                if near(keypoints[0], feature_r) || near(keypoints[1], feature_r) {
                    c = dark;
                } else if near(keypoints[2], feature_r * 0.8) {
                    c = [skin[0] - 0.25, skin[1] - 0.25, skin[2] - 0.2];
                } else if (py - mouth_y).abs() <= feature_r * 0.7
                    && (px - cx).abs() <= mouth_dx
                {
                    c = lips;
                }
            }
            data.extend_from_slice(&c);
        }
    }
    let image = ImageTensor::new(side, side, data)?;
    let face = FaceBox {
        x: cx - rx,
        y: cy - ry,
        w: 2.0 * rx,
        h: 2.0 * ry,
        score: 0.99,
        keypoints,
    };
    face.validate(side, side)?;
    let caption = format!("a {expression} {subject} with {hair_name} hair on a {bg_name} background");
    Ok(SyntheticFaceSample { image, caption, face })
}

/// Write `n` samples, their face sidecars and `manifest.jsonl` into `dir`.
/// Byte-identical for equal `(n, seed, side)`.
pub fn generate_synthetic_dataset(dir: &Path, n: usize, seed: u64, side: usize) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(param_err!("synthetic dataset needs n >= 1"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let s = synthetic_face(seed, i, side)?;
        let name = format!("synth_{i:04}.png");
        let path = dir.join(&name);
        s.image.save_png(&path)?;
        write_face_sidecar(&path, &[s.face])?;
        entries.push(ManifestEntry {
            face: Some(s.face),
            width: side,
            height: side,
            ..ManifestEntry::new(name, s.caption)
        });
    }
    write_manifest(&dir.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}
