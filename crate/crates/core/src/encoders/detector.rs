//! Sidecar-annotation face detector.

use std::path::{Path, PathBuf};

use super::{FaceBox, FaceDetector};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// `<image>.<suffix>`, e.g. `face.png` -> `face.png.faces.json`.
pub fn sidecar_path(image: &Path, suffix: &str) -> PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Boxes from `<image>.faces.json`; a missing file means no faces.
pub fn read_face_sidecar(image: &Path) -> Result<Vec<FaceBox>> {
    let path = sidecar_path(image, "faces.json");
    match std::fs::read_to_string(&path) {
        Ok(text) => Ok(serde_json::from_str(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn write_face_sidecar(image: &Path, boxes: &[FaceBox]) -> Result<()> {
    let path = sidecar_path(image, "faces.json");
    let text = serde_json::to_string_pretty(boxes)?;
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Returns the annotated boxes for the source path, highest score first.
#[derive(Debug, Clone, Copy, Default)]
pub struct SidecarDetector;

impl FaceDetector for SidecarDetector {
    fn detect(&self, _image: &ImageTensor, source: Option<&Path>) -> Result<Vec<FaceBox>> {
        let Some(path) = source else {
            return Ok(Vec::new());
        };
        let mut boxes = read_face_sidecar(path)?;
        boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(boxes)
    }
}
