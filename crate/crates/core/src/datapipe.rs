//! Dataset curation: five filters, the face-crop rule and JSON-lines
//! manifests.
//!
//! Filters run in a fixed order (resolution, grayscale, text, multi_face,
//! cartoon). Each verdict depends only on the entry itself and the config,
//! never on the other filters; outside audit mode evaluation simply stops at
//! the first failure. Failing entries stay in the manifest with their flags.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{sidecar_path, FaceBox, FaceDetector, SidecarDetector};
use crate::error::{param_err, Error, Result};
use crate::image::ImageTensor;

pub const FILTERS: [&str; 5] = ["resolution", "grayscale", "text", "multi_face", "cartoon"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// No label was available; treated as passing.
    Unlabeled,
    IoError,
}

impl Verdict {
    pub fn passes(self) -> bool {
        matches!(self, Verdict::Pass | Verdict::Unlabeled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub caption: String,
    #[serde(default)]
    pub face: Option<FaceBox>,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub height: usize,
    #[serde(default)]
    pub filter_flags: BTreeMap<String, Verdict>,
    #[serde(default)]
    pub crop: Option<CropRect>,
}

impl ManifestEntry {
    pub fn new(image_path: impl Into<String>, caption: impl Into<String>) -> Self {
        Self {
            image_path: image_path.into(),
            caption: caption.into(),
            face: None,
            width: 0,
            height: 0,
            filter_flags: BTreeMap::new(),
            crop: None,
        }
    }

    /// Every recorded verdict passes and a crop was emitted.
    pub fn passed(&self) -> bool {
        self.crop.is_some() && self.filter_flags.values().all(|v| v.passes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// On the 0–255 scale.
    pub grayscale_std_threshold: f64,
    pub text_coverage_max: f64,
    pub expansion_factor: f64,
    pub top_fraction_by_resolution: f64,
    pub face_score_min: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grayscale_std_threshold: 6.0,
            text_coverage_max: 0.05,
            expansion_factor: 1.5,
            top_fraction_by_resolution: 1.0,
            face_score_min: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grayscale_std_threshold", self.grayscale_std_threshold),
            ("text_coverage_max", self.text_coverage_max),
            ("top_fraction_by_resolution", self.top_fraction_by_resolution),
            ("face_score_min", self.face_score_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.top_fraction_by_resolution > 1.0 {
            return Err(Error::Config("top_fraction_by_resolution must be at most 1".into()));
        }
        if !(self.expansion_factor >= 1.0 && self.expansion_factor.is_finite()) {
            return Err(Error::Config(format!(
                "expansion_factor must be >= 1, got {}",
                self.expansion_factor
            )));
        }
        Ok(())
    }
}

/// Sort key: larger short side first, then larger area, then path.
fn resolution_order(a: &ManifestEntry, b: &ManifestEntry) -> std::cmp::Ordering {
    let key = |e: &ManifestEntry| (e.width.min(e.height), e.width * e.height);
    key(b).cmp(&key(a)).then_with(|| a.image_path.cmp(&b.image_path))
}

/// Keep the top `round(n * top_fraction)` entries by resolution, returned in
/// ranked order.
pub fn filter_resolution(entries: &[ManifestEntry], top_fraction: f64) -> Vec<ManifestEntry> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(resolution_order);
    sorted.truncate(keep_count(entries.len(), top_fraction));
    sorted
}

fn keep_count(n: usize, f: f64) -> usize {
    ((n as f64 * f).round() as usize).min(n)
}

/// Mean over pixels of the population standard deviation across the three
/// channels, on the 0–255 scale. Grayscale iff strictly below `threshold`.
pub fn is_grayscale(image: &ImageTensor, threshold: f64) -> bool {
    mean_channel_std(image) < threshold
}

pub fn mean_channel_std(image: &ImageTensor) -> f64 {
    let v = image.to_255();
    let n = v.len() / 3;
    let total: f64 = v
        .chunks_exact(3)
        .map(|p| {
            let m = (p[0] + p[1] + p[2]) / 3.0;
            (((p[0] - m).powi(2) + (p[1] - m).powi(2) + (p[2] - m).powi(2)) / 3.0).sqrt()
        })
        .sum();
    total / n as f64
}

/// Axis-aligned text region in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

pub trait TextDetector: Send + Sync {
    fn text_boxes(&self, image: &ImageTensor, source: Option<&Path>) -> Result<Vec<TextBox>>;
}

/// Reads `<image>.ocr.json`; a missing file means no text.
#[derive(Debug, Clone, Copy, Default)]
pub struct SidecarOcr;

impl TextDetector for SidecarOcr {
    fn text_boxes(&self, _image: &ImageTensor, source: Option<&Path>) -> Result<Vec<TextBox>> {
        read_sidecar(source, "ocr.json").map(Option::unwrap_or_default)
    }
}

fn read_sidecar<T: for<'de> Deserialize<'de>>(source: Option<&Path>, suffix: &str) -> Result<Option<T>> {
    let Some(src) = source else { return Ok(None) };
    let path = sidecar_path(src, suffix);
    match std::fs::read_to_string(&path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Fraction of image pixels covered by the union of `boxes`.
pub fn text_coverage(boxes: &[TextBox], width: usize, height: usize) -> f64 {
    let mut grid = vec![false; width * height];
    for b in boxes {
        for y in b.y.min(height)..(b.y + b.h).min(height) {
            for x in b.x.min(width)..(b.x + b.w).min(width) {
                grid[y * width + x] = true;
            }
        }
    }
    grid.iter().filter(|&&c| c).count() as f64 / (width * height) as f64
}

pub fn has_text_overlay(
    image: &ImageTensor,
    source: Option<&Path>,
    ocr: &dyn TextDetector,
    max_coverage: f64,
) -> Result<bool> {
    let boxes = ocr.text_boxes(image, source)?;
    Ok(text_coverage(&boxes, image.width(), image.height()) > max_coverage)
}

/// Boxes strictly above `min_score`.
pub fn confident_faces(boxes: &[FaceBox], min_score: f64) -> Vec<FaceBox> {
    boxes.iter().filter(|b| b.score > min_score).copied().collect()
}

pub fn has_single_face(
    image: &ImageTensor,
    source: Option<&Path>,
    detector: &dyn FaceDetector,
    min_score: f64,
) -> Result<bool> {
    Ok(confident_faces(&detector.detect(image, source)?, min_score).len() == 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleLabel {
    Cartoon,
    Photo,
}

#[derive(Debug, Deserialize)]
struct StyleSidecar {
    label: StyleLabel,
}

pub trait StyleClassifier: Send + Sync {
    /// `None` when no decision is available.
    fn classify(&self, image: &ImageTensor, source: Option<&Path>) -> Result<Option<StyleLabel>>;
}

/// Reads `<image>.style.json` of the form `{"label": "cartoon" | "photo"}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SidecarStyle;

impl StyleClassifier for SidecarStyle {
    fn classify(&self, _image: &ImageTensor, source: Option<&Path>) -> Result<Option<StyleLabel>> {
        Ok(read_sidecar::<StyleSidecar>(source, "style.json")?.map(|s| s.label))
    }
}

/// Verdict of the cartoon filter: cartoon fails, photo passes, no label is
/// `Unlabeled`.
pub fn cartoon_verdict(
    image: &ImageTensor,
    source: Option<&Path>,
    classifier: &dyn StyleClassifier,
) -> Result<Verdict> {
    Ok(match classifier.classify(image, source)? {
        Some(StyleLabel::Cartoon) => Verdict::Fail,
        Some(StyleLabel::Photo) => Verdict::Pass,
        None => Verdict::Unlabeled,
    })
}

pub fn is_cartoon(
    image: &ImageTensor,
    source: Option<&Path>,
    classifier: &dyn StyleClassifier,
) -> Result<bool> {
    Ok(cartoon_verdict(image, source, classifier)? == Verdict::Fail)
}

/// Expand the box by `factor` about its centre, take the shorter expanded
/// side (floored, capped at the image's shorter side) and centre a square
/// of that side on the box, translated to lie inside the image.
pub fn crop_rect(width: usize, height: usize, face: &FaceBox, factor: f64) -> Result<CropRect> {
    if !(face.w > 0.0 && face.h > 0.0) {
        return Err(param_err!("degenerate face box {}x{}", face.w, face.h));
    }
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(param_err!("expansion factor {factor} must be >= 1"));
    }
    let expanded = (face.w * factor).min(face.h * factor);
    let side = ((expanded + 1e-9).floor() as usize).min(width.min(height)).max(1);
    let (cx, cy) = face.center();
    let place = |c: f64, limit: usize| -> usize {
        let start = (c - side as f64 / 2.0).round();
        start.clamp(0.0, (limit - side) as f64) as usize
    };
    Ok(CropRect {
        x: place(cx, width),
        y: place(cy, height),
        side,
    })
}

pub fn crop_face_region(
    image: &ImageTensor,
    face: &FaceBox,
    factor: f64,
) -> Result<(ImageTensor, CropRect)> {
    let r = crop_rect(image.width(), image.height(), face, factor)?;
    Ok((image.crop_square(r.x, r.y, r.side)?, r))
}

/// Pluggable predicates used by the pipeline.
pub struct CurationBackends {
    pub detector: Box<dyn FaceDetector>,
    pub ocr: Box<dyn TextDetector>,
    pub style: Box<dyn StyleClassifier>,
}

impl Default for CurationBackends {
    fn default() -> Self {
        Self {
            detector: Box::new(SidecarDetector),
            ocr: Box::new(SidecarOcr),
            style: Box::new(SidecarStyle),
        }
    }
}

/// Resolve a manifest path against the manifest's directory.
pub fn resolve_path(root: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Run all filters and the crop rule. Output order equals input order.
pub fn run_pipeline(
    config: &PipelineConfig,
    entries: &[ManifestEntry],
    backends: &CurationBackends,
    root: &Path,
    audit: bool,
) -> Result<Vec<ManifestEntry>> {
    config.validate()?;
    let loaded: Vec<Option<ImageTensor>> = entries
        .par_iter()
        .map(|e| match ImageTensor::load(&resolve_path(root, &e.image_path)) {
            Ok(img) => Some(img),
            Err(err) => {
                log::warn!("{}: {err}", e.image_path);
                None
            }
        })
        .collect();

    let mut out: Vec<ManifestEntry> = entries.to_vec();
    for (e, img) in out.iter_mut().zip(&loaded) {
        e.filter_flags.clear();
        e.crop = None;
        if let Some(img) = img {
            e.width = img.width();
            e.height = img.height();
        }
    }
    let readable: Vec<ManifestEntry> = out
        .iter()
        .zip(&loaded)
        .filter(|(_, img)| img.is_some())
        .map(|(e, _)| e.clone())
        .collect();
    let kept: std::collections::HashSet<String> =
        filter_resolution(&readable, config.top_fraction_by_resolution)
            .into_iter()
            .map(|e| e.image_path)
            .collect();

    let results: Vec<Result<ManifestEntry>> = out
        .into_par_iter()
        .zip(loaded.into_par_iter())
        .map(|(mut e, img)| {
            let Some(img) = img else {
                for f in FILTERS {
                    e.filter_flags.insert(f.into(), Verdict::IoError);
                }
                return Ok(e);
            };
            let src = resolve_path(root, &e.image_path);
            let resolution = if kept.contains(&e.image_path) {
                Verdict::Pass
            } else {
                Verdict::Fail
            };
            let mut faces = None;
            let checks: [&dyn Fn() -> Result<Verdict>; 4] = [
                &|| Ok(pass_if(!is_grayscale(&img, config.grayscale_std_threshold))),
                &|| {
                    Ok(pass_if(!has_text_overlay(
                        &img,
                        Some(&src),
                        backends.ocr.as_ref(),
                        config.text_coverage_max,
                    )?))
                },
                &|| Ok(pass_if(has_single_face(&img, Some(&src), backends.detector.as_ref(), config.face_score_min)?)),
                &|| cartoon_verdict(&img, Some(&src), backends.style.as_ref()),
            ];
            e.filter_flags.insert(FILTERS[0].into(), resolution);
            let mut all_pass = resolution.passes();
            for (name, check) in FILTERS[1..].iter().zip(checks) {
                if !all_pass && !audit {
                    break;
                }
                let v = check()?;
                all_pass &= v.passes();
                e.filter_flags.insert((*name).into(), v);
            }
            if all_pass {
                if e.caption.trim().is_empty() {
                    e.filter_flags.insert("caption".into(), Verdict::Fail);
                    return Ok(e);
                }
                let face = match e.face {
                    Some(f) => f,
                    None => {
                        let d = backends.detector.detect(&img, Some(&src))?;
                        let f = faces.get_or_insert(confident_faces(&d, config.face_score_min));
                        f[0]
                    }
                };
                face.validate(img.width(), img.height())?;
                e.face = Some(face);
                e.crop = Some(crop_rect(img.width(), img.height(), &face, config.expansion_factor)?);
            }
            Ok(e)
        })
        .collect();
    results.into_iter().collect()
}

fn pass_if(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> Result<String> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = manifest_to_string(entries)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
