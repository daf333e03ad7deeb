//! Metric suite and prompt protocol.
//!
//! Similarity metrics are cosines scaled by 100. Every metric whose backend
//! is missing is reported as `null`, never as zero.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{confident_faces, crop_face_region};
use crate::encoders::{sidecar_path, EncoderSet, VisionEncoder};
use crate::error::{param_err, Error, Result};
use crate::image::ImageTensor;

pub const PLACEHOLDER: &str = "<class word>";

/// Twelve base templates plus eight more in the
/// same four categories.
pub const DEFAULT_TEMPLATES: [&str; 20] = [
    // clothing & accessory
    "a <class word> with a red hat.",
    "a <class word> in a long coat.",
    "a <class word> wearing glasses.",
    "a <class word> wearing a wool scarf.",
    "a <class word> with a leather backpack.",
    // background
    "a <class word> standing in a park.",
    "a <class word> in a cozy room.",
    "a <class word> near a sunny beach.",
    "a <class word> in front of a snowy mountain.",
    "a <class word> on a city street at night.",
    // action
    "a <class word> running on a track.",
    "a <class word> holding a cup of coffee.",
    "a <class word> playing a guitar.",
    "a <class word> reading a book.",
    "a <class word> riding a bicycle.",
    // outfit style
    "a <class word> dressed in formal attire.",
    "a <class word> wearing sportswear.",
    "a <class word> dressed for a wedding.",
    "a <class word> in vintage fashion.",
    "a <class word> in traditional clothing.",
];

/// Forty binary face attributes, in the usual order.
pub const ATTRIBUTES: [&str; 40] = [
    "5_o_Clock_Shadow", "Arched_Eyebrows", "Attractive", "Bags_Under_Eyes", "Bald",
    "Bangs", "Big_Lips", "Big_Nose", "Black_Hair", "Blond_Hair",
    "Blurry", "Brown_Hair", "Bushy_Eyebrows", "Chubby", "Double_Chin",
    "Eyeglasses", "Goatee", "Gray_Hair", "Heavy_Makeup", "High_Cheekbones",
    "Male", "Mouth_Slightly_Open", "Mustache", "Narrow_Eyes", "No_Beard",
    "Oval_Face", "Pale_Skin", "Pointy_Nose", "Receding_Hairline", "Rosy_Cheeks",
    "Sideburns", "Smiling", "Straight_Hair", "Wavy_Hair", "Wearing_Earrings",
    "Wearing_Hat", "Wearing_Lipstick", "Wearing_Necklace", "Wearing_Necktie", "Young",
];

pub const ATTRIBUTE_THRESHOLD: f64 = 0.5;

/// Scores reported for the full-scale model (4M training images, 512px).
/// Kept for reference only; desk-scale runs do not approach them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceScores {
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino: f64,
    pub face_sim: f64,
    pub fid: f64,
    pub attr_c: f64,
    pub vlm_score: f64,
}

pub const FULL_SCALE_UNSPLASH_FACE: ReferenceScores = ReferenceScores {
    clip_t: 22.3,
    clip_i: 82.1,
    dino: 73.2,
    face_sim: 69.2,
    fid: 130.1,
    attr_c: 4.0,
    vlm_score: 79.6,
};

pub const FULL_SCALE_FACECAPTION: ReferenceScores = ReferenceScores {
    clip_t: 21.96,
    clip_i: 87.4,
    dino: 79.4,
    face_sim: 77.8,
    fid: 95.4,
    attr_c: 6.3,
    vlm_score: 73.1,
};

/// `100 (a.b) / sqrt(|a|^2 |b|^2)`, clamped to `[-100, 100]`.
pub fn cosine_sim_metric(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(crate::error::dim_err!("feature lengths {} and {}", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((100.0 * (dot / (na * nb).sqrt())).clamp(-100.0, 100.0))
}

fn mean_and_cov(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return Err(param_err!("FID needs at least 2 samples per set, got {}", rows.len()));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(crate::error::dim_err!("FID feature rows must share a positive width"));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric matrix, negative eigenvalues
/// clamped at zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetric(m));
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two feature sets.
///
/// `Tr((S1 S2)^(1/2))` is evaluated as the sum of clamped square roots of the
/// eigenvalues of the symmetric `S1^(1/2) S2 S1^(1/2)`.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu1, s1) = mean_and_cov(a)?;
    let (mu2, s2) = mean_and_cov(b)?;
    if mu1.len() != mu2.len() {
        return Err(crate::error::dim_err!("FID widths {} and {}", mu1.len(), mu2.len()));
    }
    let r1 = sqrt_psd(&s1);
    let inner = symmetric(&(&r1 * &s2 * &r1));
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (&mu1 - &mu2).norm_squared();
    Ok((diff + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Multi-label face attribute predictor.
pub trait AttributeBackend: Send + Sync {
    /// Scores for [`ATTRIBUTES`], or `None` without a prediction.
    fn scores(&self, image: &ImageTensor, source: Option<&Path>) -> Result<Option<Vec<f64>>>;
}

/// Reads `<image>.attrs.json`: a list of 40 scores.
#[derive(Debug, Clone, Copy, Default)]
pub struct SidecarAttributes;

impl AttributeBackend for SidecarAttributes {
    fn scores(&self, _image: &ImageTensor, source: Option<&Path>) -> Result<Option<Vec<f64>>> {
        let Some(src) = source else { return Ok(None) };
        let path = sidecar_path(src, "attrs.json");
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let scores: Vec<f64> = serde_json::from_str(&text)?;
        if scores.len() != ATTRIBUTES.len() {
            return Err(Error::Format(format!(
                "{}: expected {} attribute scores, got {}",
                path.display(),
                ATTRIBUTES.len(),
                scores.len()
            )));
        }
        Ok(Some(scores))
    }
}

/// Attributes scored strictly above [`ATTRIBUTE_THRESHOLD`].
pub fn attr_count(
    image: &ImageTensor,
    source: Option<&Path>,
    backend: &dyn AttributeBackend,
) -> Result<Option<usize>> {
    Ok(backend
        .scores(image, source)?
        .map(|s| s.iter().filter(|&&v| v > ATTRIBUTE_THRESHOLD).count()))
}

/// Judges prompt adherence of an image on a 0–100 scale.
pub trait VlmScorer: Send + Sync {
    fn score(&self, image: &ImageTensor, prompt: &str) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub class_word: String,
    pub templates: Vec<String>,
    pub prompts: Vec<String>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

pub fn expand_prompts<S: AsRef<str>>(class_word: &str, templates: &[S]) -> Result<PromptSet> {
    let mut prompts = Vec::with_capacity(templates.len());
    for t in templates {
        let t = t.as_ref();
        let count = t.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Format(format!(
                "template {t:?} has {count} placeholders, expected exactly one"
            )));
        }
        prompts.push(t.replacen(PLACEHOLDER, class_word, 1));
    }
    Ok(PromptSet {
        class_word: class_word.to_string(),
        templates: templates.iter().map(|t| t.as_ref().to_string()).collect(),
        prompts,
    })
}

pub fn default_prompts(class_word: &str) -> PromptSet {
    expand_prompts(class_word, &DEFAULT_TEMPLATES).expect("default templates are valid")
}

/// One template per line; blank lines and `#` comments are skipped.
pub fn parse_prompt_file(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split_once('#').map_or(l, |(head, _)| head).trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn generated_name(reference_stem: &str, prompt_index: usize) -> String {
    format!("{reference_stem}_{prompt_index}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub reference: String,
    pub generated: String,
    pub prompt_index: usize,
    pub prompt: String,
    pub clip_t: Option<f64>,
    pub clip_i: f64,
    pub dino: f64,
    pub face_sim: f64,
    pub attr_c: Option<f64>,
    pub vlm_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_t: Option<f64>,
    pub clip_i: Option<f64>,
    pub dino: Option<f64>,
    pub face_sim: Option<f64>,
    pub fid: Option<f64>,
    pub attr_c: Option<f64>,
    pub vlm_score: Option<f64>,
    pub n_pairs: usize,
    pub pairs: Vec<PairMetrics>,
}

pub struct EvalBackends<'a> {
    pub encoders: &'a EncoderSet,
    /// Self-supervised image features for the DINO metric.
    pub dino: Box<dyn VisionEncoder>,
    pub attributes: Option<Box<dyn AttributeBackend>>,
    pub vlm: Option<Box<dyn VlmScorer>>,
    pub expansion_factor: f64,
    pub face_score_min: f64,
}

/// Reference images (`*.png`) in name order.
pub fn list_references(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Detected face crop, or the centred square of the full image when no
/// confident face is found.
pub fn face_region(image: &ImageTensor, source: &Path, b: &EvalBackends) -> Result<ImageTensor> {
    let faces = confident_faces(&b.encoders.detector.detect(image, Some(source))?, b.face_score_min);
    if let Some(f) = faces.first() {
        return Ok(crop_face_region(image, f, b.expansion_factor)?.0);
    }
    let side = image.height().min(image.width());
    image.crop_square((image.width() - side) / 2, (image.height() - side) / 2, side)
}

struct Features {
    clip: Vec<f64>,
    dino: Vec<f64>,
    id: Vec<f64>,
}

fn features(image: &ImageTensor, source: &Path, b: &EvalBackends) -> Result<Features> {
    Ok(Features {
        clip: b.encoders.vision.encode_patches(image)?.pooled(),
        dino: b.dino.encode_patches(image)?.pooled(),
        id: b.encoders.identity.encode_identity(&face_region(image, source, b)?)?.as_slice().to_vec(),
    })
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let all: Option<Vec<f64>> = values.iter().copied().collect();
    all.filter(|v| !v.is_empty()).map(|v| mean(v.iter().copied(), v.len()))
}

/// Score every `(reference, prompt)` pair. Generated images are named
/// `<reference stem>_<prompt index>.png`.
pub fn evaluate_run(
    generated_dir: &Path,
    references_dir: &Path,
    prompts: &PromptSet,
    b: &EvalBackends,
) -> Result<MetricReport> {
    let refs = list_references(references_dir)?;
    let mut jobs = Vec::new();
    let mut missing = Vec::new();
    for (ri, r) in refs.iter().enumerate() {
        for (pi, _) in prompts.prompts.iter().enumerate() {
            let g = generated_dir.join(generated_name(&stem(r), pi));
            if g.is_file() {
                jobs.push((ri, pi, g));
            } else {
                missing.push(g.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Protocol { missing });
    }
    if jobs.is_empty() {
        return Err(param_err!("no evaluation pairs: need references and prompts"));
    }

    let ref_feats: Vec<Features> = refs
        .par_iter()
        .map(|r| features(&ImageTensor::load(r)?, r, b))
        .collect::<Result<_>>()?;
    let text_feats: Option<Vec<Vec<f64>>> = if b.encoders.vision.width() == b.encoders.text.width() {
        Some(
            prompts
                .prompts
                .iter()
                .map(|p| Ok(b.encoders.text.encode_text(p)?.pooled()))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let results: Vec<(PairMetrics, Vec<f64>)> = jobs
        .par_iter()
        .map(|(ri, pi, g)| {
            let img = ImageTensor::load(g)?;
            let f = features(&img, g, b)?;
            let rf = &ref_feats[*ri];
            let clip_t = match &text_feats {
                Some(t) => Some(cosine_sim_metric(&f.clip, &t[*pi])?),
                None => None,
            };
            let attr_c = match &b.attributes {
                Some(a) => attr_count(&img, Some(g), a.as_ref())?.map(|c| c as f64),
                None => None,
            };
            let vlm_score = match &b.vlm {
                Some(v) => Some(v.score(&img, &prompts.prompts[*pi])?.clamp(0.0, 100.0)),
                None => None,
            };
            let pair = PairMetrics {
                reference: refs[*ri].file_name().unwrap().to_string_lossy().into_owned(),
                generated: g.file_name().unwrap().to_string_lossy().into_owned(),
                prompt_index: *pi,
                prompt: prompts.prompts[*pi].clone(),
                clip_t,
                clip_i: cosine_sim_metric(&f.clip, &rf.clip)?,
                dino: cosine_sim_metric(&f.dino, &rf.dino)?,
                face_sim: cosine_sim_metric(&f.id, &rf.id)?,
                attr_c,
                vlm_score,
            };
            Ok((pair, f.clip))
        })
        .collect::<Result<_>>()?;

    let n = results.len();
    let pairs: Vec<PairMetrics> = results.iter().map(|(p, _)| p.clone()).collect();
    let gen_clip: Vec<Vec<f64>> = results.into_iter().map(|(_, c)| c).collect();
    // Each generated image is matched with its own reference.
    let ref_clip: Vec<Vec<f64>> = jobs.iter().map(|(ri, _, _)| ref_feats[*ri].clip.clone()).collect();
    let fid = if n >= 2 { Some(fid(&gen_clip, &ref_clip)?) } else { None };

    Ok(MetricReport {
        clip_t: mean_opt(&pairs.iter().map(|p| p.clip_t).collect::<Vec<_>>()),
        clip_i: Some(mean(pairs.iter().map(|p| p.clip_i), n)),
        dino: Some(mean(pairs.iter().map(|p| p.dino), n)),
        face_sim: Some(mean(pairs.iter().map(|p| p.face_sim), n)),
        fid,
        attr_c: mean_opt(&pairs.iter().map(|p| p.attr_c).collect::<Vec<_>>()),
        vlm_score: mean_opt(&pairs.iter().map(|p| p.vlm_score).collect::<Vec<_>>()),
        n_pairs: n,
        pairs,
    })
}

/// Pretty JSON; absent metrics are written as `null`.
pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
