#![allow(dead_code)]

use facemakeup_core::diffusion::{
    training_loss, DenoiserConfig, FaceMakeUp, LossConfig, ModelConfig, NoiseSchedule, TrainingSample,
};
use facemakeup_core::encoders::{IdEmbedding, PatchFeatures, ID_DIM};
use facemakeup_core::params::{ParamId, ParamStore};
use facemakeup_core::projector::ProjectorConfig;
use facemakeup_core::tensor::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough for exhaustive finite differences (under 5k scalars).
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        denoiser: DenoiserConfig {
            latent_channels: 2,
            latent_side: 4,
            base_width: 2,
            level_mults: vec![1, 2],
            attn_levels: vec![1],
            heads: 1,
            groups: 1,
            d_ctx: 4,
            n_face_tokens: 1,
            timesteps: 10,
            beta_start: 0.01,
            beta_end: 0.2,
            pose_embed_width: 2,
            image_side: 8,
        },
        projector: ProjectorConfig {
            n_tokens: 1,
            d_attn: 2,
            heads: 1,
            depth: 1,
            ff_mult: 1,
        },
        d_vis: 3,
    }
}

pub fn random_id(rng: &mut impl Rng) -> IdEmbedding {
    IdEmbedding::from_raw(Tensor::randn([ID_DIM], 1.0, rng).into_data()).unwrap()
}

pub fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<TrainingSample> {
    let d = &cfg.denoiser;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TrainingSample {
            latent: Tensor::randn(d.latent_shape().to_vec(), 0.5, &mut rng),
            text: Tensor::randn([2 + i % 3, d.d_ctx], 1.0, &mut rng),
            null_text: Tensor::randn([1, d.d_ctx], 1.0, &mut rng),
            id: random_id(&mut rng),
            patches: PatchFeatures::new(Tensor::randn([3, cfg.d_vis], 1.0, &mut rng)).unwrap(),
            pose_map: Tensor::randn([3, d.image_side, d.image_side], 0.7, &mut rng),
        })
        .collect()
}

/// Relative error `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let d = a.abs().max(n.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - n).abs() / d
    }
}

pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose gradient sat below the floor on both sides.
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Gradient magnitude under which central differences are dominated by
/// roundoff of the O(1) loss.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compare the analytic gradient of `training_loss` with central
/// differences at `coords`. The loss RNG is reseeded per evaluation so every
/// evaluation sees the same draws. Coordinates with both gradients under
/// `GRAD_FLOOR` are counted in `skipped` instead of compared.
pub fn grad_check_training_loss(
    model: &FaceMakeUp,
    store: &ParamStore,
    batch: &[TrainingSample],
    schedule: &NoiseSchedule,
    loss_cfg: &LossConfig,
    coords: &[(ParamId, usize)],
    h: f64,
) -> GradCheck {
    let loss_at = |s: &ParamStore| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        training_loss(model, s, batch, schedule, loss_cfg, &mut rng).unwrap()
    };
    let base = loss_at(store);
    let mut out = GradCheck {
        checked: 0,
        skipped: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let mut s = store.clone();
    for &(id, i) in coords {
        let orig = s.get(id).data()[i];
        s.get_mut(id).data_mut()[i] = orig + h;
        let lp = loss_at(&s).loss;
        s.get_mut(id).data_mut()[i] = orig - h;
        let lm = loss_at(&s).loss;
        s.get_mut(id).data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = base.grads.entry(id, i);
        if analytic.abs() < GRAD_FLOOR && numeric.abs() < GRAD_FLOOR {
            out.skipped += 1;
            continue;
        }
        let r = rel_err(analytic, numeric);
        out.checked += 1;
        if r > out.max_rel {
            out.max_rel = r;
            out.worst = format!("{}[{i}] analytic {analytic:e} numeric {numeric:e}", s.name(id));
        }
    }
    out
}

/// `count` distinct random `(tensor, index)` coordinates, spread over as many
/// tensors as `count` allows.
pub fn random_coords(store: &ParamStore, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<ParamId> = store.ids().collect();
    ids.shuffle(&mut rng);
    let mut coords = Vec::new();
    for &id in ids.iter().take(count) {
        coords.push((id, rng.random_range(0..store.get(id).len())));
    }
    while coords.len() < count {
        let id = *ids.choose(&mut rng).unwrap();
        let c = (id, rng.random_range(0..store.get(id).len()));
        if !coords.contains(&c) {
            coords.push(c);
        }
    }
    coords
}

/// Hand-labelled curation fixture. Entries and their intended fate:
///
/// | entry | size | setup | outcome |
/// |---|---|---|---|
/// | e0 | 400x400 | manifest face (80,60,40,60) | pass, crop (70,60,60) |
/// | e1 | 128x128 | r = g = b | grayscale |
/// | e2 | 128x128 | ocr box covering 20% | text |
/// | e3 | 128x128 | faces at 0.9 and 0.8 | multi_face |
/// | e4 | 128x128 | one face at 0.3 | multi_face (none confident) |
/// | e5 | 128x128 | cartoon label | cartoon |
/// | e6 | 128x96 | face (10,20,40,40), no style label | pass, crop (0,10,60) |
/// | e7 | 40x40 | smallest | resolution (top 90%) |
/// | e8 | missing | | io_error |
/// | e9 | 160x120 | face (130,30,28,40), two identical 4% ocr boxes | pass, crop (118,29,42) |
pub struct CurationFixture {
    pub dir: tempfile::TempDir,
    pub entries: Vec<facemakeup_core::datapipe::ManifestEntry>,
    pub config: facemakeup_core::datapipe::PipelineConfig,
}

pub const FIXTURE_PASS: [(&str, (usize, usize, usize)); 3] =
    [("e0.png", (70, 60, 60)), ("e6.png", (0, 10, 60)), ("e9.png", (118, 29, 42))];

pub fn fixture_face(x: f64, y: f64, w: f64, h: f64, score: f64) -> facemakeup_core::encoders::FaceBox {
    let kp = |fx: f64, fy: f64| [x + fx * w, y + fy * h];
    facemakeup_core::encoders::FaceBox {
        x,
        y,
        w,
        h,
        score,
        keypoints: [kp(0.3, 0.4), kp(0.7, 0.4), kp(0.5, 0.6), kp(0.35, 0.8), kp(0.65, 0.8)],
    }
}

fn color_noise(h: usize, w: usize, seed: u64, gray: bool) -> facemakeup_core::image::ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(h * w * 3);
    for _ in 0..h * w {
        if gray {
            let v = rng.random_range(-1.0..1.0);
            data.extend_from_slice(&[v, v, v]);
        } else {
            for _ in 0..3 {
                data.push(rng.random_range(-1.0..1.0));
            }
        }
    }
    facemakeup_core::image::ImageTensor::new(h, w, data).unwrap()
}

pub fn curation_fixture() -> CurationFixture {
    use facemakeup_core::datapipe::{ManifestEntry, PipelineConfig, TextBox};
    use facemakeup_core::encoders::{sidecar_path, write_face_sidecar};

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut entries = Vec::new();
    fn add(entries: &mut Vec<ManifestEntry>, root: &std::path::Path, name: &str, h: usize, w: usize, gray: bool) -> std::path::PathBuf {
        let p = root.join(name);
        color_noise(h, w, entries.len() as u64, gray).save_png(&p).unwrap();
        entries.push(ManifestEntry::new(name, format!("a photo of {name}")));
        p
    }
    let ocr = |p: &std::path::Path, boxes: &[TextBox]| {
        std::fs::write(sidecar_path(p, "ocr.json"), serde_json::to_string(boxes).unwrap()).unwrap()
    };
    let style = |p: &std::path::Path, label: &str| {
        std::fs::write(sidecar_path(p, "style.json"), format!("{{\"label\": \"{label}\"}}")).unwrap()
    };
    let one = fixture_face(40.0, 30.0, 40.0, 50.0, 0.9);

    let p = add(&mut entries, root, "e0.png", 400, 400, false);
    let f0 = fixture_face(80.0, 60.0, 40.0, 60.0, 0.9);
    write_face_sidecar(&p, &[f0]).unwrap();
    style(&p, "photo");
    let p = add(&mut entries, root, "e1.png", 128, 128, true);
    write_face_sidecar(&p, &[one]).unwrap();
    let p = add(&mut entries, root, "e2.png", 128, 128, false);
    write_face_sidecar(&p, &[one]).unwrap();
    ocr(&p, &[TextBox { x: 0, y: 0, w: 128, h: 26 }]);
    let p = add(&mut entries, root, "e3.png", 128, 128, false);
    write_face_sidecar(&p, &[one, fixture_face(10.0, 10.0, 20.0, 20.0, 0.8)]).unwrap();
    let p = add(&mut entries, root, "e4.png", 128, 128, false);
    write_face_sidecar(&p, &[fixture_face(40.0, 30.0, 40.0, 50.0, 0.3)]).unwrap();
    let p = add(&mut entries, root, "e5.png", 128, 128, false);
    write_face_sidecar(&p, &[one]).unwrap();
    style(&p, "cartoon");
    let p = add(&mut entries, root, "e6.png", 96, 128, false);
    write_face_sidecar(&p, &[fixture_face(10.0, 20.0, 40.0, 40.0, 0.95)]).unwrap();
    let p = add(&mut entries, root, "e7.png", 40, 40, false);
    write_face_sidecar(&p, &[fixture_face(5.0, 5.0, 20.0, 20.0, 0.9)]).unwrap();
    entries.push(ManifestEntry::new("e8.png", "a photo of e8.png"));
    let p = add(&mut entries, root, "e9.png", 120, 160, false);
    write_face_sidecar(&p, &[fixture_face(130.0, 30.0, 28.0, 40.0, 0.99)]).unwrap();
    ocr(&p, &[TextBox { x: 0, y: 0, w: 32, h: 24 }, TextBox { x: 0, y: 0, w: 32, h: 24 }]);
    style(&p, "photo");

    entries[0].face = Some(f0);
    let config = PipelineConfig {
        top_fraction_by_resolution: 0.9,
        ..PipelineConfig::default()
    };
    CurationFixture { dir, entries, config }
}

/// A run configuration small enough for end-to-end harness tests.
pub fn small_run_config(seed: u64) -> facemakeup_core::harness::RunConfig {
    let mut cfg = facemakeup_core::harness::RunConfig::new(seed);
    let d = &mut cfg.model.denoiser;
    d.base_width = 8;
    d.level_mults = vec![1, 2];
    d.attn_levels = vec![1];
    d.heads = 1;
    d.groups = 2;
    d.timesteps = 100;
    cfg.model.projector.d_attn = 16;
    cfg.model.projector.heads = 2;
    cfg.train.steps = 4;
    cfg.train.batch = 4;
    cfg.train.checkpoint_every = 2;
    cfg.inference.steps = 5;
    cfg
}

/// DDIM with guidance written out step by step over the full grid
/// `T-1, ..., 0`, as the reference for `sample(steps = T)`.
pub fn manual_full_grid(
    model: &FaceMakeUp,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cond: &facemakeup_core::diffusion::SampleConditioning,
    guidance: f64,
    seed: u64,
) -> Tensor {
    use facemakeup_core::diffusion::{cfg_combine, ddim_step, BranchToggles, ConditioningBundle};
    let shape = model.config.denoiser.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(facemakeup_core::hash::derive_seed(seed, "sample.noise"));
    let mut x = Tensor::randn(shape.to_vec(), 1.0, &mut rng);
    let null_face = model.null_face_tokens(store);
    for t in (0..schedule.len()).rev() {
        let pose = cond.pose_map.as_ref().map(|pm| model.pose_residuals(store, &x, t, pm).unwrap());
        let c = ConditioningBundle {
            text: cond.text.clone(),
            face: cond.face.clone(),
            pose: pose.clone(),
            null_face: false,
            null_text: false,
        };
        let u = ConditioningBundle {
            text: cond.null_text.clone(),
            face: null_face.clone(),
            pose,
            null_face: true,
            null_text: true,
        };
        let ec = model.denoise(store, &x, t, &c, BranchToggles::default()).unwrap();
        let eu = model.denoise(store, &x, t, &u, BranchToggles::default()).unwrap();
        let e = cfg_combine(&eu, &ec, guidance).unwrap();
        x = ddim_step(&x, &e, t, t.checked_sub(1), schedule, None).unwrap();
    }
    x
}

/// Tiny randomly weighted model with random conditioning for sampler tests.
pub fn sample_setup(seed: u64) -> (FaceMakeUp, ParamStore, facemakeup_core::diffusion::SampleConditioning) {
    use facemakeup_core::projector::FaceTokens;
    let cfg = tiny_config();
    let (model, mut store) = FaceMakeUp::new(&cfg, seed).unwrap();
    store.randomize(0.3, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let d = &cfg.denoiser;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let kp: [[f64; 2]; 5] = std::array::from_fn(|i| [1.0 + i as f64, 6.0 - i as f64]);
    let cond = facemakeup_core::diffusion::SampleConditioning {
        text: Tensor::randn([3, d.d_ctx], 1.0, &mut rng),
        null_text: Tensor::randn([1, d.d_ctx], 1.0, &mut rng),
        face: FaceTokens::new(Tensor::randn([d.n_face_tokens, d.d_ctx], 1.0, &mut rng)).unwrap(),
        pose_map: Some(facemakeup_core::pose::render_pose_map(&kp, d.image_side, d.image_side).unwrap()),
    };
    (model, store, cond)
}
