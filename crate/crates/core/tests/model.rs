mod common;

use common::{
    grad_check_training_loss, manual_full_grid, random_batch, random_coords, random_id, rel_err, sample_setup, tiny_config,
};
use facemakeup_core::autograd::Graph;
use facemakeup_core::diffusion::{
    draw_conditioning, sample, training_loss, BranchToggles, ConditioningBundle,
    FaceMakeUp, LossConfig, ModelConfig, SampleOptions,
};
use facemakeup_core::encoders::{IdEmbedding, PatchFeatures, ID_DIM};
use facemakeup_core::error::Error;
use facemakeup_core::image::ImageTensor;
use facemakeup_core::nn::Builder;
use facemakeup_core::params::{Adam, AdamConfig, ParamStore};
use facemakeup_core::pose::{render_pose_map, PoseResiduals};
use facemakeup_core::projector::{mix_identities, FaceTokens, Projector, ProjectorConfig};
use facemakeup_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose_map(side: usize, rng: &mut impl Rng) -> ImageTensor {
    let kp: [[f64; 2]; 5] =
        std::array::from_fn(|_| [rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64)]);
    render_pose_map(&kp, side, side).unwrap()
}

#[test]
fn fresh_branches_are_exact_no_ops() {
    let cfg = ModelConfig::default();
    let (model, store) = FaceMakeUp::new(&cfg, 3).unwrap();
    let d = &cfg.denoiser;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..4 {
        let x = Tensor::randn(d.latent_shape().to_vec(), 1.0, &mut rng);
        let t = rng.random_range(0..d.timesteps);
        let pm = random_pose_map(d.image_side, &mut rng);
        let pose = model.pose_residuals(&store, &x, t, &pm).unwrap();
        assert!(pose.all_zero());
        let cond = ConditioningBundle {
            text: Tensor::randn([5, d.d_ctx], 1.0, &mut rng),
            face: FaceTokens::new(Tensor::randn([d.n_face_tokens, d.d_ctx], 1.0, &mut rng)).unwrap(),
            pose: Some(pose),
            null_face: false,
            null_text: false,
        };
        let on = model.denoise(&store, &x, t, &cond, BranchToggles::default()).unwrap();
        let off = model
            .denoise(&store, &x, t, &cond, BranchToggles { face: false, pose: false })
            .unwrap();
        assert!(on.bit_eq(&off));
        let other = ConditioningBundle {
            face: FaceTokens::new(Tensor::randn([d.n_face_tokens, d.d_ctx], 3.0, &mut rng)).unwrap(),
            ..cond.clone()
        };
        assert!(model.denoise(&store, &x, t, &other, BranchToggles::default()).unwrap().bit_eq(&on));
    }
}

#[test]
fn absent_pose_equals_zero_residuals() {
    let cfg = tiny_config();
    let (model, mut store) = FaceMakeUp::new(&cfg, 2).unwrap();
    store.randomize(0.3, &mut ChaCha8Rng::seed_from_u64(8));
    let d = &cfg.denoiser;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(d.latent_shape().to_vec(), 1.0, &mut rng);
    let mut cond = ConditioningBundle {
        text: Tensor::randn([3, d.d_ctx], 1.0, &mut rng),
        face: model.null_face_tokens(&store),
        pose: None,
        null_face: true,
        null_text: false,
    };
    let a = model.denoise(&store, &x, 4, &cond, BranchToggles::default()).unwrap();
    cond.pose = Some(PoseResiduals::zeros(d));
    let b = model.denoise(&store, &x, 4, &cond, BranchToggles::default()).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn tiny_config_is_under_five_thousand() {
    let (_, store) = FaceMakeUp::new(&tiny_config(), 0).unwrap();
    assert!(store.num_scalars() <= 5000, "{}", store.num_scalars());
    let cfg = tiny_config();
    assert_eq!(store.section_scalars("denoiser"), cfg.denoiser.param_count());
}

#[test]
fn training_loss_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let (model, mut store) = FaceMakeUp::new(&cfg, 4).unwrap();
    store.randomize(0.4, &mut ChaCha8Rng::seed_from_u64(6));
    let batch = random_batch(&cfg, 3, 7);
    let schedule = model.schedule().unwrap();
    let loss_cfg = LossConfig {
        dropout_face: 0.5,
        dropout_text: 0.3,
    };
    let coords = random_coords(&store, 60, 12);
    let r = grad_check_training_loss(&model, &store, &batch, &schedule, &loss_cfg, &coords, 1e-5);
    assert!(r.max_rel <= 1e-4, "{} ({})", r.max_rel, r.worst);
    assert!(r.checked >= 40, "only {} of 60 above floor", r.checked);
}

#[test]
fn denoiser_gradients_at_desk_width() {
    // 8x8 latent, base width 16.
    let mut cfg = ModelConfig::default();
    cfg.denoiser.base_width = 16;
    cfg.denoiser.timesteps = 20;
    let (model, mut store) = FaceMakeUp::new(&cfg, 5).unwrap();
    store.randomize(0.1, &mut ChaCha8Rng::seed_from_u64(2));
    let batch = random_batch(&cfg, 1, 3);
    let schedule = model.schedule().unwrap();
    let coords = random_coords(&store, 25, 4);
    let r = grad_check_training_loss(&model, &store, &batch, &schedule, &LossConfig::default(), &coords, 1e-5);
    assert!(r.max_rel <= 1e-4, "{} ({})", r.max_rel, r.worst);
    assert!(r.checked >= 15, "only {} of 25 above floor", r.checked);
}

#[test]
fn empty_batch_rejected() {
    let cfg = tiny_config();
    let (model, store) = FaceMakeUp::new(&cfg, 0).unwrap();
    let s = model.schedule().unwrap();
    let r = training_loss(&model, &store, &[], &s, &LossConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::Parameter(_))));
}

#[test]
fn dropout_endpoints_and_rate() {
    let shape = [2, 4, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let all = draw_conditioning(200, &shape, 10, &LossConfig { dropout_face: 1.0, dropout_text: 0.0 }, &mut rng).unwrap();
    assert!(all.iter().all(|d| d.drop_face && !d.drop_text));
    let none = draw_conditioning(200, &shape, 10, &LossConfig { dropout_face: 0.0, dropout_text: 0.0 }, &mut rng).unwrap();
    assert!(none.iter().all(|d| !d.drop_face));
    let half = draw_conditioning(10_000, &shape, 10, &LossConfig::default(), &mut rng).unwrap();
    let frac = half.iter().filter(|d| d.drop_face).count() as f64 / 1e4;
    assert!((0.48..=0.52).contains(&frac), "{frac}");
}

#[test]
fn full_dropout_trains_only_the_null_block() {
    let cfg = tiny_config();
    let (model, mut store) = FaceMakeUp::new(&cfg, 1).unwrap();
    store.randomize(0.3, &mut ChaCha8Rng::seed_from_u64(1));
    let batch = random_batch(&cfg, 2, 1);
    let s = model.schedule().unwrap();
    let lc = LossConfig { dropout_face: 1.0, dropout_text: 0.0 };
    let out = training_loss(&model, &store, &batch, &s, &lc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(out.null_face_fraction(), 1.0);
    for (id, name, _) in store.iter() {
        let g = out.grads.get(id).map_or(0.0, Tensor::max_abs);
        if name.starts_with("projector.") {
            assert_eq!(g, 0.0, "{name}");
        }
        if name == "null_tokens.face" {
            assert!(g > 0.0);
        }
    }
}

#[test]
fn oracle_predictor_gives_zero_loss() {
    let cfg = tiny_config();
    let (model, store) = FaceMakeUp::new(&cfg, 1).unwrap();
    let batch = random_batch(&cfg, 2, 9);
    let s = model.schedule().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = facemakeup_core::diffusion::training_loss_with(&store, &batch, &s, &LossConfig::default(), &mut rng, |g, _, d, _| {
        Ok(g.constant(d.eps.clone()))
    })
    .unwrap();
    assert_eq!(out.loss, 0.0);
}

#[test]
fn one_step_engages_pose_residuals() {
    let cfg = tiny_config();
    let (model, mut store) = FaceMakeUp::new(&cfg, 1).unwrap();
    let batch = random_batch(&cfg, 2, 2);
    let s = model.schedule().unwrap();
    let out = training_loss(&model, &store, &batch, &s, &LossConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), &store);
    adam.step(&mut store, &out.grads);
    let d = &cfg.denoiser;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(d.latent_shape().to_vec(), 1.0, &mut rng);
    let r = model.pose_residuals(&store, &x, 5, &random_pose_map(d.image_side, &mut rng)).unwrap();
    assert!(r.max_abs() > 0.0);
}

#[test]
fn full_grid_sampler_matches_manual_loop() {
    let (model, store, cond) = sample_setup(10);
    let s = model.schedule().unwrap();
    let opts = SampleOptions {
        steps: 10,
        guidance: 7.5,
        seed: 77,
        clip: None,
        use_pose: true,
    };
    let out = sample(&model, &store, &s, &cond, &opts).unwrap();
    assert_eq!(out.timesteps, (0..10).rev().collect::<Vec<_>>());

    let x = manual_full_grid(&model, &store, &s, &cond, 7.5, 77);
    assert!(out.latent.max_abs_diff(&x) <= 1e-6);
}

#[test]
fn sampler_is_deterministic_and_skips_uncond_at_unit_guidance() {
    let (model, store, cond) = sample_setup(20);
    let s = model.schedule().unwrap();
    let opts = SampleOptions {
        steps: 5,
        guidance: 1.0,
        seed: 3,
        ..SampleOptions::default()
    };
    let a = sample(&model, &store, &s, &cond, &opts).unwrap();
    assert_eq!(a.uncond_evals, 0);
    assert_eq!(a.cond_evals, 5);
    let mut other = cond.clone();
    other.null_text = Tensor::full([1, model.config.denoiser.d_ctx], 9.0);
    let b = sample(&model, &store, &s, &other, &opts).unwrap();
    assert!(a.latent.bit_eq(&b.latent));
    let guided = SampleOptions { guidance: 7.5, ..opts };
    let c1 = sample(&model, &store, &s, &cond, &guided).unwrap();
    let c2 = sample(&model, &store, &s, &cond, &guided).unwrap();
    assert!(c1.latent.bit_eq(&c2.latent));
    assert_eq!(c1.uncond_evals, 5);
    let too_many = SampleOptions { steps: 11, ..opts };
    assert!(sample(&model, &store, &s, &cond, &too_many).is_err());
}

// Projector oracles.

fn projector(cfg: &ProjectorConfig, d_vis: usize, d_ctx: usize, seed: u64) -> (ParamStore, Projector) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Projector::new(&mut Builder::new(&mut store, &mut rng, "projector"), cfg, d_vis, d_ctx).unwrap();
    (store, p)
}

fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    (0..cols)
        .map(|j| {
            let s: f64 = (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum();
            s + b.map_or(0.0, |b| b.data()[j])
        })
        .collect()
}

#[test]
fn single_patch_projector_matches_hand_forward() {
    let cfg = ProjectorConfig {
        n_tokens: 3,
        d_attn: 8,
        heads: 2,
        depth: 1,
        ff_mult: 2,
    };
    let (store, p) = projector(&cfg, 6, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let id = random_id(&mut rng);
    let patch = Tensor::randn([1, 6], 1.0, &mut rng);
    let got = p.project(&store, &id, &PatchFeatures::new(patch.clone()).unwrap()).unwrap();

    let w = |n: &str| store.get(store.id(&format!("projector.layers0.{n}")).unwrap());
    let v = affine(patch.data(), w("to_v.weight"), None);
    let y = affine(&v, w("to_out.weight"), Some(w("to_out.bias")));
    let up = affine(&y, w("ff.up.weight"), Some(w("ff.up.bias")));
    let act: Vec<f64> = up.iter().map(|&a| a / (1.0 + (-a).exp())).collect();
    let down = affine(&act, w("ff.down.weight"), Some(w("ff.down.bias")));
    let token: Vec<f64> = y.iter().zip(&down).map(|(a, b)| a + b).collect();
    assert_eq!(got.tokens.shape(), [3, 5]);
    for r in 0..3 {
        for (a, b) in got.tokens.row(r).iter().zip(&token) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn projector_ignores_patch_order() {
    let cfg = ProjectorConfig::default();
    let (store, p) = projector(&cfg, 32, 32, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let id = random_id(&mut rng);
    let patches = Tensor::randn([16, 32], 1.0, &mut rng);
    let a = p.project(&store, &id, &PatchFeatures::new(patches.clone()).unwrap()).unwrap();
    let mut rows: Vec<Vec<f64>> = (0..16).map(|r| patches.row(r).to_vec()).collect();
    rows.reverse();
    rows.swap(2, 9);
    let permuted = Tensor::new([16, 32], rows.concat()).unwrap();
    let b = p.project(&store, &id, &PatchFeatures::new(permuted).unwrap()).unwrap();
    assert!(a.tokens.max_abs_diff(&b.tokens) <= 1e-12);
    assert_eq!(a.width(), 32);
}

#[test]
fn projector_output_shape_at_full_width() {
    let cfg = ProjectorConfig {
        n_tokens: 4,
        d_attn: 16,
        heads: 4,
        depth: 1,
        ff_mult: 1,
    };
    let (store, p) = projector(&cfg, 8, 768, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let out = p
        .project(&store, &random_id(&mut rng), &PatchFeatures::new(Tensor::randn([2, 8], 1.0, &mut rng)).unwrap())
        .unwrap();
    assert_eq!(out.tokens.shape(), [4, 768]);
    let wrong = PatchFeatures::new(Tensor::randn([2, 9], 1.0, &mut rng)).unwrap();
    assert!(matches!(p.project(&store, &random_id(&mut rng), &wrong), Err(Error::Dimension(_))));
}

#[test]
fn projector_gradients_every_weight() {
    let cfg = ProjectorConfig {
        n_tokens: 2,
        d_attn: 8,
        heads: 2,
        depth: 1,
        ff_mult: 2,
    };
    let (store, p) = projector(&cfg, 8, 8, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let id = random_id(&mut rng).to_tensor();
    let patches = Tensor::randn([3, 8], 1.0, &mut rng);
    let probe = Tensor::randn([2, 8], 1.0, &mut rng);
    let loss = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let (i, q) = (g.constant(id.clone()), g.constant(patches.clone()));
        let out = p.forward(&mut g, i, q).unwrap();
        let w = g.constant(probe.clone());
        let m = g.mul(out, w).unwrap();
        let l = g.sum(m);
        (g.value(l).data()[0], g.backward(l))
    };
    let (_, grads) = loss(&store);
    let mut s = store.clone();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in store.ids() {
        for i in 0..store.get(id).len() {
            let orig = s.get(id).data()[i];
            s.get_mut(id).data_mut()[i] = orig + h;
            let lp = loss(&s).0;
            s.get_mut(id).data_mut()[i] = orig - h;
            let lm = loss(&s).0;
            s.get_mut(id).data_mut()[i] = orig;
            let r = rel_err(grads.entry(id, i), (lp - lm) / (2.0 * h));
            assert!(r <= 1e-4, "{}[{i}] rel {r}", store.name(id));
            worst = worst.max(r);
        }
    }
    assert!(worst <= 1e-4);
}

#[test]
fn identity_mixing() {
    let mut a = vec![0.0; ID_DIM];
    let mut b = vec![0.0; ID_DIM];
    a[0] = 1.0;
    b[1] = 1.0;
    let (ea, eb) = (IdEmbedding::from_raw(a.clone()).unwrap(), IdEmbedding::from_raw(b).unwrap());
    let m = mix_identities(&ea, &eb, 0.5).unwrap();
    let inv = 1.0 / 2f64.sqrt();
    assert!((m.as_slice()[0] - inv).abs() < 1e-15);
    assert!((m.as_slice()[1] - inv).abs() < 1e-15);
    assert!(m.as_slice()[2..].iter().all(|&v| v == 0.0));
    assert_eq!(mix_identities(&ea, &eb, 1.0).unwrap(), ea);
    assert_eq!(mix_identities(&ea, &eb, 0.0).unwrap(), eb);
    let anti = IdEmbedding::from_raw(a.iter().map(|v| -v).collect()).unwrap();
    assert!(matches!(mix_identities(&ea, &anti, 0.5), Err(Error::Degenerate(_))));
    assert!(mix_identities(&ea, &eb, 1.5).is_err());
}
