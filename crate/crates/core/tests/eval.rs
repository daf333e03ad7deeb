use std::path::Path;

use facemakeup_core::encoders::{write_face_sidecar, EncoderConfig, EncoderSet, StubVision};
use facemakeup_core::error::Error;
use facemakeup_core::eval::{
    cosine_sim_metric, evaluate_run, expand_prompts, fid, generated_name, write_report, EvalBackends, MetricReport,
    SidecarAttributes, ATTRIBUTES,
};
use facemakeup_core::harness::synthetic_face;
use facemakeup_core::encoders::sidecar_path;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

#[test]
fn fid_of_identical_sets_vanishes() {
    let a = gaussian_rows(200, 8, 1);
    assert!(fid(&a, &a).unwrap() <= 1e-8);
}

#[test]
fn fid_one_dimensional_closed_form() {
    let h = 1.0 / 2f64.sqrt();
    let a = vec![vec![h], vec![-h]];
    let r = 2f64.sqrt();
    let b = vec![vec![1.0 + r], vec![1.0 - r]];
    // Means 0 and 1, unbiased variances 1 and 4: 1 + 1 + 4 - 2*2.
    assert!((fid(&a, &b).unwrap() - 2.0).abs() <= 1e-9);
}

#[test]
fn fid_is_symmetric_and_shift_sensitive() {
    let a = gaussian_rows(100, 6, 2);
    let b: Vec<Vec<f64>> = gaussian_rows(100, 6, 3).into_iter().map(|r| r.iter().map(|v| 1.5 * v).collect()).collect();
    let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
    assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
    let shifted: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v + 2.0).collect()).collect();
    // Pure translation: squared mean shift only.
    assert!((fid(&a, &shifted).unwrap() - 6.0 * 4.0).abs() <= 1e-8);
}

#[test]
fn cosine_self_similarity_is_exactly_100() {
    let rows = gaussian_rows(20, 33, 4);
    for r in &rows {
        assert_eq!(cosine_sim_metric(r, r).unwrap(), 100.0);
    }
}

struct Run {
    _dir: tempfile::TempDir,
    gen: std::path::PathBuf,
    refs: std::path::PathBuf,
}

/// Two references, and for each prompt a copy of its own reference as the
/// generated image.
fn self_eval_run(n_prompts: usize, attrs: &[&[usize]]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let (gen, refs) = (dir.path().join("gen"), dir.path().join("refs"));
    std::fs::create_dir_all(&gen).unwrap();
    std::fs::create_dir_all(&refs).unwrap();
    let mut k = 0;
    for i in 0..2 {
        let s = synthetic_face(5, i, 64).unwrap();
        let stem = format!("ref{i}");
        let rp = refs.join(format!("{stem}.png"));
        s.image.save_png(&rp).unwrap();
        write_face_sidecar(&rp, &[s.face]).unwrap();
        for p in 0..n_prompts {
            let gp = gen.join(generated_name(&stem, p));
            s.image.save_png(&gp).unwrap();
            write_face_sidecar(&gp, &[s.face]).unwrap();
            if let Some(on) = attrs.get(k) {
                let scores: Vec<f64> = (0..ATTRIBUTES.len()).map(|a| if on.contains(&a) { 0.9 } else { 0.1 }).collect();
                std::fs::write(sidecar_path(&gp, "attrs.json"), serde_json::to_string(&scores).unwrap()).unwrap();
            }
            k += 1;
        }
    }
    Run { _dir: dir, gen, refs }
}

fn backends(encoders: &EncoderSet, attributes: bool) -> EvalBackends<'_> {
    EvalBackends {
        encoders,
        dino: Box::new(StubVision::with_stream(0, "eval.dino", 16, 32).unwrap()),
        attributes: attributes.then(|| Box::new(SidecarAttributes) as _),
        vlm: None,
        expansion_factor: 1.5,
        face_score_min: 0.5,
    }
}

fn prompts(n: usize) -> facemakeup_core::eval::PromptSet {
    let t = ["a <class word> in a garden.", "a <class word> on a beach.", "a <class word> reading a book."];
    expand_prompts("person", &t[..n]).unwrap()
}

#[test]
fn self_evaluation() {
    let run = self_eval_run(3, &[]);
    let enc = EncoderSet::from_config(&EncoderConfig::default(), 0).unwrap();
    let r = evaluate_run(&run.gen, &run.refs, &prompts(3), &backends(&enc, false)).unwrap();
    assert_eq!(r.n_pairs, 6);
    assert_eq!(r.clip_i, Some(100.0));
    assert_eq!(r.dino, Some(100.0));
    assert_eq!(r.face_sim, Some(100.0));
    assert!(r.fid.unwrap() <= 1e-6, "{:?}", r.fid);
    assert!(r.clip_t.is_some());
    assert_eq!(r.attr_c, None);
    assert_eq!(r.vlm_score, None);
    assert_eq!(r.pairs[4].generated, "ref1_1.png");
    assert_eq!(r.pairs[4].prompt, "a person on a beach.");
}

#[test]
fn missing_pair_is_a_protocol_error() {
    let run = self_eval_run(3, &[]);
    std::fs::remove_file(run.gen.join("ref0_2.png")).unwrap();
    let enc = EncoderSet::from_config(&EncoderConfig::default(), 0).unwrap();
    match evaluate_run(&run.gen, &run.refs, &prompts(3), &backends(&enc, false)) {
        Err(Error::Protocol { missing }) => assert_eq!(missing, ["ref0_2.png"]),
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn aggregates_are_pair_means_and_attr_average() {
    // Pairs switch on 3, 0, 5, 1 attributes: mean 9/4.
    let run = self_eval_run(2, &[&[0, 1, 2], &[], &[3, 4, 5, 6, 7], &[39]]);
    let mut enc = EncoderSet::from_config(&EncoderConfig::default(), 0).unwrap();
    enc.vision = Box::new(StubVision::with_stream(9, "other", 16, 32).unwrap());
    let r = evaluate_run(&run.gen, &run.refs, &prompts(2), &backends(&enc, true)).unwrap();
    assert_eq!(r.attr_c, Some(2.25));
    let mean = |f: fn(&facemakeup_core::eval::PairMetrics) -> f64| r.pairs.iter().map(f).sum::<f64>() / 4.0;
    assert_eq!(r.clip_i.unwrap(), mean(|p| p.clip_i));
    assert_eq!(r.clip_t.unwrap(), mean(|p| p.clip_t.unwrap()));
    assert_eq!(
        r.pairs.iter().map(|p| p.attr_c.unwrap()).collect::<Vec<_>>(),
        [3.0, 0.0, 5.0, 1.0]
    );
}

#[test]
fn report_round_trips_with_nulls() {
    let run = self_eval_run(2, &[]);
    let enc = EncoderSet::from_config(&EncoderConfig::default(), 0).unwrap();
    let r = evaluate_run(&run.gen, &run.refs, &prompts(2), &backends(&enc, false)).unwrap();
    let path = run.gen.join("report.json");
    write_report(&path, &r).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"attr_c\": null"));
    let back: MetricReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
    assert!(Path::new(&path).is_file());
}
