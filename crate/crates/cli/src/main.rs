use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use facemakeup_core::datapipe::{read_manifest, run_pipeline, write_manifest, CurationBackends};
use facemakeup_core::encoders::{EncoderSet, StubVision};
use facemakeup_core::eval::{
    default_prompts, evaluate_run, expand_prompts, parse_prompt_file, write_report, EvalBackends,
    SidecarAttributes,
};
use facemakeup_core::harness::{
    generate, generate_synthetic_dataset, inspect_checkpoint, prepare_samples, train,
    GenerateRequest, RunConfig, TrainOptions, SEED_ENV,
};

#[derive(Parser)]
#[command(name = "facemakeup", version, about = "Face-conditioned diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the curation filters over a manifest.
    Curate {
        #[arg(long = "in", visible_alias = "manifest")]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate every filter instead of stopping at the first failure.
        #[arg(long)]
        audit: bool,
    },
    /// Write a synthetic face dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Train from a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Single worker thread.
        #[arg(long)]
        deterministic: bool,
    },
    /// Generate one image from a reference face and a prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the environment override, then the checkpoint seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_pose: bool,
        /// Second reference whose identity is mixed in.
        #[arg(long, requires = "alpha")]
        mix: Option<PathBuf>,
        #[arg(long, requires = "mix")]
        alpha: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Score generated images against references.
    Evaluate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        references: PathBuf,
        /// Template file; defaults to the built-in 20 templates.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "person")]
        class_word: String,
        /// Read `<image>.attrs.json` sidecars for the attribute count.
        #[arg(long)]
        attributes: bool,
    },
    /// Print a checkpoint summary.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_or_default(config: Option<&Path>) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => {
            let mut c = RunConfig::new(0);
            c.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
            Ok(c)
        }
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Curate {
            manifest,
            out,
            config,
            audit,
        } => {
            let cfg = load_or_default(config.as_deref())?;
            let entries = read_manifest(&manifest)?;
            let result = run_pipeline(
                &cfg.pipeline,
                &entries,
                &CurationBackends::default(),
                &parent_dir(&manifest),
                audit,
            )?;
            let passed = result.iter().filter(|e| e.passed()).count();
            write_manifest(&out, &result)?;
            println!("{passed}/{} entries passed", result.len());
        }
        Command::Synth { out, n, seed, side } => {
            let entries = generate_synthetic_dataset(&out, n, seed, side)?;
            println!("wrote {} samples to {}", entries.len(), out.display());
        }
        Command::Train {
            config,
            manifest,
            out,
            resume,
            deterministic,
        } => {
            let cfg = RunConfig::load(&config)?;
            let encoders = EncoderSet::from_config(&cfg.encoders, cfg.seed)?;
            let entries = read_manifest(&manifest)?;
            let samples = prepare_samples(&cfg, &entries, &parent_dir(&manifest), &encoders)?;
            log::info!("{} of {} manifest entries usable", samples.len(), entries.len());
            let opts = TrainOptions {
                out_dir: Some(out),
                resume,
                deterministic,
            };
            let report = train(&cfg, &samples, &opts)?;
            if let Some(last) = report.log.last() {
                println!("step {} loss {:.6}", last.step, last.loss);
            }
            for c in &report.checkpoints {
                println!("checkpoint {}", c.display());
            }
        }
        Command::Generate {
            checkpoint,
            reference,
            prompt,
            out,
            seed,
            no_pose,
            mix,
            alpha,
            steps,
            guidance,
        } => {
            let summary = inspect_checkpoint(&checkpoint)?;
            let mut base = summary.config;
            base.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
            let mut inference = base.inference.clone();
            if let Some(s) = steps {
                inference.steps = s;
            }
            if let Some(g) = guidance {
                inference.guidance = g;
            }
            let req = GenerateRequest {
                reference,
                prompt,
                seed: seed.unwrap_or(base.seed),
                use_pose: !no_pose,
                mix: mix.zip(alpha),
                inference: Some(inference),
            };
            generate(&checkpoint, &req, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            gen,
            references,
            prompts,
            report,
            config,
            class_word,
            attributes,
        } => {
            let cfg = load_or_default(config.as_deref())?;
            let set = match prompts {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    expand_prompts(&class_word, &parse_prompt_file(&text))?
                }
                None => default_prompts(&class_word),
            };
            if set.is_empty() {
                bail!("prompt set is empty");
            }
            let encoders = EncoderSet::from_config(&cfg.encoders, cfg.seed)?;
            let backends = EvalBackends {
                encoders: &encoders,
                dino: Box::new(StubVision::with_stream(
                    cfg.seed,
                    "eval.dino",
                    cfg.encoders.patch_size,
                    cfg.encoders.d_vis,
                )?),
                attributes: attributes.then(|| Box::new(SidecarAttributes) as _),
                vlm: None,
                expansion_factor: cfg.pipeline.expansion_factor,
                face_score_min: cfg.pipeline.face_score_min,
            };
            let r = evaluate_run(&gen, &references, &set, &backends)?;
            write_report(&report, &r)?;
            println!("{} pairs scored, report at {}", r.n_pairs, report.display());
        }
        Command::Inspect { checkpoint } => {
            print!("{}", inspect_checkpoint(&checkpoint)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
