//! Checkpoints on top of the tensor container.
//!
//! Model sections are `denoiser`, `projector`, `posenet` and `null_tokens`,
//! holding parameters under their full names. Adam moments live in an
//! `optimizer` section as `m/<name>` and `v/<name>`. The JSON meta block
//! carries the run config snapshot and the Adam step.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::container::{Container, Section, VERSION};
use crate::diffusion::FaceMakeUp;
use crate::error::{Error, Result};
use crate::params::{section_of, Adam, AdamConfig, ParamStore};

pub const MODEL_SECTIONS: [&str; 4] = ["denoiser", "projector", "posenet", "null_tokens"];
pub const OPTIMIZER_SECTION: &str = "optimizer";
const KIND: &str = "facemakeup-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: RunConfig,
    adam_step: Option<u64>,
}

pub fn checkpoint_container(
    config: &RunConfig,
    store: &ParamStore,
    adam: Option<&Adam>,
    step: u64,
) -> Result<Container> {
    let mut sections: Vec<Section> = MODEL_SECTIONS.iter().map(|s| Section::new(*s)).collect();
    for (_, name, t) in store.iter() {
        let sec = section_of(name);
        let Some(i) = MODEL_SECTIONS.iter().position(|s| *s == sec) else {
            return Err(Error::Parameter(format!("parameter {name} has no checkpoint section")));
        };
        sections[i].tensors.push((name.to_string(), t.clone()));
    }
    if let Some(a) = adam {
        let mut opt = Section::new(OPTIMIZER_SECTION);
        for (id, name, _) in store.iter() {
            opt.tensors.push((format!("m/{name}"), a.m[id.index()].clone()));
            opt.tensors.push((format!("v/{name}"), a.v[id.index()].clone()));
        }
        sections.push(opt);
    }
    let meta = Meta {
        kind: KIND.into(),
        config: config.clone(),
        adam_step: adam.map(|a| a.step),
    };
    Ok(Container {
        meta: serde_json::to_string(&meta)?,
        step,
        sections,
    })
}

pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    store: &ParamStore,
    adam: Option<&Adam>,
    step: u64,
) -> Result<()> {
    checkpoint_container(config, store, adam, step)?.save(path)
}

/// A checkpoint restored into a freshly built model.
pub struct LoadedCheckpoint {
    pub config: RunConfig,
    pub step: u64,
    pub model: FaceMakeUp,
    pub store: ParamStore,
    pub adam: Option<Adam>,
}

fn parse_meta(c: &Container) -> Result<Meta> {
    let meta: Meta = serde_json::from_str(&c.meta)
        .map_err(|e| Error::Corrupt(format!("checkpoint meta: {e}")))?;
    if meta.kind != KIND {
        return Err(Error::Corrupt(format!("not a checkpoint: kind {:?}", meta.kind)));
    }
    Ok(meta)
}

pub fn restore(c: &Container) -> Result<LoadedCheckpoint> {
    let meta = parse_meta(c)?;
    let (model, mut store) = FaceMakeUp::new(&meta.config.model, meta.config.seed)?;
    let mut seen = 0;
    for sec in MODEL_SECTIONS {
        let s = c
            .section(sec)
            .ok_or_else(|| Error::Corrupt(format!("missing section {sec}")))?;
        for (name, t) in &s.tensors {
            if section_of(name) != sec {
                return Err(Error::Corrupt(format!("{name} stored under section {sec}")));
            }
            store
                .set(name, t.clone())
                .map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
            seen += 1;
        }
    }
    if seen != store.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint holds {seen} parameters, model has {}",
            store.len()
        )));
    }
    let adam = match (c.section(OPTIMIZER_SECTION), meta.adam_step) {
        (Some(opt), Some(step)) => {
            let mut a = Adam::new(
                AdamConfig {
                    lr: meta.config.train.lr,
                    ..AdamConfig::default()
                },
                &store,
            );
            for (id, name, t) in store.iter() {
                let m = opt.get(&format!("m/{name}"));
                let v = opt.get(&format!("v/{name}"));
                match (m, v) {
                    (Some(m), Some(v)) if m.shape() == t.shape() && v.shape() == t.shape() => {
                        a.m[id.index()] = m.clone();
                        a.v[id.index()] = v.clone();
                    }
                    _ => return Err(Error::Corrupt(format!("optimizer state for {name}"))),
                }
            }
            a.step = step;
            Some(a)
        }
        (None, None) => None,
        _ => return Err(Error::Corrupt("optimizer section and meta disagree".into())),
    };
    Ok(LoadedCheckpoint {
        config: meta.config,
        step: c.step,
        model,
        store,
        adam,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    restore(&Container::load(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionSummary {
    pub name: String,
    pub tensors: Vec<(String, Vec<usize>)>,
    pub scalars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub version: u32,
    pub step: u64,
    pub sections: Vec<SectionSummary>,
    /// Scalars across the model sections, optimizer excluded.
    pub model_scalars: usize,
    pub config: RunConfig,
}

impl CheckpointSummary {
    pub fn section(&self, name: &str) -> Option<&SectionSummary> {
        self.sections.iter().find(|s| s.name == name)
    }
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointSummary> {
    let c = Container::load(path)?;
    let meta = parse_meta(&c)?;
    let sections: Vec<SectionSummary> = c
        .sections
        .iter()
        .map(|s| SectionSummary {
            name: s.name.clone(),
            tensors: s.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            scalars: s.num_scalars(),
        })
        .collect();
    let model_scalars = sections
        .iter()
        .filter(|s| MODEL_SECTIONS.contains(&s.name.as_str()))
        .map(|s| s.scalars)
        .sum();
    Ok(CheckpointSummary {
        version: VERSION,
        step: c.step,
        sections,
        model_scalars,
        config: meta.config,
    })
}

impl fmt::Display for CheckpointSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "format version {}", self.version)?;
        writeln!(f, "step {}", self.step)?;
        for s in &self.sections {
            writeln!(f, "[{}] {} tensors, {} scalars", s.name, s.tensors.len(), s.scalars)?;
            for (n, shape) in &s.tensors {
                writeln!(f, "  {n} {shape:?}")?;
            }
        }
        writeln!(f, "model parameters {}", self.model_scalars)?;
        let cfg = toml::to_string(&self.config).map_err(|_| fmt::Error)?;
        writeln!(f, "config:\n{cfg}")
    }
}
