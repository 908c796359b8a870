//! Checkpoint directories.
//!
//! `manifest.toml` records the format version, precision, lifecycle stage,
//! seed, backbone hyper-parameters, decoder heads, one `[[params]]` entry per
//! tensor (name, shape, byte offset) and one `[tasks.NAME]` table per
//! registered task. `params.bin` is the concatenation of every tensor's
//! little-endian values in manifest order.
//!
//! Loading builds a skeleton model from the manifest and overwrites each
//! parameter by name, so the file is the only source of weights.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use formed_core::backbone::{Backbone, BackboneConfig};
use formed_core::classifier::{SharedDecoder, TaskParams};
use formed_core::data::DatasetSpec;
use formed_core::registry::{Registry, Stage, TaskEntry};
use formed_core::train::FormedModel;
use formed_core::{DType, Module, Parameter, Real, Tensor};

use crate::config::{parse_kind, BackboneSection};
use crate::error::{CliError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";
pub const PARAMS: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub precision: String,
    pub stage: String,
    pub seed: u64,
    pub backbone: BackboneSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sda: Option<SdaSection>,
    #[serde(default)]
    pub tasks: BTreeMap<String, TaskSection>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdaSection {
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    pub task_kind: String,
    pub sampling_rate: f64,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

/// Everything a checkpoint holds. `sda` is absent for a backbone-only
/// (pretrained) checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub seed: u64,
    pub stage: Stage,
    pub backbone: Backbone<T>,
    pub sda: Option<SharedDecoder<T>>,
    pub registry: Registry<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn pretrained(backbone: Backbone<T>, seed: u64) -> Self {
        Checkpoint { seed, stage: Stage::Pretrained, backbone, sda: None, registry: Registry::new() }
    }

    pub fn from_model(model: &FormedModel<T>, seed: u64) -> Self {
        Checkpoint {
            seed,
            stage: model.stage,
            backbone: model.backbone.clone(),
            sda: Some(model.sda.clone()),
            registry: model.registry.clone(),
        }
    }

    /// Builds a model; a pretrained checkpoint gets a fresh decoder with
    /// `heads` heads seeded by `seed`.
    pub fn into_model(self, heads: usize, seed: u64) -> Result<FormedModel<T>> {
        let mut model = match self.sda {
            Some(sda) => {
                let mut m = FormedModel::new(self.backbone, sda.heads(), seed)?;
                m.sda = sda;
                m
            }
            None => FormedModel::new(self.backbone, heads, seed)?,
        };
        model.registry = self.registry;
        model.stage = self.stage;
        Ok(model)
    }

    fn visit_all(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.backbone.visit(f);
        if let Some(sda) = &self.sda {
            sda.visit(f);
        }
        self.registry.visit(f);
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let mut params = Vec::new();
        let mut offset = 0u64;
        self.visit_all(&mut |p| {
            params.push(ParamEntry { name: p.name().to_string(), shape: p.shape().to_vec(), offset });
            offset += (p.numel() * T::DTYPE.size_of()) as u64;
        });
        let tasks = self
            .registry
            .entries()
            .map(|e| {
                let s = &e.spec;
                let t = TaskSection {
                    channels: s.channels,
                    length: s.length,
                    classes: s.classes,
                    task_kind: s.task_kind.name().to_string(),
                    sampling_rate: s.sampling_rate,
                    created_at: e.created_at.name().to_string(),
                };
                (s.name.clone(), t)
            })
            .collect();
        CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            precision: T::DTYPE.name().to_string(),
            stage: self.stage.name().to_string(),
            seed: self.seed,
            backbone: self.backbone.config.into(),
            sda: self.sda.as_ref().map(|s| SdaSection { heads: s.heads() }),
            tasks,
            params,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.manifest();
        let mut bytes = Vec::new();
        self.visit_all(&mut |p| bytes.extend(p.value().to_le_bytes()));
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let text = toml::to_string(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(dir.join(MANIFEST), text).map_err(CliError::io(&dir.join(MANIFEST)))?;
        fs::write(dir.join(PARAMS), bytes).map_err(CliError::io(&dir.join(PARAMS)))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_manifest(dir)?;
        if m.precision != T::DTYPE.name() {
            return Err(CliError::Config(format!(
                "checkpoint {} stores {} weights but {} was requested",
                dir.display(),
                m.precision,
                T::DTYPE
            )));
        }
        let stage = Stage::parse(&m.stage)
            .ok_or_else(|| CliError::Data(format!("checkpoint {}: unknown stage `{}`", dir.display(), m.stage)))?;
        let config = BackboneConfig::from(m.backbone);
        let backbone = Backbone::new(config, 0)?;
        let sda = match m.sda {
            Some(s) => Some(SharedDecoder::new(config.model_dim, s.heads, 0)?),
            None => None,
        };
        if sda.is_none() && (stage != Stage::Pretrained || !m.tasks.is_empty()) {
            return Err(CliError::Data(format!("checkpoint {}: stage {stage} without a decoder", dir.display())));
        }
        let mut registry = Registry::new();
        for (name, t) in &m.tasks {
            let kind = parse_kind(Some(&t.task_kind)).map_err(|e| CliError::Data(e.to_string()))?;
            let spec = DatasetSpec::new(name, t.channels, t.length, t.classes, kind, t.sampling_rate);
            let created_at = Stage::parse(&t.created_at)
                .ok_or_else(|| CliError::Data(format!("task `{name}`: unknown stage `{}`", t.created_at)))?;
            let params = TaskParams::new(name, t.channels, t.classes, config.model_dim, kind, 0)?;
            registry.insert(TaskEntry { params, spec, created_at })?;
        }
        let mut ckpt = Checkpoint { seed: m.seed, stage, backbone, sda, registry };

        let path = dir.join(PARAMS);
        let bytes = fs::read(&path).map_err(CliError::io(&path))?;
        let w = T::DTYPE.size_of();
        let mut stored: HashMap<&str, Tensor<T>> = HashMap::new();
        for p in &m.params {
            let start = p.offset as usize;
            let end = start + p.shape.iter().product::<usize>() * w;
            let slice = bytes.get(start..end).ok_or_else(|| {
                CliError::Data(format!(
                    "{}: truncated at parameter `{}` (needs bytes {start}..{end}, file has {})",
                    path.display(),
                    p.name,
                    bytes.len()
                ))
            })?;
            stored.insert(&p.name, Tensor::from_le_bytes(p.shape.clone(), slice)?);
        }
        let expected: usize = m.params.iter().map(|p| p.shape.iter().product::<usize>() * w).sum();
        if bytes.len() != expected {
            return Err(CliError::Data(format!("{}: {} bytes, manifest describes {expected}", path.display(), bytes.len())));
        }

        let mut failure = None;
        let mut fill = |p: &mut Parameter<T>| {
            if failure.is_some() {
                return;
            }
            match stored.remove(p.name()) {
                None => failure = Some(format!("parameter `{}` is missing", p.name())),
                Some(t) if t.shape() != p.shape() => {
                    failure = Some(format!("parameter `{}` has shape {:?}, expected {:?}", p.name(), t.shape(), p.shape()))
                }
                Some(t) => {
                    if let Err(e) = p.set_value(t) {
                        failure = Some(e.to_string());
                    }
                }
            }
        };
        ckpt.backbone.visit_mut(&mut fill);
        if let Some(sda) = &mut ckpt.sda {
            sda.visit_mut(&mut fill);
        }
        ckpt.registry.visit_mut(&mut fill);
        if let Some(f) = failure {
            return Err(CliError::Data(format!("checkpoint {}: {f}", dir.display())));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(CliError::Data(format!("checkpoint {}: unexpected parameter `{extra}`", dir.display())));
        }
        ckpt.backbone.set_trainable(false);
        Ok(ckpt)
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let m: CheckpointManifest =
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.message())))?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "{}: format_version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

pub fn peek_precision(dir: &Path) -> Result<DType> {
    let m = read_manifest(dir)?;
    DType::parse(&m.precision).ok_or_else(|| CliError::Data(format!("unknown precision `{}`", m.precision)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use formed_core::nn::TaskKind;
    use formed_core::train::checksum;

    fn model() -> FormedModel<f64> {
        let cfg = BackboneConfig { patch_size: 4, model_dim: 8, layers: 1, heads: 2, max_patches: 8, horizon: 4 };
        let mut m = FormedModel::new(Backbone::new(cfg, 3).unwrap(), 2, 5).unwrap();
        let specs = [
            DatasetSpec::new("A", 3, 16, 2, TaskKind::Multiclass, 100.0),
            DatasetSpec::new("B", 2, 12, 4, TaskKind::Binary, 1.0),
        ];
        m.register_cohort(&specs, 7).unwrap();
        m.stage = Stage::Repurposed;
        m
    }

    #[test]
    fn round_trip_restores_every_weight_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let ck = Checkpoint::from_model(&m, 11);
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.stage, Stage::Repurposed);
        assert_eq!(back.registry.entry("B").unwrap().spec.task_kind, TaskKind::Binary);
        let m2 = back.into_model(2, 0).unwrap();
        assert_eq!(checksum(&m2.backbone), checksum(&m.backbone));
        assert_eq!(checksum(&m2.sda), checksum(&m.sda));
        assert_eq!(checksum(&m2.registry), checksum(&m.registry));

        let dir2 = tempfile::tempdir().unwrap();
        Checkpoint::from_model(&m2, 11).save(dir2.path()).unwrap();
        for f in [MANIFEST, PARAMS] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::from_model(&model(), 0).save(dir.path()).unwrap();
        let params = dir.path().join(PARAMS);
        let bytes = fs::read(&params).unwrap();
        fs::write(&params, &bytes[..bytes.len() - 8]).unwrap();
        let err = Checkpoint::<f64>::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated at parameter `task.B.Q`"), "{err}");
        fs::write(&params, &bytes).unwrap();

        let err = Checkpoint::<f32>::load(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let man = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&man).unwrap();
        fs::write(&man, text.replace("format_version = 1", "format_version = 2")).unwrap();
        assert!(Checkpoint::<f64>::load(dir.path()).unwrap_err().to_string().contains("format_version 2"));
        fs::write(&man, text.replace("channels = 3", "channels = 4")).unwrap();
        assert!(Checkpoint::<f64>::load(dir.path()).is_err());
    }

    #[test]
    fn pretrained_checkpoint_has_no_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        Checkpoint::pretrained(m.backbone.clone(), 1).save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(!text.contains("[sda]"));
        assert_eq!(peek_precision(dir.path()).unwrap(), DType::F64);
        let back = Checkpoint::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.stage, Stage::Pretrained);
        assert!(back.sda.is_none());
    }
}
