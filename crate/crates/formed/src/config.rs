//! The TOML run configuration. Unknown keys are rejected and every section is
//! validated before any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use formed_core::backbone::{BackboneConfig, PretrainConfig};
use formed_core::data::{DatasetSpec, SynthConfig};
use formed_core::nn::TaskKind;
use formed_core::train::StageConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default = "StageSection::repurpose_default")]
    pub repurpose: StageSection,
    #[serde(default = "StageSection::adapt_default")]
    pub adapt: StageSection,
    #[serde(default)]
    pub data: DataSection,
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub patch_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_patches: usize,
    pub horizon: usize,
}

impl From<BackboneConfig> for BackboneSection {
    fn from(b: BackboneConfig) -> Self {
        BackboneSection {
            patch_size: b.patch_size,
            model_dim: b.model_dim,
            layers: b.layers,
            heads: b.heads,
            max_patches: b.max_patches,
            horizon: b.horizon,
        }
    }
}

impl From<BackboneSection> for BackboneConfig {
    fn from(b: BackboneSection) -> Self {
        BackboneConfig {
            patch_size: b.patch_size,
            model_dim: b.model_dim,
            layers: b.layers,
            heads: b.heads,
            max_patches: b.max_patches,
            horizon: b.horizon,
        }
    }
}

/// Forecasting pretraining on a generated sinusoid corpus.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub series: usize,
    pub length: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub windows_per_series: usize,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { series: 64, length: 512, epochs: 5, batch_size: 16, lr: 1e-3, windows_per_series: 4, seed: 0 }
    }
}

impl PretrainSection {
    pub fn to_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            windows_per_series: self.windows_per_series,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// Decoder attention heads; defaults to the backbone's.
    pub heads: Option<usize>,
    /// Few-shot training-data ratios (adapt only).
    pub ratios: Option<Vec<f64>>,
}

impl StageSection {
    fn repurpose_default() -> Self {
        let c = StageConfig::repurpose(0);
        StageSection { epochs: c.epochs, batch_size: c.batch_size, lr: c.lr, patience: c.patience, seeds: vec![0], heads: None, ratios: None }
    }

    fn adapt_default() -> Self {
        let c = StageConfig::adapt(0);
        StageSection { epochs: c.epochs, batch_size: c.batch_size, lr: c.lr, patience: c.patience, seeds: vec![0], heads: None, ratios: None }
    }

    pub fn stage_config(&self, seed: u64) -> StageConfig {
        StageConfig { epochs: self.epochs, batch_size: self.batch_size, lr: self.lr, patience: self.patience, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding one sub-directory per dataset.
    pub root: PathBuf,
    /// Dataset names used for repurposing.
    pub cohort: Vec<String>,
    pub split: [f64; 3],
    /// Seed of the subject split, shared by every training seed.
    pub split_seed: u64,
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { root: PathBuf::from("data"), cohort: Vec::new(), split: [0.6, 0.2, 0.2], split_seed: 0, normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// Signal-to-noise power ratio; `inf` disables noise.
    pub snr: f64,
    pub subjects: usize,
    pub samples_per_subject: usize,
    pub seed: u64,
    pub datasets: Vec<SynthDataset>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDataset {
    pub name: String,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    #[serde(default)]
    pub task_kind: Option<String>,
    #[serde(default = "one")]
    pub sampling_rate: f64,
}

fn one() -> f64 {
    1.0
}

impl SynthSection {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            snr: self.snr,
            subjects_per_dataset: self.subjects,
            samples_per_subject: self.samples_per_subject,
            seed: self.seed,
        }
    }

    pub fn specs(&self) -> Result<Vec<DatasetSpec>> {
        self.datasets
            .iter()
            .map(|d| {
                let kind = parse_kind(d.task_kind.as_deref())?;
                Ok(DatasetSpec::new(&d.name, d.channels, d.length, d.classes, kind, d.sampling_rate))
            })
            .collect()
    }
}

pub fn parse_kind(s: Option<&str>) -> Result<TaskKind> {
    match s {
        None => Ok(TaskKind::Multiclass),
        Some(s) => TaskKind::parse(s).ok_or_else(|| CliError::Config(format!("unknown task_kind `{s}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs") }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates; relative data and output paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data.root.is_relative() {
            cfg.data.root = base.join(&cfg.data.root);
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        BackboneConfig::from(self.backbone).validate()?;
        let p = &self.pretrain;
        if p.series == 0 || p.epochs == 0 || p.batch_size == 0 || p.windows_per_series == 0 {
            return bad("pretrain.series, epochs, batch_size and windows_per_series must be positive".into());
        }
        if p.length < self.backbone.patch_size + self.backbone.horizon {
            return bad(format!("pretrain.length {} is shorter than one patch plus the horizon", p.length));
        }
        if !(p.lr > 0.0 && p.lr.is_finite()) {
            return bad(format!("pretrain.lr must be positive, got {}", p.lr));
        }
        for (name, s) in [("repurpose", &self.repurpose), ("adapt", &self.adapt)] {
            s.stage_config(0).validate().map_err(|e| CliError::Config(format!("{name}: {e}")))?;
            if s.seeds.is_empty() {
                return bad(format!("{name}.seeds must not be empty"));
            }
            if let Some(h) = s.heads {
                if h == 0 || self.backbone.model_dim % h != 0 {
                    return bad(format!("{name}.heads {h} must divide backbone.model_dim {}", self.backbone.model_dim));
                }
            }
            if let Some(r) = &s.ratios {
                if r.is_empty() || r.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
                    return bad(format!("{name}.ratios must be a nonempty list within (0, 1]"));
                }
            }
        }
        let f = self.data.split;
        if f.iter().any(|x| !(*x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("data.split {f:?} must be three positive fractions summing to 1"));
        }
        if let Some(s) = &self.synth {
            if !(s.snr > 0.0) || s.subjects == 0 || s.samples_per_subject == 0 || s.datasets.is_empty() {
                return bad("synth needs snr > 0, subjects, samples_per_subject and at least one dataset".into());
            }
            for spec in s.specs()? {
                spec.validate()?;
            }
        }
        Ok(())
    }

    pub fn sda_heads(&self) -> usize {
        self.repurpose.heads.unwrap_or(self.backbone.heads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[backbone]\npatch_size = 8\nmodel_dim = 16\nlayers = 1\nheads = 2\nmax_patches = 8\nhorizon = 8\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.repurpose.lr, 1e-3);
        assert_eq!(c.adapt.lr, 3e-3);
        assert_eq!(c.repurpose.patience, 10);
        assert_eq!(c.sda_heads(), 2);
    }

    #[test]
    fn missing_key_is_named() {
        let err = RunConfig::parse(&MINIMAL.replace("horizon = 8\n", "")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("horizon"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse(&format!("{MINIMAL}dropout = 0.1\n")).unwrap_err();
        assert!(err.to_string().contains("dropout"), "{err}");
        let err = RunConfig::parse(&format!("{MINIMAL}[repurpose]\nepochs = 1\nbatch_size = 1\nlr = 0.1\npatience = 1\nseeds = [0]\nmomentum = 1\n")).unwrap_err();
        assert!(err.to_string().contains("momentum"), "{err}");
    }

    #[test]
    fn semantic_validation() {
        assert!(RunConfig::parse(&MINIMAL.replace("heads = 2", "heads = 3")).is_err());
        let bad_split = format!("{MINIMAL}[data]\nsplit = [0.5, 0.5, 0.5]\n");
        assert!(RunConfig::parse(&bad_split).is_err());
    }
}
