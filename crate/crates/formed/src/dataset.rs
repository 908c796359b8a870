//! Dataset directories.
//!
//! `manifest.toml` describes the dataset and `samples.bin` holds fixed-width
//! little-endian records, one per sample:
//!
//! | field   | type          | count   |
//! |---------|---------------|---------|
//! | label   | `u32`         | 1       |
//! | subject | `u32` index into `manifest.subjects` | 1 |
//! | values  | `f64`         | `C * T` (channel-major) |
//! | mask    | `u8` (1 = missing, 0 = observed) | `C * T` |
//!
//! A directory with `labels.csv` instead of a manifest is read as a CSV
//! import: see [`import_csv`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use formed_core::data::{validate_samples, Dataset, DatasetSpec, Sample};
use formed_core::nn::TaskKind;

use crate::config::parse_kind;
use crate::error::{CliError, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";
pub const SAMPLES: &str = "samples.bin";
pub const LABELS_CSV: &str = "labels.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    pub task_kind: String,
    pub sampling_rate: f64,
    pub samples: usize,
    pub subjects: Vec<String>,
}

impl DatasetManifest {
    pub fn spec(&self) -> Result<DatasetSpec> {
        let kind = parse_kind(Some(&self.task_kind))?;
        let spec = DatasetSpec::new(&self.name, self.channels, self.length, self.classes, kind, self.sampling_rate);
        spec.validate()?;
        Ok(spec)
    }

    pub fn record_size(&self) -> usize {
        8 + self.channels * self.length * 9
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    validate_samples(&ds.spec, &ds.samples)?;
    let mut subjects: Vec<String> = ds.samples.iter().map(|s| s.subject.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let index: BTreeMap<&str, u32> = subjects.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
    let spec = &ds.spec;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        name: spec.name.clone(),
        channels: spec.channels,
        length: spec.length,
        classes: spec.classes,
        task_kind: spec.task_kind.name().to_string(),
        sampling_rate: spec.sampling_rate,
        samples: ds.samples.len(),
        subjects: subjects.clone(),
    };
    let mut bytes = Vec::with_capacity(manifest.record_size() * ds.samples.len());
    for s in &ds.samples {
        bytes.extend_from_slice(&(s.label as u32).to_le_bytes());
        bytes.extend_from_slice(&index[s.subject.as_str()].to_le_bytes());
        for v in &s.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend(s.missing.iter().map(|&m| m as u8));
    }
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let text = toml::to_string(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text).map_err(CliError::io(&dir.join(MANIFEST)))?;
    fs::write(dir.join(SAMPLES), bytes).map_err(CliError::io(&dir.join(SAMPLES)))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let m: DatasetManifest =
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.message())))?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "{}: format_version {} is not supported (expected {DATASET_FORMAT_VERSION})",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// Loads a binary dataset directory, or a CSV import if it has no manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join(MANIFEST).exists() && dir.join(LABELS_CSV).exists() {
        return import_csv(dir);
    }
    let m = read_manifest(dir)?;
    let spec = m.spec()?;
    let path = dir.join(SAMPLES);
    let bytes = fs::read(&path).map_err(CliError::io(&path))?;
    let rec = m.record_size();
    if bytes.len() != rec * m.samples {
        let whole = bytes.len() / rec;
        return Err(CliError::Data(format!(
            "{}: {} bytes, expected {} samples of {rec} bytes (sample {} is {})",
            path.display(),
            bytes.len(),
            m.samples,
            whole.min(m.samples),
            if bytes.len() < rec * m.samples { "truncated" } else { "followed by trailing bytes" }
        )));
    }
    let n = m.channels * m.length;
    let mut samples = Vec::with_capacity(m.samples);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = u32::from_le_bytes(r[0..4].try_into().unwrap()) as usize;
        let subject = u32::from_le_bytes(r[4..8].try_into().unwrap()) as usize;
        let subject = m.subjects.get(subject).ok_or_else(|| {
            CliError::Data(format!("dataset `{}` sample {i}: subject index {subject} out of range", m.name))
        })?;
        let values: Vec<f64> = r[8..8 + 8 * n].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let missing = r[8 + 8 * n..]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(CliError::Data(format!("dataset `{}` sample {i}: mask byte {other}", m.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample { channels: m.channels, values, missing, label, subject: subject.clone() });
    }
    validate_samples(&spec, &samples)?;
    Ok(Dataset { spec, samples })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRow {
    file: String,
    label: usize,
    subject: String,
}

/// Reads a CSV import directory. `labels.csv` has columns `file,label,subject`;
/// each listed file holds one row per timestep and one column per channel,
/// with a header row. Empty cells are missing values and shorter recordings
/// are padded as missing up to the longest one. `C` comes from the header,
/// `K` from the largest label and the dataset name from the directory.
pub fn import_csv(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join(LABELS_CSV);
    let mut rdr = csv::Reader::from_path(&labels_path).map_err(|e| CliError::Data(format!("{}: {e}", labels_path.display())))?;
    let rows = rdr
        .deserialize::<LabelRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", labels_path.display())))?;
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no samples listed", labels_path.display())));
    }
    let mut recordings = Vec::with_capacity(rows.len());
    let mut channels = None;
    for (i, row) in rows.iter().enumerate() {
        let path = dir.join(&row.file);
        let mut r = csv::Reader::from_path(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let c = r.headers().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.len();
        if *channels.get_or_insert(c) != c {
            return Err(CliError::Data(format!("sample {i} ({}) has {c} channels, expected {}", row.file, channels.unwrap())));
        }
        let mut steps: Vec<Vec<Option<f64>>> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let step = rec
                .iter()
                .map(|cell| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .map(Some)
                            .map_err(|_| CliError::Data(format!("{}: `{cell}` is not a number", path.display())))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            steps.push(step);
        }
        recordings.push(steps);
    }
    let c = channels.unwrap_or(0);
    let t = recordings.iter().map(|r| r.len()).max().unwrap_or(0);
    let k = rows.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("imported").to_string();
    let spec = DatasetSpec::new(&name, c, t, k.max(2), TaskKind::Multiclass, 1.0);
    let samples = rows
        .iter()
        .zip(recordings)
        .map(|(row, steps)| {
            let mut values = vec![0.0; c * t];
            let mut missing = vec![true; c * t];
            for (ti, step) in steps.iter().enumerate() {
                for (ci, v) in step.iter().enumerate() {
                    if let Some(v) = v {
                        values[ci * t + ti] = *v;
                        missing[ci * t + ti] = false;
                    }
                }
            }
            Sample { channels: c, values, missing, label: row.label, subject: row.subject.clone() }
        })
        .collect::<Vec<_>>();
    validate_samples(&spec, &samples)?;
    Ok(Dataset { spec, samples })
}
