//! Datasets with heterogeneous channel/length/class counts, subject-level
//! splits, synthetic cohorts and few-shot subsampling.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::TaskKind;
use crate::rng::{self, standard_normal};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub channels: usize,
    /// Nominal sample length `T`.
    pub length: usize,
    pub classes: usize,
    pub task_kind: TaskKind,
    /// Informational only.
    pub sampling_rate: f64,
}

impl DatasetSpec {
    pub fn new(name: &str, channels: usize, length: usize, classes: usize, task_kind: TaskKind, sampling_rate: f64) -> Self {
        DatasetSpec { name: String::from(name), channels, length, classes, task_kind, sampling_rate }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Data("dataset name is empty".into()));
        }
        if self.channels == 0 || self.length == 0 {
            return Err(Error::Data(format!("dataset `{}` needs C >= 1 and T >= 1", self.name)));
        }
        if self.classes < 2 {
            return Err(Error::Data(format!("dataset `{}` needs K >= 2, got {}", self.name, self.classes)));
        }
        Ok(())
    }
}

/// One multivariate recording: `C x T` row-major values and missing flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub channels: usize,
    pub values: Vec<f64>,
    /// `true` = missing/padded.
    pub missing: Vec<bool>,
    pub label: usize,
    pub subject: String,
}

impl Sample {
    pub fn new(channels: usize, values: Vec<f64>, label: usize, subject: &str) -> Self {
        let missing = vec![false; values.len()];
        Sample { channels, values, missing, label, subject: String::from(subject) }
    }

    pub fn length(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.values.len() / self.channels
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.length();
        &self.values[c * t..(c + 1) * t]
    }

    pub fn validate(&self, spec: &DatasetSpec) -> Result<()> {
        if self.channels != spec.channels {
            return Err(Error::Data(format!("{} channels, dataset declares {}", self.channels, spec.channels)));
        }
        if self.values.len() != spec.channels * spec.length || self.missing.len() != self.values.len() {
            return Err(Error::Data(format!(
                "{} values / {} mask bits, expected {}x{}",
                self.values.len(),
                self.missing.len(),
                spec.channels,
                spec.length
            )));
        }
        if self.label >= spec.classes {
            return Err(Error::Data(format!("label {} >= K = {}", self.label, spec.classes)));
        }
        let t = spec.length;
        for c in 0..self.channels {
            let m = &self.missing[c * t..(c + 1) * t];
            if m.iter().all(|&x| x) {
                return Err(Error::Data(format!("channel {c} has no observed position")));
            }
            if self.channel(c).iter().zip(m).any(|(v, &miss)| !miss && !v.is_finite()) {
                return Err(Error::Data(format!("channel {c} has a non-finite observed value")));
            }
        }
        Ok(())
    }
}

/// Validates every sample, reporting the first failure with its index.
pub fn validate_samples(spec: &DatasetSpec, samples: &[Sample]) -> Result<()> {
    spec.validate()?;
    for (i, s) in samples.iter().enumerate() {
        s.validate(spec).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("dataset `{}` sample {i}: {msg}", spec.name)),
            other => other,
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

/// Disjoint subject sets for train/validation/test.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl SplitSpec {
    pub fn split_of(&self, subject: &str) -> Option<Split> {
        if self.train.contains(subject) {
            Some(Split::Train)
        } else if self.val.contains(subject) {
            Some(Split::Val)
        } else if self.test.contains(subject) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn select(&self, samples: &[Sample], split: Split) -> Vec<Sample> {
        samples.iter().filter(|s| self.split_of(&s.subject) == Some(split)).cloned().collect()
    }

    /// `(train, val, test)` in original sample order.
    pub fn partition(&self, samples: &[Sample]) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
        (self.select(samples, Split::Train), self.select(samples, Split::Val), self.select(samples, Split::Test))
    }
}

/// Shuffles the sorted distinct subjects with `seed`, then cuts by `fractions`
/// (train and validation counts rounded, test takes the rest).
pub fn split_by_subject(samples: &[Sample], fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {:?} must be positive and sum to 1", fractions)));
    }
    let subjects: BTreeSet<&str> = samples.iter().map(|s| s.subject.as_str()).collect();
    let n = subjects.len();
    if n < 3 {
        return Err(Error::Data(format!("subject-independent split needs >= 3 subjects, got {n}")));
    }
    let mut order: Vec<&str> = subjects.into_iter().collect();
    order.shuffle(&mut rng::rng(rng::name_seed("split", seed)));
    let n_train = (Float::round(fractions[0] * n as f64) as usize).clamp(1, n - 2);
    let n_val = (Float::round(fractions[1] * n as f64) as usize).clamp(1, n - n_train - 1);
    let to_set = |s: &[&str]| s.iter().map(|x| String::from(*x)).collect::<BTreeSet<_>>();
    Ok(SplitSpec {
        fractions,
        train: to_set(&order[..n_train]),
        val: to_set(&order[n_train..n_train + n_val]),
        test: to_set(&order[n_train + n_val..]),
    })
}

/// Per-class stratified subsample keeping `ceil(ratio * n_k)` of each class.
/// Selected samples keep their original order.
pub fn subsample_ratio(samples: &[Sample], ratio: f64, seed: u64) -> Result<Vec<Sample>> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(subsample_indices(&labels, ratio, seed)?.into_iter().map(|i| samples[i].clone()).collect())
}

/// Index form of [`subsample_ratio`]; returned indices are ascending.
pub fn subsample_indices(labels: &[usize], ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("ratio {ratio} outside (0, 1]")));
    }
    if ratio == 1.0 {
        return Ok((0..labels.len()).collect());
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut r = rng::rng(rng::name_seed("subsample", seed));
    let mut keep = Vec::new();
    for idx in by_class.values_mut() {
        // Guard against 0.1 * 50 = 5.000000000000001 style round-up.
        let want = Float::ceil(ratio * idx.len() as f64 - 1e-9).max(1.0) as usize;
        idx.shuffle(&mut r);
        keep.extend_from_slice(&idx[..want.min(idx.len())]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Per-sample, per-channel z-score over observed positions. Missing positions
/// become 0; zero-variance channels are centered with scale 1.
pub fn normalize(samples: &mut [Sample]) {
    for s in samples.iter_mut() {
        let t = s.length();
        for c in 0..s.channels {
            let range = c * t..(c + 1) * t;
            let (vals, miss) = (&mut s.values[range.clone()], &s.missing[range]);
            let obs: Vec<f64> = vals.iter().zip(miss).filter(|(_, &m)| !m).map(|(v, _)| *v).collect();
            if obs.is_empty() {
                continue;
            }
            let n = obs.len() as f64;
            let mean = obs.iter().sum::<f64>() / n;
            let var = obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = Float::sqrt(var);
            let scale = if sd > 1e-12 { sd } else { 1.0 };
            for (v, &m) in vals.iter_mut().zip(miss) {
                *v = if m { 0.0 } else { (*v - mean) / scale };
            }
        }
    }
}

/// Stable 64-bit fingerprint of sample contents (values, mask, label, subject).
pub fn fingerprint(samples: &[Sample]) -> u64 {
    let mut bytes = Vec::new();
    for s in samples {
        bytes.extend_from_slice(&(s.channels as u64).to_le_bytes());
        bytes.extend_from_slice(&(s.label as u64).to_le_bytes());
        bytes.extend_from_slice(s.subject.as_bytes());
        bytes.push(0);
        for v in &s.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend(s.missing.iter().map(|&m| m as u8));
    }
    rng::fnv1a(&bytes)
}

/// Parameters shared by every dataset of a synthetic cohort.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Signal-to-noise power ratio; `f64::INFINITY` disables noise.
    pub snr: f64,
    pub subjects_per_dataset: usize,
    pub samples_per_subject: usize,
    pub seed: u64,
}

/// Candidate signature frequencies in cycles per sample window.
const SIGNATURE_CYCLES: [f64; 8] = [3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0, 17.0];

/// Cycles-per-window frequency assigned to each class of a synthetic dataset.
pub fn synthetic_class_cycles(name: &str, classes: usize, seed: u64) -> Result<Vec<f64>> {
    if classes > SIGNATURE_CYCLES.len() {
        return Err(Error::Config(format!(
            "synthetic datasets support at most {} classes, `{name}` asks for {classes}",
            SIGNATURE_CYCLES.len()
        )));
    }
    let mut cycles = SIGNATURE_CYCLES.to_vec();
    cycles.shuffle(&mut rng::rng(rng::name_seed(&format!("cycles/{name}"), seed)));
    cycles.truncate(classes);
    Ok(cycles)
}

/// Class `k` is a sinusoid at its own frequency, mixed into each channel with a
/// dataset-level gain and a class/channel phase. Each subject scales and offsets
/// every channel; each sample gets a random time shift and Gaussian noise at
/// `snr`. Labels cycle through the classes so every subject covers all of them.
pub fn make_synthetic_dataset(spec: &DatasetSpec, cfg: &SynthConfig) -> Result<Dataset> {
    spec.validate()?;
    if cfg.subjects_per_dataset == 0 || cfg.samples_per_subject == 0 {
        return Err(Error::Config(format!("synthetic dataset `{}` needs subjects and samples", spec.name)));
    }
    if !(cfg.snr > 0.0) {
        return Err(Error::Config(format!("snr must be positive, got {}", cfg.snr)));
    }
    let (c, t, k) = (spec.channels, spec.length, spec.classes);
    let cycles = synthetic_class_cycles(&spec.name, k, cfg.seed)?;
    let mut r = rng::rng(rng::name_seed(&format!("cohort/{}", spec.name), cfg.seed));
    let gains: Vec<f64> = (0..c).map(|_| r.random_range(0.5..1.5)).collect();
    let phases: Vec<f64> = (0..k * c).map(|_| r.random_range(0.0..2.0 * PI)).collect();

    let mut samples = Vec::with_capacity(cfg.subjects_per_dataset * cfg.samples_per_subject);
    for subj in 0..cfg.subjects_per_dataset {
        let subject = format!("{}-s{:03}", spec.name, subj);
        let scale: Vec<f64> = (0..c).map(|_| (1.0 + 0.3 * standard_normal(&mut r)).max(0.2)).collect();
        let offset: Vec<f64> = (0..c).map(|_| 0.5 * standard_normal(&mut r)).collect();
        for j in 0..cfg.samples_per_subject {
            let label = (subj * cfg.samples_per_subject + j) % k;
            let shift = r.random_range(0.0..2.0 * PI);
            let mut values = Vec::with_capacity(c * t);
            for ch in 0..c {
                let amp = gains[ch] * scale[ch];
                let noise_sd = if cfg.snr.is_infinite() { 0.0 } else { Float::sqrt(amp * amp / 2.0 / cfg.snr) };
                let phase = phases[label * c + ch] + shift;
                for step in 0..t {
                    let angle = 2.0 * PI * cycles[label] * step as f64 / t as f64 + phase;
                    let noise = if noise_sd > 0.0 { noise_sd * standard_normal(&mut r) } else { 0.0 };
                    values.push(offset[ch] + amp * Float::sin(angle) + noise);
                }
            }
            samples.push(Sample::new(c, values, label, &subject));
        }
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

pub fn make_synthetic_cohort(specs: &[DatasetSpec], cfg: &SynthConfig) -> Result<Vec<Dataset>> {
    if specs.is_empty() {
        return Err(Error::Empty("synthetic cohort specs"));
    }
    specs.iter().map(|s| make_synthetic_dataset(s, cfg)).collect()
}

/// Univariate forecasting corpus: sums of one to three sinusoids with random
/// periods (8 to 64 steps), phases and amplitudes.
pub fn sinusoid_corpus(series: usize, length: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::rng(rng::name_seed("sinusoid-corpus", seed));
    (0..series)
        .map(|_| {
            let parts = r.random_range(1..=3usize);
            let comps: Vec<(f64, f64, f64)> = (0..parts)
                .map(|_| (r.random_range(8.0..64.0), r.random_range(0.0..2.0 * PI), r.random_range(0.3..1.5)))
                .collect();
            (0..length)
                .map(|t| comps.iter().map(|(p, ph, a)| a * Float::sin(2.0 * PI * t as f64 / p + ph)).sum())
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subjects(n: usize, per: usize) -> Vec<Sample> {
        (0..n * per).map(|i| Sample::new(1, vec![i as f64, 1.0], i % 2, &format!("s{}", i / per))).collect()
    }

    #[test]
    fn ten_subjects_split_six_two_two() {
        let s = subjects(10, 3);
        let sp = split_by_subject(&s, [0.6, 0.2, 0.2], 4).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (6, 2, 2));
        assert_eq!(sp, split_by_subject(&s, [0.6, 0.2, 0.2], 4).unwrap());
        assert!(split_by_subject(&subjects(2, 3), [0.6, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn subsample_ceiling_arithmetic() {
        let s = subjects(100, 1);
        let sub = subsample_ratio(&s, 0.1, 0).unwrap();
        assert_eq!(sub.iter().filter(|x| x.label == 0).count(), 5);
        assert_eq!(sub.iter().filter(|x| x.label == 1).count(), 5);
        assert_eq!(subsample_ratio(&s, 1.0, 0).unwrap(), s);
        assert!(subsample_ratio(&s, 0.0, 0).is_err());
        assert!(subsample_ratio(&s, 1.5, 0).is_err());
    }

    #[test]
    fn normalize_constant_and_standard_channels() {
        let mut s = vec![Sample::new(2, vec![3.0, 3.0, 3.0, -1.0, 1.0, -1.0], 0, "a")];
        s[0].values[4] = 1.0;
        normalize(&mut s);
        assert_eq!(&s[0].values[..3], &[0.0, 0.0, 0.0]);
        let before = s[0].values.clone();
        // The second channel is [-1, 1, -1]: mean -1/3, not yet standard.
        normalize(&mut s);
        for (a, b) in s[0].values.iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_zeroes_missing_positions() {
        let mut s = Sample::new(1, vec![1.0, 5.0, 3.0], 0, "a");
        s.missing[1] = true;
        let mut v = vec![s];
        normalize(&mut v);
        assert_eq!(v[0].values, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn label_equal_to_k_is_rejected() {
        let spec = DatasetSpec::new("d", 1, 2, 2, TaskKind::Multiclass, 1.0);
        let s = Sample::new(1, vec![0.0, 1.0], 2, "a");
        let err = validate_samples(&spec, &[s]).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("sample 0")));
    }

    #[test]
    fn synthetic_generation_is_seeded() {
        let spec = DatasetSpec::new("X", 2, 64, 3, TaskKind::Multiclass, 1.0);
        let cfg = SynthConfig { snr: 5.0, subjects_per_dataset: 4, samples_per_subject: 3, seed: 1 };
        let a = make_synthetic_dataset(&spec, &cfg).unwrap();
        let b = make_synthetic_dataset(&spec, &cfg).unwrap();
        assert_eq!(fingerprint(&a.samples), fingerprint(&b.samples));
        let counts = (0..3).map(|k| a.samples.iter().filter(|s| s.label == k).count()).collect::<Vec<_>>();
        assert_eq!(counts, vec![4, 4, 4]);
        validate_samples(&a.spec, &a.samples).unwrap();
    }
}
