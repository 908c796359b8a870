//! Repurposing and adapting loops, evaluation and the few-shot harness.
//!
//! Backbone features are computed once per sample and reused across epochs:
//! the backbone is frozen in both stages, so its outputs never change.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::backbone::{Backbone, Features};
use crate::classifier::{classify_features, logits_from_features, SharedDecoder, TaskParams};
use crate::data::{subsample_indices, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, Scores};
use crate::nn::cross_entropy;
use crate::optim::{Adam, AdamConfig};
use crate::param::Module;
use crate::registry::{Registry, Stage};
use crate::rng;
use crate::tape::Graph;
use crate::tensor::{Real, Tensor};

/// Learning rate used when repurposing.
pub const REPURPOSE_LR: f64 = 1e-3;
/// Learning rate used when adapting.
pub const ADAPT_LR: f64 = 3e-3;

/// Frozen backbone, shared decoder and per-dataset task parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FormedModel<T> {
    pub backbone: Backbone<T>,
    pub sda: SharedDecoder<T>,
    pub registry: Registry<T>,
    pub stage: Stage,
}

impl<T: Real> FormedModel<T> {
    /// Wraps a pretrained backbone with a freshly initialized decoder.
    pub fn new(mut backbone: Backbone<T>, heads: usize, seed: u64) -> Result<Self> {
        backbone.set_trainable(false);
        let sda = SharedDecoder::new(backbone.config.model_dim, heads, seed)?;
        Ok(FormedModel { backbone, sda, registry: Registry::new(), stage: Stage::Pretrained })
    }

    pub fn dim(&self) -> usize {
        self.backbone.config.model_dim
    }

    /// Registers every cohort dataset ahead of repurposing.
    pub fn register_cohort(&mut self, specs: &[DatasetSpec], seed: u64) -> Result<()> {
        let d = self.dim();
        for s in specs {
            self.registry.register_task(s, d, seed, Stage::Repurposed)?;
        }
        Ok(())
    }

    pub fn features(&self, sample: &Sample) -> Result<Features<T>> {
        let values: Vec<T> = sample.values.iter().map(|&v| T::from_f64(v)).collect();
        self.backbone.extract_features(&values, &sample.missing, sample.channels)
    }

    /// Class probabilities (as `f64`) for one sample of dataset `name`.
    pub fn predict(&self, name: &str, sample: &Sample) -> Result<Vec<f64>> {
        let task = self.registry.get_task(name)?;
        if sample.channels != task.channels() {
            return Err(Error::ChannelMismatch { expected: task.channels(), found: sample.channels });
        }
        probabilities(&self.sda, task, &self.features(sample)?)
    }
}

/// Cached features with labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Labeled<T> {
    pub features: Vec<Features<T>>,
    pub labels: Vec<usize>,
}

impl<T: Real> Labeled<T> {
    /// Runs the backbone over `samples`, one at a time.
    pub fn extract(backbone: &Backbone<T>, samples: &[Sample]) -> Result<Self> {
        let mut out = Labeled { features: Vec::with_capacity(samples.len()), labels: Vec::with_capacity(samples.len()) };
        for s in samples {
            let values: Vec<T> = s.values.iter().map(|&v| T::from_f64(v)).collect();
            out.features.push(backbone.extract_features(&values, &s.missing, s.channels)?);
            out.labels.push(s.label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pairs(&self) -> Vec<(&Features<T>, usize)> {
        self.features.iter().zip(self.labels.iter().copied()).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<(&Features<T>, usize)> {
        indices.iter().map(|&i| (&self.features[i], self.labels[i])).collect()
    }
}

/// Borrowed training and validation examples of one dataset.
#[derive(Debug, Clone)]
pub struct TrainSet<'f, T> {
    pub name: String,
    pub train: Vec<(&'f Features<T>, usize)>,
    pub val: Vec<(&'f Features<T>, usize)>,
}

impl<'f, T: Real> TrainSet<'f, T> {
    pub fn new(name: &str, train: &'f Labeled<T>, val: &'f Labeled<T>) -> Self {
        TrainSet { name: String::from(name), train: train.pairs(), val: val.pairs() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn repurpose(seed: u64) -> Self {
        StageConfig { epochs: 50, batch_size: 32, lr: REPURPOSE_LR, patience: 10, seed }
    }

    pub fn adapt(seed: u64) -> Self {
        StageConfig { epochs: 50, batch_size: 32, lr: ADAPT_LR, patience: 10, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    /// Empty when no validation samples were given.
    pub val_loss: Vec<f64>,
    /// Trainable scalars during the stage.
    pub trainable: usize,
}

/// Batches per dataset, interleaved in proportion to dataset size: batch `i`
/// of a dataset with `n` batches sorts at `(i + 0.5) / n`.
pub fn interleave_batches(sizes: &[usize], batch_size: usize, rng: &mut rng::Rng) -> Vec<(usize, Vec<usize>)> {
    let mut keyed = Vec::new();
    for (d, &n) in sizes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
        let nb = chunks.len() as f64;
        for (i, c) in chunks.into_iter().enumerate() {
            keyed.push(((i as f64 + 0.5) / nb, d, c));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, d, c)| (d, c)).collect()
}

/// Mean cross-entropy of one dataset's examples under the current weights.
fn mean_loss<T: Real>(sda: &SharedDecoder<T>, task: &TaskParams<T>, examples: &[(&Features<T>, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for &(f, y) in examples {
        let mut g = Graph::new();
        let z = logits_from_features(&mut g, sda, task, f)?;
        let l = cross_entropy(&mut g, z, y, task.task_kind)?;
        total += g.value(l).item().as_f64();
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Shared loop. `on_step` sees the number of scalars updated by each step.
fn fit<T: Real>(
    model: &mut FormedModel<T>,
    sets: &[TrainSet<'_, T>],
    cfg: &StageConfig,
    mut on_step: impl FnMut(usize) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if sets.iter().all(|s| s.train.is_empty()) {
        return Err(Error::Empty("training samples"));
    }
    let mut r = rng::rng(rng::name_seed("train", cfg.seed));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let sizes: Vec<usize> = sets.iter().map(|s| s.train.len()).collect();
    let n_val: usize = sets.iter().map(|s| s.val.len()).sum();
    let mut report = TrainReport { trainable: model.sda.num_trainable() + model.registry.num_trainable(), ..Default::default() };
    let snapshot = |m: &FormedModel<T>| -> Result<(SharedDecoder<T>, Vec<TaskParams<T>>)> {
        let tasks = sets.iter().map(|s| m.registry.get_task(&s.name).cloned()).collect::<Result<_>>()?;
        Ok((m.sda.clone(), tasks))
    };
    let mut best: Option<(f64, usize, (SharedDecoder<T>, Vec<TaskParams<T>>))> = None;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (d, idx) in interleave_batches(&sizes, cfg.batch_size, &mut r) {
            let set = &sets[d];
            let (grads, loss) = {
                let task = model.registry.get_task(&set.name)?;
                let mut g = Graph::new();
                let mut losses = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let (f, y) = set.train[i];
                    let z = logits_from_features(&mut g, &model.sda, task, f)?;
                    losses.push(cross_entropy(&mut g, z, y, task.task_kind)?);
                }
                let total = g.add_all(&losses)?;
                let mean = g.scale(total, T::one() / T::from_usize(idx.len()))?;
                let loss = g.value(mean).item().as_f64();
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("`{}` at epoch {epoch}", set.name)));
                }
                (g.backward(mean)?, loss)
            };
            let mut touched = opt.step_module(&mut model.sda, &grads)?;
            touched += opt.step_module(model.registry.get_task_mut(&set.name)?, &grads)?;
            on_step(touched)?;
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        report.train_loss.push(loss_sum / seen as f64);
        report.epochs_run = epoch + 1;

        if n_val == 0 {
            continue;
        }
        let mut val = 0.0;
        for s in sets {
            let task = model.registry.get_task(&s.name)?;
            val += mean_loss(&model.sda, task, &s.val)? * s.val.len() as f64;
        }
        let val = val / n_val as f64;
        if !val.is_finite() {
            return Err(Error::Diverged(format!("validation loss at epoch {epoch}")));
        }
        report.val_loss.push(val);
        match &best {
            Some((b, at, _)) if val >= *b => {
                if epoch - at >= cfg.patience {
                    log::info!("early stop at epoch {epoch}, best epoch {at}");
                    break;
                }
            }
            _ => best = Some((val, epoch, snapshot(model)?)),
        }
    }

    match best {
        Some((_, at, (sda, tasks))) => {
            model.sda = sda;
            for t in tasks {
                let name = t.dataset_name.clone();
                *model.registry.get_task_mut(&name)? = t;
            }
            report.best_epoch = at;
        }
        None => report.best_epoch = report.epochs_run - 1,
    }
    Ok(report)
}

/// Trains the shared decoder and every cohort dataset's `E`, `Q` with the
/// backbone frozen. All cohort datasets must already be registered.
pub fn repurpose<T: Real>(model: &mut FormedModel<T>, cohort: &[TrainSet<'_, T>], cfg: &StageConfig) -> Result<TrainReport> {
    if model.stage != Stage::Pretrained {
        return Err(Error::Stage(format!("repurpose needs a pretrained model, this one is {}", model.stage)));
    }
    if cohort.is_empty() {
        return Err(Error::Empty("repurposing cohort"));
    }
    for s in cohort {
        model.registry.get_task(&s.name)?;
    }
    model.backbone.set_trainable(false);
    model.sda.set_trainable(true);
    model.registry.set_trainable(true);
    let report = fit(model, cohort, cfg, |_| Ok(()))?;
    model.stage = Stage::Repurposed;
    Ok(report)
}

/// Registers `spec` and trains only its fresh `E'`, `Q'`. On failure the new
/// entry is removed again.
pub fn adapt<T: Real>(model: &mut FormedModel<T>, spec: &DatasetSpec, data: &TrainSet<'_, T>, cfg: &StageConfig) -> Result<TrainReport> {
    if !matches!(model.stage, Stage::Repurposed | Stage::Adapted) {
        return Err(Error::Stage(format!("adapt needs a repurposed model, this one is {}", model.stage)));
    }
    if data.name != spec.name {
        return Err(Error::Config(format!("adapt data `{}` does not match dataset `{}`", data.name, spec.name)));
    }
    if model.registry.contains(&spec.name) {
        return Err(Error::DuplicateTask(spec.name.clone()));
    }
    let d = model.dim();
    model.registry.register_task(spec, d, cfg.seed, Stage::Adapted)?;
    let result = adapt_registered(model, spec, data, cfg);
    if result.is_err() {
        model.registry.remove(&spec.name)?;
    }
    result
}

fn adapt_registered<T: Real>(
    model: &mut FormedModel<T>,
    spec: &DatasetSpec,
    data: &TrainSet<'_, T>,
    cfg: &StageConfig,
) -> Result<TrainReport> {
    let budget = (spec.channels + spec.classes) * model.dim();
    model.backbone.set_trainable(false);
    model.sda.set_trainable(false);
    model.registry.set_trainable(false);
    model.registry.get_task_mut(&spec.name)?.set_trainable(true);
    let trainable = model.backbone.num_trainable() + model.sda.num_trainable() + model.registry.num_trainable();
    if trainable != budget {
        return Err(Error::Stage(format!("adapt would train {trainable} scalars, expected {budget}")));
    }
    let report = fit(model, core::slice::from_ref(data), cfg, |touched| {
        if touched != budget {
            return Err(Error::Stage(format!("optimizer touched {touched} scalars, expected {budget}")));
        }
        Ok(())
    })?;
    model.stage = Stage::Adapted;
    Ok(report)
}

/// Class probabilities (as `f64`) from cached features.
pub fn probabilities<T: Real>(sda: &SharedDecoder<T>, task: &TaskParams<T>, f: &Features<T>) -> Result<Vec<f64>> {
    Ok(classify_features(sda, task, f)?.probabilities.iter().map(|p| p.as_f64()).collect())
}

/// The six metrics for `examples` of dataset `name`.
pub fn evaluate_examples<T: Real>(model: &FormedModel<T>, name: &str, examples: &[(&Features<T>, usize)]) -> Result<Scores> {
    let task = model.registry.get_task(name)?;
    let probs = examples.iter().map(|(f, _)| probabilities(&model.sda, task, f)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = examples.iter().map(|&(_, y)| y).collect();
    metrics::evaluate(&probs, &labels, task.classes())
}

/// Few-shot learning curve: for each ratio and seed, subsample the training
/// split, adapt a copy of `model` from fresh `E'`, `Q'` and score it on the
/// unchanged test split. Validation data is used whole for early stopping.
pub fn few_shot_curve<T: Real>(
    model: &FormedModel<T>,
    spec: &DatasetSpec,
    train: &Labeled<T>,
    val: &Labeled<T>,
    test: &Labeled<T>,
    ratios: &[f64],
    seeds: &[u64],
    base: &StageConfig,
) -> Result<Vec<MetricReport>> {
    if ratios.is_empty() || seeds.is_empty() {
        return Err(Error::Config("few-shot curve needs at least one ratio and one seed".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("ratio {r} outside (0, 1]")));
    }
    let test_pairs = test.pairs();
    let mut out = Vec::with_capacity(ratios.len() * seeds.len());
    for &ratio in ratios {
        for &seed in seeds {
            let idx = subsample_indices(&train.labels, ratio, seed)?;
            let set = TrainSet { name: spec.name.clone(), train: train.select(&idx), val: val.pairs() };
            let mut m = model.clone();
            adapt(&mut m, spec, &set, &StageConfig { seed, ..*base })?;
            let scores = evaluate_examples(&m, &spec.name, &test_pairs)?;
            out.push(MetricReport::new(&spec.name, "test", seed, Some(ratio), scores));
        }
    }
    Ok(out)
}

/// FNV-1a over parameter names, shapes and little-endian values.
pub fn checksum<T: Real, M: Module<T> + ?Sized>(module: &M) -> u64 {
    let mut bytes = Vec::new();
    module.visit(&mut |p| {
        bytes.extend_from_slice(p.name().as_bytes());
        for &s in p.shape() {
            bytes.extend_from_slice(&(s as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&p.value().to_le_bytes());
    });
    rng::fnv1a(&bytes)
}

/// Named copies of every parameter value, for bitwise before/after checks.
pub fn snapshot<T: Real, M: Module<T> + ?Sized>(module: &M) -> Vec<(String, Tensor<T>)> {
    let mut out = vec![];
    module.visit(&mut |p| out.push((String::from(p.name()), p.value().clone())));
    out
}
