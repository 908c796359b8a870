//! Subcommand implementations. Each one validates its inputs before any
//! compute starts and writes its outputs under one directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use formed_core::backbone::{forecast_mse, pretrain_forecasting, BackboneConfig};
use formed_core::data::{
    make_synthetic_cohort, normalize, sinusoid_corpus, split_by_subject, Dataset, DatasetSpec, Sample, Split,
};
use formed_core::metrics::{aggregate_seeds, delta_report, MetricReport, METRIC_NAMES};
use formed_core::registry::Stage;
use formed_core::train::{adapt, repurpose, FormedModel, Labeled, TrainSet};
use formed_core::{DType, Real};

use crate::checkpoint::{peek_precision, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, write_dataset};
use crate::error::{CliError, Result};
use crate::parallel;
use crate::report::{self, DELTAS_CSV, DELTAS_SVG, FEWSHOT_CSV, FEWSHOT_SVG, REPORTS_CSV, SUMMARY_CSV};

pub const PRECISION_ENV: &str = "FORMED_PRECISION";

/// Precision requested through the environment, if any.
pub fn env_precision() -> Result<Option<DType>> {
    match std::env::var(PRECISION_ENV) {
        Err(_) => Ok(None),
        Ok(s) => DType::parse(s.trim())
            .map(Some)
            .ok_or_else(|| CliError::Config(format!("{PRECISION_ENV}={s} is not one of f32, f64"))),
    }
}

/// The checkpoint's precision, which must agree with the environment if set.
fn checkpoint_precision(ckpt: &Path) -> Result<DType> {
    let stored = peek_precision(ckpt)?;
    match env_precision()? {
        Some(p) if p != stored => Err(CliError::Config(format!(
            "{PRECISION_ENV}={p} but checkpoint {} stores {stored}",
            ckpt.display()
        ))),
        _ => Ok(stored),
    }
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>, default: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.output.dir.join(default))
}

/// One dataset split into train, validation and test samples.
pub struct Prepared {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Prepared {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn prepare(cfg: &RunConfig, ds: Dataset) -> Result<Prepared> {
    let split = split_by_subject(&ds.samples, cfg.data.split, cfg.data.split_seed)
        .map_err(|e| CliError::Data(format!("dataset `{}`: {e}", ds.spec.name)))?;
    let (mut train, mut val, mut test) = split.partition(&ds.samples);
    if cfg.data.normalize {
        for part in [&mut train, &mut val, &mut test] {
            normalize(part);
        }
    }
    Ok(Prepared { spec: ds.spec, train, val, test })
}

pub fn load_prepared(cfg: &RunConfig, name: &str) -> Result<Prepared> {
    let ds = load_dataset(&cfg.data.root.join(name))?;
    if ds.spec.name != name {
        return Err(CliError::Data(format!("directory `{name}` holds dataset `{}`", ds.spec.name)));
    }
    prepare(cfg, ds)
}

/// Cached features of every split.
pub struct Extracted<T> {
    pub spec: DatasetSpec,
    pub train: Labeled<T>,
    pub val: Labeled<T>,
    pub test: Labeled<T>,
}

pub fn extract_all<T: Real>(model: &FormedModel<T>, p: &Prepared) -> Result<Extracted<T>> {
    model.backbone.config.check_length(p.spec.length)?;
    Ok(Extracted {
        spec: p.spec.clone(),
        train: parallel::extract(&model.backbone, &p.train)?,
        val: parallel::extract(&model.backbone, &p.val)?,
        test: parallel::extract(&model.backbone, &p.test)?,
    })
}

fn print_reports(reports: &[MetricReport]) {
    println!("{:<12} {:<6} {:>5} {:>6} {}", "dataset", "split", "seed", "ratio", METRIC_NAMES.map(|m| format!("{m:>9}")).join(" "));
    for r in reports {
        let ratio = r.ratio.map(|x| x.to_string()).unwrap_or_default();
        let vals = r.scores.to_array().map(|v| format!("{v:>9.4}")).join(" ");
        println!("{:<12} {:<6} {:>5} {:>6} {vals}", r.dataset, r.split, r.seed, ratio);
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let synth = cfg.synth.as_ref().ok_or_else(|| CliError::Config("the config has no [synth] section".into()))?;
    let root = out.unwrap_or_else(|| cfg.data.root.clone());
    for ds in make_synthetic_cohort(&synth.specs()?, &synth.synth_config())? {
        let dir = root.join(&ds.spec.name);
        write_dataset(&dir, &ds)?;
        println!("wrote {} ({} samples) to {}", ds.spec.name, ds.samples.len(), dir.display());
    }
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    match env_precision()?.unwrap_or(DType::F64) {
        DType::F32 => pretrain_as::<f32>(cfg, out),
        DType::F64 => pretrain_as::<f64>(cfg, out),
    }
}

fn pretrain_as<T: Real>(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out_dir(cfg, out, "pretrained");
    let p = &cfg.pretrain;
    let config = BackboneConfig::from(cfg.backbone);
    let corpus = sinusoid_corpus(p.series, p.length, p.seed);
    let held_out = sinusoid_corpus(p.series.min(16), p.length, p.seed.wrapping_add(1));
    let (backbone, report) = pretrain_forecasting::<T>(&corpus, config, &p.to_config())?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        log::info!("pretrain epoch {}: loss {l:.6}", i + 1);
    }
    let mse = forecast_mse(&backbone, &held_out, 4, p.seed)?;
    println!("held-out forecast MSE: {mse:.6}");
    Checkpoint::pretrained(backbone, p.seed).save(&out)?;
    println!("saved pretrained checkpoint to {}", out.display());
    Ok(())
}

pub fn cmd_repurpose(cfg: &RunConfig, ckpt: &Path, seeds: Option<Vec<u64>>, out: Option<PathBuf>) -> Result<()> {
    match checkpoint_precision(ckpt)? {
        DType::F32 => repurpose_as::<f32>(cfg, ckpt, seeds, out),
        DType::F64 => repurpose_as::<f64>(cfg, ckpt, seeds, out),
    }
}

fn repurpose_as<T: Real>(cfg: &RunConfig, ckpt: &Path, seeds: Option<Vec<u64>>, out: Option<PathBuf>) -> Result<()> {
    let out = out_dir(cfg, out, "repurpose");
    let seeds = seeds.unwrap_or_else(|| cfg.repurpose.seeds.clone());
    if cfg.data.cohort.is_empty() {
        return Err(CliError::Config("data.cohort lists no datasets".into()));
    }
    let base = Checkpoint::<T>::load(ckpt)?;
    if base.stage != Stage::Pretrained {
        return Err(CliError::Stage(format!("repurpose needs a pretrained checkpoint, {} is {}", ckpt.display(), base.stage)));
    }
    let prepared = cfg.data.cohort.iter().map(|n| load_prepared(cfg, n)).collect::<Result<Vec<_>>>()?;
    let template = base.into_model(cfg.sda_heads(), 0)?;
    let data = prepared.iter().map(|p| extract_all(&template, p)).collect::<Result<Vec<_>>>()?;
    let specs: Vec<DatasetSpec> = data.iter().map(|d| d.spec.clone()).collect();

    let runs = seeds
        .par_iter()
        .map(|&seed| -> Result<(FormedModel<T>, Vec<MetricReport>)> {
            let mut model = FormedModel::new(template.backbone.clone(), cfg.sda_heads(), seed)?;
            model.register_cohort(&specs, seed)?;
            let sets: Vec<TrainSet<T>> = data.iter().map(|d| TrainSet::new(&d.spec.name, &d.train, &d.val)).collect();
            let rep = repurpose(&mut model, &sets, &cfg.repurpose.stage_config(seed))?;
            log::info!("seed {seed}: {} epochs, best {}", rep.epochs_run, rep.best_epoch);
            let mut reports = Vec::new();
            for d in &data {
                for (split, lab) in [("val", &d.val), ("test", &d.test)] {
                    let scores = parallel::evaluate(&model, &d.spec.name, lab)?;
                    reports.push(MetricReport::new(&d.spec.name, split, seed, None, scores));
                }
            }
            Ok((model, reports))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::new();
    for ((model, r), &seed) in runs.into_iter().zip(&seeds) {
        Checkpoint::from_model(&model, seed).save(&out.join("checkpoints").join(format!("seed-{seed}")))?;
        reports.extend(r);
    }
    print_reports(&reports);
    write_reports(&out, &reports)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Writes `reports.csv` plus the derived deltas, summary and plot.
fn write_reports(out: &Path, reports: &[MetricReport]) -> Result<()> {
    report::write_reports(&out.join(REPORTS_CSV), reports)?;
    let deltas = deltas_of(reports)?;
    report::write_reports(&out.join(DELTAS_CSV), &deltas)?;
    let mut all = reports.to_vec();
    all.extend(deltas.iter().cloned());
    report::write_summary(&out.join(SUMMARY_CSV), &aggregate_seeds(&all))?;
    report::write_svg(&out.join(DELTAS_SVG), &report::deltas_svg(&deltas))
}

/// Test minus validation for every `(dataset, seed, ratio)` with both rows.
pub fn deltas_of(reports: &[MetricReport]) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for v in reports.iter().filter(|r| r.split == "val") {
        if let Some(t) = reports
            .iter()
            .find(|t| t.split == "test" && t.dataset == v.dataset && t.seed == v.seed && t.ratio == v.ratio)
        {
            out.push(delta_report(v, t)?);
        }
    }
    Ok(out)
}

pub struct AdaptArgs {
    pub dataset: String,
    pub ratios: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
}

pub fn cmd_adapt(cfg: &RunConfig, ckpt: &Path, args: AdaptArgs) -> Result<()> {
    match checkpoint_precision(ckpt)? {
        DType::F32 => adapt_as::<f32>(cfg, ckpt, args),
        DType::F64 => adapt_as::<f64>(cfg, ckpt, args),
    }
}

fn adapt_as<T: Real>(cfg: &RunConfig, ckpt: &Path, args: AdaptArgs) -> Result<()> {
    let out = out_dir(cfg, args.out, &format!("adapt-{}", args.dataset));
    let seeds = args.seeds.unwrap_or_else(|| cfg.adapt.seeds.clone());
    let ratios = args.ratios.or_else(|| cfg.adapt.ratios.clone());
    if let Some(r) = ratios.as_ref().and_then(|rs| rs.iter().find(|r| !(**r > 0.0 && **r <= 1.0))) {
        return Err(CliError::Config(format!("ratio {r} outside (0, 1]")));
    }
    let ck = Checkpoint::<T>::load(ckpt)?;
    if !matches!(ck.stage, Stage::Repurposed | Stage::Adapted) {
        return Err(CliError::Stage(format!("adapt needs a repurposed checkpoint, {} is {}", ckpt.display(), ck.stage)));
    }
    if ck.registry.contains(&args.dataset) {
        return Err(CliError::Stage(format!("task `{}` is already registered in {}", args.dataset, ckpt.display())));
    }
    let model = ck.into_model(cfg.sda_heads(), 0)?;
    let p = load_prepared(cfg, &args.dataset)?;
    let d = extract_all(&model, &p)?;

    if let Some(ratios) = ratios {
        let base = cfg.adapt.stage_config(0);
        let reports = parallel::few_shot(&model, &d.spec, &d.train, &d.val, &d.test, &ratios, &seeds, &base)?;
        print_reports(&reports);
        report::write_reports(&out.join(FEWSHOT_CSV), &reports)?;
        let agg = aggregate_seeds(&reports);
        report::write_summary(&out.join(SUMMARY_CSV), &agg)?;
        report::write_svg(&out.join(FEWSHOT_SVG), &report::fewshot_svg(&agg))?;
        println!("wrote {}", out.display());
        return Ok(());
    }

    let runs = seeds
        .par_iter()
        .map(|&seed| -> Result<(FormedModel<T>, Vec<MetricReport>)> {
            let mut m = model.clone();
            let set = TrainSet::new(&d.spec.name, &d.train, &d.val);
            let rep = adapt(&mut m, &d.spec, &set, &cfg.adapt.stage_config(seed))?;
            log::info!("seed {seed}: {} epochs, {} trainable scalars", rep.epochs_run, rep.trainable);
            let mut reports = Vec::new();
            for (split, lab) in [("val", &d.val), ("test", &d.test)] {
                reports.push(MetricReport::new(&d.spec.name, split, seed, None, parallel::evaluate(&m, &d.spec.name, lab)?));
            }
            Ok((m, reports))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    for ((m, r), &seed) in runs.into_iter().zip(&seeds) {
        Checkpoint::from_model(&m, seed).save(&out.join("checkpoints").join(format!("seed-{seed}")))?;
        reports.extend(r);
    }
    print_reports(&reports);
    write_reports(&out, &reports)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, dataset: &str, split: Split, out: Option<PathBuf>) -> Result<()> {
    match checkpoint_precision(ckpt)? {
        DType::F32 => eval_as::<f32>(cfg, ckpt, dataset, split, out),
        DType::F64 => eval_as::<f64>(cfg, ckpt, dataset, split, out),
    }
}

fn eval_as<T: Real>(cfg: &RunConfig, ckpt: &Path, dataset: &str, split: Split, out: Option<PathBuf>) -> Result<()> {
    let out = out_dir(cfg, out, "eval");
    let ck = Checkpoint::<T>::load(ckpt)?;
    let seed = ck.seed;
    if ck.stage == Stage::Pretrained {
        return Err(CliError::Stage(format!("{} is a pretrained checkpoint with no classifier", ckpt.display())));
    }
    let model = ck.into_model(cfg.sda_heads(), 0)?;
    let entry = model.registry.entry(dataset)?;
    let p = load_prepared(cfg, dataset)?;
    if p.spec.channels != entry.spec.channels || p.spec.classes != entry.spec.classes {
        return Err(CliError::Data(format!(
            "dataset `{dataset}` has C={} K={} but the task was trained with C={} K={}",
            p.spec.channels, p.spec.classes, entry.spec.channels, entry.spec.classes
        )));
    }
    let samples = p.split(split);
    if samples.is_empty() {
        return Err(CliError::Data(format!("dataset `{dataset}`: the {} split is empty", split.name())));
    }
    let data = parallel::extract(&model.backbone, samples)?;
    let scores = parallel::evaluate(&model, dataset, &data)?;
    let reports = [MetricReport::new(dataset, split.name(), seed, None, scores)];
    print_reports(&reports);
    report::write_reports(&out.join(REPORTS_CSV), &reports)?;
    Ok(())
}

/// Rebuilds deltas, summary and plots from the CSV files in `dir`.
pub fn cmd_report(dir: &Path) -> Result<()> {
    let reports_path = dir.join(REPORTS_CSV);
    let fewshot_path = dir.join(FEWSHOT_CSV);
    let mut found = false;
    if reports_path.exists() {
        write_reports(dir, &report::read_reports(&reports_path)?)?;
        found = true;
    }
    if fewshot_path.exists() {
        let fs = report::read_reports(&fewshot_path)?;
        let agg = aggregate_seeds(&fs);
        if !reports_path.exists() {
            report::write_summary(&dir.join(SUMMARY_CSV), &agg)?;
        }
        report::write_svg(&dir.join(FEWSHOT_SVG), &report::fewshot_svg(&agg))?;
        found = true;
    }
    if !found {
        return Err(CliError::Data(format!("{} holds neither {REPORTS_CSV} nor {FEWSHOT_CSV}", dir.display())));
    }
    println!("rebuilt reports in {}", dir.display());
    Ok(())
}
