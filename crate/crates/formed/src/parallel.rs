//! Multi-threaded wrappers around the core routines. Outputs keep input order
//! so results do not depend on the thread count.

use rayon::prelude::*;

use formed_core::backbone::Backbone;
use formed_core::data::{DatasetSpec, Sample};
use formed_core::metrics::{MetricReport, Scores};
use formed_core::train::{few_shot_curve, probabilities, FormedModel, Labeled, StageConfig};
use formed_core::{metrics, Real};

use crate::error::{CliError, Result};

/// Builds the global pool; `None` keeps rayon's default.
pub fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // A second call in the same process fails harmlessly.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    Ok(())
}

pub fn extract<T: Real>(backbone: &Backbone<T>, samples: &[Sample]) -> Result<Labeled<T>> {
    let features = samples
        .par_iter()
        .map(|s| {
            let values: Vec<T> = s.values.iter().map(|&v| T::from_f64(v)).collect();
            backbone.extract_features(&values, &s.missing, s.channels)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Labeled { features, labels: samples.iter().map(|s| s.label).collect() })
}

/// Class probabilities for every example, in order.
pub fn predict<T: Real>(model: &FormedModel<T>, name: &str, data: &Labeled<T>) -> Result<Vec<Vec<f64>>> {
    let task = model.registry.get_task(name)?;
    Ok(data
        .features
        .par_iter()
        .map(|f| probabilities(&model.sda, task, f))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn evaluate<T: Real>(model: &FormedModel<T>, name: &str, data: &Labeled<T>) -> Result<Scores> {
    if data.is_empty() {
        return Err(CliError::Data(format!("dataset `{name}`: nothing to evaluate")));
    }
    let probs = predict(model, name, data)?;
    let classes = model.registry.get_task(name)?.classes();
    Ok(metrics::evaluate(&probs, &data.labels, classes)?)
}

/// The few-shot curve with every `(ratio, seed)` run on its own thread.
#[allow(clippy::too_many_arguments)]
pub fn few_shot<T: Real>(
    model: &FormedModel<T>,
    spec: &DatasetSpec,
    train: &Labeled<T>,
    val: &Labeled<T>,
    test: &Labeled<T>,
    ratios: &[f64],
    seeds: &[u64],
    base: &StageConfig,
) -> Result<Vec<MetricReport>> {
    let runs: Vec<(f64, u64)> = ratios.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let out = runs
        .par_iter()
        .map(|&(r, s)| few_shot_curve(model, spec, train, val, test, &[r], &[s], base))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(out.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use formed_core::backbone::BackboneConfig;
    use formed_core::data::{make_synthetic_dataset, SynthConfig};
    use formed_core::nn::TaskKind;

    #[test]
    fn parallel_extraction_matches_serial() {
        let cfg = BackboneConfig { patch_size: 4, model_dim: 8, layers: 1, heads: 2, max_patches: 8, horizon: 4 };
        let bb = Backbone::<f64>::new(cfg, 1).unwrap();
        let spec = DatasetSpec::new("X", 2, 16, 3, TaskKind::Multiclass, 1.0);
        let synth = SynthConfig { snr: 5.0, subjects_per_dataset: 3, samples_per_subject: 4, seed: 0 };
        let ds = make_synthetic_dataset(&spec, &synth).unwrap();
        assert_eq!(extract(&bb, &ds.samples).unwrap(), Labeled::extract(&bb, &ds.samples).unwrap());
    }
}
