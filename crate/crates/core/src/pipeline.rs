//! Train-then-evaluate for one seed, and the ablation sweep built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::LabelSubset;
use crate::error::Result;
use crate::metrics::{EvalOptions, MetricsReport};
use crate::models::{DiscriminatorModel, RecognizerModel};
use crate::synthgen::Dataset;
use crate::trainer::{init_models, train, ModelConfig, TrainConfig, TrainLog, TrainObserver};

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub recognizer: RecognizerModel,
    pub discriminator: DiscriminatorModel,
    pub log: TrainLog,
    pub report: MetricsReport,
}

/// Predictions of `model` on every sample of `data`, in order.
pub fn predict_dataset(model: &RecognizerModel, data: &Dataset) -> Result<Vec<crate::labels::LabelBundle>> {
    model.predict_bundles(&data.all_features()?)
}

pub fn evaluate(
    model: &RecognizerModel,
    data: &Dataset,
    opts: &EvalOptions,
    config_hash: &str,
) -> Result<MetricsReport> {
    let preds = predict_dataset(model, data)?;
    MetricsReport::evaluate(&preds, &data.all_labels(), data.layout.mode, opts, config_hash)
}

/// Initializes models from `cfg.seed`, trains on `train_set` and evaluates
/// on `test_set`.
pub fn run_seed(
    train_set: &Dataset,
    test_set: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalOptions,
    observer: &mut dyn TrainObserver,
) -> Result<SeedRun> {
    let (mut rec, mut disc) = init_models(train_set, model, cfg.subset, cfg.seed)?;
    let log = train(train_set, &mut rec, &mut disc, cfg, observer)?;
    let report = evaluate(&rec, test_set, eval, &log.config_hash)?;
    Ok(SeedRun {
        seed: cfg.seed,
        recognizer: rec,
        discriminator: disc,
        log,
        report,
    })
}

/// Median and interquartile range of one metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear-interpolated quantile of already sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn spread(values: &[f64]) -> Option<Spread> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Spread {
        median: quantile(&v, 0.5),
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
    })
}

/// Runs every `(subset, seed)` pair in parallel and returns the runs grouped
/// by subset, seeds in the given order.
pub fn ablate(
    train_set: &Dataset,
    test_set: &Dataset,
    model: &ModelConfig,
    base: &TrainConfig,
    eval: &EvalOptions,
    subsets: &[LabelSubset],
    seeds: &[u64],
) -> Result<Vec<(LabelSubset, Vec<SeedRun>)>> {
    let jobs: Vec<(LabelSubset, u64)> = subsets
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&k| (s, k)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(subset, seed)| {
            let cfg = TrainConfig {
                subset,
                seed,
                ..base.clone()
            };
            run_seed(train_set, test_set, model, &cfg, eval, &mut ())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = runs.into_iter();
    Ok(subsets
        .iter()
        .map(|&s| (s, it.by_ref().take(seeds.len()).collect()))
        .collect())
}
