//! Dataset preparation, per-seed runs and on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use mtal_core::adversary::LabelSubset;
use mtal_core::checkpoint;
use mtal_core::hash::short_digest;
use mtal_core::metrics::{cumulative_error_curve, per_sample_nme, MetricsReport};
use mtal_core::pipeline::{evaluate, predict_dataset, spread, Spread};
use mtal_core::synthgen::{generate, read_dataset, split, write_dataset, Dataset};
use mtal_core::trainer::{init_models, train, TrainEvent};
use mtal_core::{DiscriminatorModel, RecognizerModel, TaskMode};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Failure classes that map to distinct exit statuses.
#[derive(Debug)]
pub enum Failure {
    /// Bad config, missing input, unusable dataset: nothing was run.
    Input(anyhow::Error),
    /// A run started and failed.
    Run(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Run(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Run(e) => e,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

pub fn input<T>(r: anyhow::Result<T>) -> CliResult<T> {
    r.map_err(Failure::Input)
}

/// Resolved config plus its train/test data.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let f = fs::File::open(path).with_context(|| format!("dataset {} not found or unreadable", path.display()))?;
    read_dataset(BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))
}

pub fn prepare(config: ExperimentConfig) -> CliResult<Prepared> {
    input((|| {
        let (train, test) = match &config.data.path {
            Some(p) => split(&load_dataset(p)?, config.data.train_fraction, config.data.split_seed)?,
            None => {
                config.world.validate().context("world")?;
                (
                    generate(&config.world, config.data.train_samples, config.data.train_seed)?,
                    generate(&config.world, config.data.test_samples, config.data.test_seed)?,
                )
            }
        };
        let config = config.resolve(train.layout.mode)?;
        Ok(Prepared { config, train, test })
    })())
}

pub fn dataset_digest(ds: &Dataset) -> String {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf).expect("in-memory write");
    short_digest(&buf)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(contents.as_ref())?;
    Ok(())
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Writes the snapshot files shared by every seed of a run.
fn write_run_header(p: &Prepared, out: &Path) -> anyhow::Result<String> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hash = p.config.hash();
    let mut snapshot = format!("# config_hash={hash}\n");
    snapshot.push_str(&p.config.to_toml());
    write(&out.join("config.resolved.toml"), snapshot)?;
    write(
        &out.join("dataset_hash.txt"),
        format!(
            "config={hash}\nworld={}\ntrain={}\ntest={}\n",
            p.train.world_hash,
            dataset_digest(&p.train),
            dataset_digest(&p.test)
        ),
    )?;
    Ok(hash)
}

fn ced_csv(model: &RecognizerModel, p: &Prepared, hash: &str) -> anyhow::Result<String> {
    let preds = predict_dataset(model, &p.test)?;
    let truths = p.test.all_labels();
    let sizes = truths
        .iter()
        .map(|t| p.config.eval.normalizer.face_size(p.config.eval.face_box, t))
        .collect::<mtal_core::Result<Vec<_>>>()?;
    let errs: Vec<f64> = per_sample_nme(&preds, &truths, &sizes)?.into_iter().flatten().collect();
    let mut s = format!("# config_hash={hash}\nnme_percent,fraction\n");
    for [e, f] in cumulative_error_curve(&errs) {
        s.push_str(&format!("{e},{f}\n"));
    }
    Ok(s)
}

/// Trains and evaluates one seed, writing its artifacts under `dir`.
fn run_one_seed(p: &Prepared, hash: &str, seed: u64, dir: &Path) -> anyhow::Result<MetricsReport> {
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(dir)?;
    let mut cfg = p.config.train.clone();
    cfg.seed = seed;
    let (mut rec, mut disc) = init_models(&p.train, &p.config.model, cfg.subset, seed)?;
    let mut trace = String::new();
    let mut observer = |ev: &TrainEvent, r: &RecognizerModel, d: &DiscriminatorModel| -> mtal_core::Result<()> {
        match ev {
            TrainEvent::Checkpoint { step } => {
                fs::create_dir_all(&ckpt_dir)?;
                checkpoint::save_recognizer(&ckpt_dir.join(format!("step-{step}-recognizer.mtal")), r, hash)?;
                checkpoint::save_discriminator(&ckpt_dir.join(format!("step-{step}-discriminator.mtal")), d, hash)?;
            }
            TrainEvent::Evaluate { step } => {
                let report = evaluate(r, &p.test, &p.config.eval, hash)?;
                let line = serde_json::json!({ "step": step, "report": report });
                trace.push_str(&line.to_string());
                trace.push('\n');
            }
            _ => {}
        }
        Ok(())
    };
    let result = train(&p.train, &mut rec, &mut disc, &cfg, &mut observer);
    if !trace.is_empty() {
        write(&dir.join("eval_trace.jsonl"), &trace)?;
    }
    let mut log = result.with_context(|| format!("seed {seed}"))?;
    log.config_hash = hash.to_string();
    write(&dir.join("trainlog.csv"), log.to_csv())?;
    checkpoint::save_recognizer(&dir.join("recognizer.mtal"), &rec, hash)?;
    checkpoint::save_discriminator(&dir.join("discriminator.mtal"), &disc, hash)?;
    let report = evaluate(&rec, &p.test, &p.config.eval, hash)?;
    write(&dir.join("metrics.json"), report.to_json())?;
    if p.test.layout.mode == TaskMode::Landmark {
        write(&dir.join("ced.csv"), ced_csv(&rec, p, hash)?)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub subset: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Spread>,
}

impl Summary {
    pub fn from_reports(hash: &str, subset: LabelSubset, seeds: &[u64], reports: &[MetricsReport]) -> Self {
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in reports {
            for (k, v) in r.scalars() {
                columns.entry(k).or_default().push(v);
            }
        }
        Summary {
            config_hash: hash.to_string(),
            subset: subset.name().to_string(),
            seeds: seeds.to_vec(),
            metrics: columns
                .into_iter()
                .filter_map(|(k, v)| spread(&v).map(|s| (k, s)))
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# config_hash={}\nmetric,median,q1,q3\n", self.config_hash);
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k},{},{},{}\n", v.median, v.q1, v.q3));
        }
        s
    }
}

/// Trains every configured seed in parallel. On any failure the completed
/// artifacts stay on disk next to a `FAILED` marker.
pub fn run_experiment(p: &Prepared, out: &Path) -> CliResult<Summary> {
    let hash = write_run_header(p, out).map_err(Failure::Run)?;
    let seeds = &p.config.seeds;
    let results: Vec<anyhow::Result<MetricsReport>> = seeds
        .par_iter()
        .map(|&s| run_one_seed(p, &hash, s, &seed_dir(out, s)))
        .collect();
    let failures: Vec<String> = results
        .iter()
        .zip(seeds)
        .filter_map(|(r, s)| r.as_ref().err().map(|e| format!("seed {s}: {e:#}")))
        .collect();
    if !failures.is_empty() {
        let msg = failures.join("\n");
        let _ = write(&out.join("FAILED"), format!("{msg}\n"));
        return Err(Failure::Run(anyhow::anyhow!(msg)));
    }
    let reports: Vec<MetricsReport> = results.into_iter().map(|r| r.expect("checked")).collect();
    let summary = Summary::from_reports(&hash, p.config.train.subset, seeds, &reports);
    write(&out.join("summary.json"), json(&summary)).map_err(Failure::Run)?;
    write(&out.join("summary.csv"), summary.to_csv()).map_err(Failure::Run)?;
    Ok(summary)
}

/// One experiment per subset under `out/<subset>/`, plus a side-by-side
/// table of medians.
pub fn run_ablation(p: &Prepared, out: &Path) -> CliResult<Vec<Summary>> {
    let mut summaries = Vec::new();
    let mut failed = Vec::new();
    for &subset in &p.config.ablate_subsets {
        let mut config = p.config.clone();
        config.train.subset = subset;
        let sub = Prepared {
            config,
            train: p.train.clone(),
            test: p.test.clone(),
        };
        match run_experiment(&sub, &out.join(subset.name())) {
            Ok(s) => summaries.push(s),
            Err(e) => failed.push(format!("{}: {:#}", subset.name(), e.error())),
        }
    }
    if !failed.is_empty() {
        let msg = failed.join("\n");
        let _ = write(&out.join("FAILED"), format!("{msg}\n"));
        return Err(Failure::Run(anyhow::anyhow!(msg)));
    }
    let metrics: Vec<&String> = summaries
        .first()
        .map(|s| s.metrics.keys().collect())
        .unwrap_or_default();
    let mut csv = String::from("subset,config_hash");
    for m in &metrics {
        csv.push_str(&format!(",{m}"));
    }
    csv.push('\n');
    for s in &summaries {
        csv.push_str(&format!("{},{}", s.subset, s.config_hash));
        for m in &metrics {
            csv.push_str(&format!(
                ",{}",
                s.metrics.get(*m).map(|v| v.median.to_string()).unwrap_or_default()
            ));
        }
        csv.push('\n');
    }
    write(&out.join("ablation.csv"), csv).map_err(Failure::Run)?;
    write(&out.join("ablation.json"), json(&summaries)).map_err(Failure::Run)?;
    Ok(summaries)
}

/// Evaluates a saved recognizer on the prepared test split; the returned
/// JSON is what `eval` prints.
pub fn eval_checkpoint(p: &Prepared, checkpoint_path: &Path) -> CliResult<String> {
    let (model, hash) = input(
        checkpoint::load_recognizer(checkpoint_path).with_context(|| format!("loading {}", checkpoint_path.display())),
    )?;
    if model.layout() != &p.test.layout || model.input_width() != p.test.feature_width {
        return Err(Failure::Input(anyhow::anyhow!(
            "checkpoint {} does not match the configured dataset",
            checkpoint_path.display()
        )));
    }
    let report = evaluate(&model, &p.test, &p.config.eval, &hash).map_err(|e| Failure::Run(e.into()))?;
    Ok(report.to_json())
}

/// Writes the train/test datasets and their digests.
pub fn generate_datasets(p: &Prepared, out: &Path) -> CliResult<()> {
    (|| {
        fs::create_dir_all(out)?;
        for (name, ds) in [("train.tsv", &p.train), ("test.tsv", &p.test)] {
            let f = fs::File::create(out.join(name))?;
            write_dataset(ds, std::io::BufWriter::new(f))?;
        }
        write_run_header(p, out)?;
        Ok(())
    })()
    .map_err(Failure::Run)
}

/// Collects every `metrics.json` below `root` into `report.csv` and
/// `report.json`, one row per run directory.
pub fn aggregate_reports(root: &Path) -> CliResult<usize> {
    let mut found = Vec::new();
    collect_metrics(root, root, &mut found).map_err(Failure::Input)?;
    if found.is_empty() {
        return Err(Failure::Input(anyhow::anyhow!(
            "no metrics.json found under {}",
            root.display()
        )));
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    let mut columns: Vec<String> = Vec::new();
    for (_, r) in &found {
        for (k, _) in r.csv_fields() {
            if !columns.contains(&k) {
                columns.push(k);
            }
        }
    }
    let mut csv = format!("run,{}\n", columns.join(","));
    for (run, r) in &found {
        let fields: BTreeMap<String, String> = r.csv_fields().into_iter().collect();
        let row: Vec<String> = columns
            .iter()
            .map(|c| fields.get(c).cloned().unwrap_or_default())
            .collect();
        csv.push_str(&format!("{run},{}\n", row.join(",")));
    }
    let entries: Vec<serde_json::Value> = found
        .iter()
        .map(|(run, r)| serde_json::json!({ "run": run, "report": r }))
        .collect();
    (|| {
        write(&root.join("report.csv"), csv)?;
        write(&root.join("report.json"), json(&entries))
    })()
    .map_err(Failure::Run)?;
    Ok(found.len())
}

fn collect_metrics(root: &Path, dir: &Path, out: &mut Vec<(String, MetricsReport)>) -> anyhow::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_metrics(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.json") {
            let report: MetricsReport = serde_json::from_str(&fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            let run = path
                .parent()
                .and_then(|p| p.strip_prefix(root).ok())
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            out.push((run, report));
        }
    }
    Ok(())
}
