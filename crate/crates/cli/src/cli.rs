//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mtal_core::adversary::LabelSubset;

use crate::config::ExperimentConfig;
use crate::run::{self, input, CliResult, Failure};

#[derive(Debug, Parser)]
#[command(name = "mtal", version, about = "Multi-task adversarial learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or split) the train/test datasets and write them as files.
    Gen(Common),
    /// Train and evaluate every seed for one label subset.
    Train(Common),
    /// Evaluate a saved recognizer on the configured test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Recognizer checkpoint (MTAL1).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep label subsets over shared seeds.
    Ablate(Common),
    /// Aggregate every metrics.json under the output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed to run; repeat for several. Overrides the config's list.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory (for `eval`: file to write the metrics JSON to).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Label subset: none, l, lv, lvg, lvp, all, attr.
    #[arg(long)]
    pub subset: Option<LabelSubset>,
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if let Some(s) = self.subset {
            c.train.subset = s;
            c.ablate_subsets = vec![s];
        }
        Ok(c)
    }

    fn prepare(&self) -> CliResult<run::Prepared> {
        let mut c = input(self.config())?;
        if let Some(out) = &self.out {
            c.out_dir = out.clone();
        }
        run::prepare(c)
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MTAL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("MTAL_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    input(configure_threads())?;
    match cli.command {
        Command::Gen(c) => {
            let p = c.prepare()?;
            let out = p.config.out_dir.clone();
            run::generate_datasets(&p, &out)?;
            println!("wrote datasets to {}", out.display());
        }
        Command::Train(c) => {
            let p = c.prepare()?;
            let out = p.config.out_dir.clone();
            let s = run::run_experiment(&p, &out)?;
            println!("{}", summary_line(&s));
        }
        Command::Ablate(c) => {
            let p = c.prepare()?;
            let out = p.config.out_dir.clone();
            for s in run::run_ablation(&p, &out)? {
                println!("{}", summary_line(&s));
            }
        }
        Command::Eval { common, checkpoint } => {
            let file_out = common.out.clone();
            let p = run::prepare(input(common.config())?)?;
            let text = run::eval_checkpoint(&p, &checkpoint)?;
            match file_out {
                Some(path) => std::fs::write(&path, &text)
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(Failure::Run)?,
                None => print!("{text}"),
            }
        }
        Command::Report { out } => {
            let n = run::aggregate_reports(&out)?;
            println!("aggregated {n} reports into {}", out.join("report.csv").display());
        }
    }
    Ok(())
}

fn summary_line(s: &run::Summary) -> String {
    let get = |k: &str| {
        s.metrics
            .get(k)
            .map(|v| format!("{:.4}", v.median))
            .unwrap_or_else(|| "-".into())
    };
    format!(
        "subset={} config={} seeds={} median_nme%={} median_js={} median_attr_acc={}",
        s.subset,
        s.config_hash,
        s.seeds.len(),
        get("nme_percent"),
        get("combo_js_divergence"),
        get("mean_attribute_accuracy")
    )
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            f.exit_code()
        }
    }
}
