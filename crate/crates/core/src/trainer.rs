//! Alternating minibatch optimization: `k` discriminator updates, then one
//! recognizer update, repeated for `K` outer steps.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    assemble_combo_batch, assemble_combo_vars, loss_adv_recognizer, loss_discriminator, loss_recognizer_total,
    LabelSubset,
};
use crate::diffcore::{Sgd, Tape, Tensor};
use crate::error::{Error, Result};
use crate::labels::{BundleBatch, TaskMode};
use crate::losses::{self, LossWeights, TaskLossValues};
use crate::models::{DiscriminatorModel, RecognizerModel, Standardizer};
use crate::synthgen::Dataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every batch drawn uniformly with replacement.
    #[default]
    WithReplacement,
    /// Consecutive slices of a reshuffled permutation.
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub lr_recognizer: f64,
    pub lr_discriminator: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub subset: LabelSubset,
    pub seed: u64,
    pub sampling: Sampling,
    /// Draw the discriminator's feature and label batches from the same
    /// indices instead of independently.
    pub paired_discriminator_batches: bool,
    /// Outer-step cadence of evaluation events; 0 disables.
    pub eval_every: usize,
    /// Outer-step cadence of checkpoint events; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            outer_steps: 5000,
            inner_steps: 1,
            lr_recognizer: 0.05,
            lr_discriminator: 0.01,
            momentum: 0.0,
            weights: LossWeights::default(),
            subset: LabelSubset::All,
            seed: 0,
            sampling: Sampling::WithReplacement,
            paired_discriminator_batches: false,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.outer_steps == 0 {
            return Err(Error::config("outer_steps must be >= 1"));
        }
        for (name, lr) in [
            ("lr_recognizer", self.lr_recognizer),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(format!("{name} must be finite and > 0, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        self.weights.validate()
    }

    /// Inner steps actually run: subset "none" disables the discriminator.
    pub fn effective_inner_steps(&self) -> usize {
        if self.subset.is_none() {
            0
        } else {
            self.inner_steps
        }
    }

    /// Weight of the adversarial term actually used.
    pub fn effective_adversarial_weight(&self) -> f64 {
        if self.subset.is_none() {
            0.0
        } else {
            self.weights.adversarial
        }
    }
}

/// Shapes of the two networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub trunk: Vec<usize>,
    pub discriminator_hidden: [usize; 2],
    /// Fit a per-feature standardizer on the training features.
    pub standardize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            trunk: vec![128, 128],
            discriminator_hidden: [64, 32],
            standardize: true,
        }
    }
}

const STREAM_SAMPLER: u64 = 0;
const STREAM_RECOGNIZER: u64 = 1;
const STREAM_DISCRIMINATOR: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seeded initial models for `data`. The recognizer and discriminator draw
/// from separate streams, so the recognizer's initial weights do not depend
/// on the subset.
pub fn init_models(
    data: &Dataset,
    model: &ModelConfig,
    subset: LabelSubset,
    seed: u64,
) -> Result<(RecognizerModel, DiscriminatorModel)> {
    let layout = data.layout;
    subset.check_mode(layout.mode)?;
    let mut rec = RecognizerModel::new(
        data.feature_width,
        &model.trunk,
        layout,
        &mut stream(seed, STREAM_RECOGNIZER),
    )?;
    if model.standardize {
        rec.set_standardizer(Standardizer::fit(&data.all_features()?))?;
    }
    let width = if subset.is_none() {
        1
    } else {
        subset.combo_width(&layout)
    };
    let disc = DiscriminatorModel::new(
        width,
        model.discriminator_hidden,
        &mut stream(seed, STREAM_DISCRIMINATOR),
    )?;
    Ok((rec, disc))
}

/// Reproducible index batches over `n` samples.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    mode: Sampling,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, mode: Sampling, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset("cannot sample from an empty training set".into()));
        }
        if batch == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(BatchSampler {
            n,
            batch,
            mode,
            rng: stream(seed, STREAM_SAMPLER),
            perm: (0..n).collect(),
            pos: n,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        match self.mode {
            Sampling::WithReplacement => (0..self.batch).map(|_| self.rng.random_range(0..self.n)).collect(),
            Sampling::Epoch => {
                let mut out = Vec::with_capacity(self.batch);
                while out.len() < self.batch {
                    if self.pos == self.n {
                        self.perm.shuffle(&mut self.rng);
                        self.pos = 0;
                    }
                    out.push(self.perm[self.pos]);
                    self.pos += 1;
                }
                out
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorStep {
    pub loss: f64,
    /// Fraction of real combos scored above 0.5 and fakes at or below it.
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecognizerStep {
    pub supervised: TaskLossValues,
    /// `L_adv^R` on the step's batch; `None` when no discriminator is in play.
    pub adversarial: Option<f64>,
    pub total: f64,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}: {v}")))
    }
}

/// One SGD step on the discriminator over explicit real and fake combos.
pub fn discriminator_step_on_combos(
    disc: &mut DiscriminatorModel,
    real: &Tensor,
    fake: &Tensor,
    opt: &mut Sgd,
) -> Result<DiscriminatorStep> {
    let mut tape = Tape::new();
    let params = disc.bind(&mut tape, true);
    let r = tape.constant(real);
    let f = tape.constant(fake);
    let d_real = disc.forward_bound(&mut tape, &params, r)?;
    let d_fake = disc.forward_bound(&mut tape, &params, f)?;
    let loss = loss_discriminator(&mut tape, d_real, d_fake);
    let value = finite(tape.scalar(loss)?, "discriminator loss")?;
    let hits = tape.value(d_real).iter().filter(|&&p| p > 0.5).count()
        + tape.value(d_fake).iter().filter(|&&p| p <= 0.5).count();
    let accuracy = hits as f64 / (real.rows() + fake.rows()) as f64;
    let grads = tape.backward(loss)?;
    disc.accumulate_grads(&grads, &params)?;
    opt.step(&mut disc.params_mut())?;
    Ok(DiscriminatorStep { loss: value, accuracy })
}

/// Updates only the discriminator. Fakes come from a fresh, detached
/// recognizer pass over `features`; real combos come from `labels`.
pub fn update_discriminator_step(
    recognizer: &RecognizerModel,
    disc: &mut DiscriminatorModel,
    features: &Tensor,
    labels: &BundleBatch,
    subset: LabelSubset,
    opt: &mut Sgd,
) -> Result<DiscriminatorStep> {
    let fake = assemble_combo_batch(&recognizer.predict(features)?, subset)?;
    let real = assemble_combo_batch(labels, subset)?;
    discriminator_step_on_combos(disc, &real, &fake, opt)
}

/// Updates only the recognizer by descending `L_s + α_A L_adv^R` on a
/// paired batch. With `α_A = 0` the adversarial term is evaluated for the
/// log but kept off the gradient graph.
pub fn update_recognizer_step(
    recognizer: &mut RecognizerModel,
    disc: &DiscriminatorModel,
    features: &Tensor,
    labels: &BundleBatch,
    weights: &LossWeights,
    subset: LabelSubset,
    opt: &mut Sgd,
) -> Result<RecognizerStep> {
    let mode = recognizer.layout().mode;
    let mut tape = Tape::new();
    let (params, pred) = recognizer.forward(&mut tape, features, true)?;
    let sup = losses::supervised(&mut tape, &pred, labels, weights, mode)?;
    let (objective, adversarial) = if subset.is_none() {
        (sup.total, None)
    } else if weights.adversarial == 0.0 {
        let fake = assemble_combo_batch(&crate::models::pred_batch(&tape, &pred, recognizer.layout()), subset)?;
        let p: Vec<f64> = disc.score(&fake)?;
        let adv = -p
            .iter()
            .map(|v| v.clamp(crate::diffcore::PROB_EPS, 1.0 - crate::diffcore::PROB_EPS).ln())
            .sum::<f64>()
            / p.len() as f64;
        (sup.total, Some(adv))
    } else {
        let combo = assemble_combo_vars(&mut tape, &pred, subset)?;
        let d_params = disc.bind(&mut tape, false);
        let d_fake = disc.forward_bound(&mut tape, &d_params, combo)?;
        let adv = loss_adv_recognizer(&mut tape, d_fake);
        let total = loss_recognizer_total(&mut tape, sup.total, adv, weights)?;
        (total, Some(tape.scalar(adv)?))
    };
    let total = finite(tape.scalar(objective)?, "recognizer loss")?;
    let grads = tape.backward(objective)?;
    recognizer.accumulate_grads(&grads, &params)?;
    opt.step(&mut recognizer.params_mut())?;
    Ok(RecognizerStep {
        supervised: sup.values(&tape),
        adversarial,
        total,
    })
}

/// Per-outer-step log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based outer step.
    pub step: usize,
    pub supervised: TaskLossValues,
    pub loss_adv_r: Option<f64>,
    /// Mean `L^D` over the step's inner updates.
    pub loss_d: Option<f64>,
    /// Mean discriminator accuracy over the step's inner updates.
    pub d_acc: Option<f64>,
    pub d_updates: usize,
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: Option<TaskMode>,
    pub config_hash: String,
    pub records: Vec<StepRecord>,
    pub d_updates: usize,
    pub r_updates: usize,
    pub warnings: Vec<String>,
}

pub const TRAIN_LOG_HEADER: &str =
    "step,loss_landmark,loss_vis,loss_pose,loss_gender,loss_attr,loss_adv_r,loss_d,d_acc,ms";

impl TrainLog {
    /// CSV with a leading `# config_hash=` comment line, then the header and
    /// one row per outer step. Inapplicable cells are empty.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# config_hash={}\n{TRAIN_LOG_HEADER}\n", self.config_hash);
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let landmark = self.mode != Some(TaskMode::Attribute);
        for r in &self.records {
            let t = &r.supervised;
            let lm = |v: f64| if landmark { v.to_string() } else { String::new() };
            let at = if landmark {
                String::new()
            } else {
                t.attributes.to_string()
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{:.3}",
                r.step,
                lm(t.landmark),
                lm(t.visibility),
                lm(t.pose),
                lm(t.gender),
                at,
                o(r.loss_adv_r),
                o(r.loss_d),
                o(r.d_acc),
                r.ms
            );
        }
        s
    }
}

/// Instrumentation points in a training run.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Start,
    DiscriminatorUpdate {
        step: usize,
        inner: usize,
        feature_batch: Vec<usize>,
        label_batch: Vec<usize>,
        result: DiscriminatorStep,
    },
    RecognizerUpdate {
        step: usize,
        batch: Vec<usize>,
        result: RecognizerStep,
    },
    /// Fired after outer steps that are multiples of `eval_every`.
    Evaluate {
        step: usize,
    },
    /// Fired after outer steps that are multiples of `checkpoint_every`.
    Checkpoint {
        step: usize,
    },
}

pub trait TrainObserver {
    fn on_event(
        &mut self,
        event: &TrainEvent,
        recognizer: &RecognizerModel,
        discriminator: &DiscriminatorModel,
    ) -> Result<()>;
}

impl TrainObserver for () {
    fn on_event(&mut self, _: &TrainEvent, _: &RecognizerModel, _: &DiscriminatorModel) -> Result<()> {
        Ok(())
    }
}

impl<F> TrainObserver for F
where
    F: FnMut(&TrainEvent, &RecognizerModel, &DiscriminatorModel) -> Result<()>,
{
    fn on_event(&mut self, e: &TrainEvent, r: &RecognizerModel, d: &DiscriminatorModel) -> Result<()> {
        self(e, r, d)
    }
}

/// Discriminator loss below this for [`SATURATION_STEPS`] consecutive outer
/// steps triggers a warning.
pub const SATURATION_LOSS: f64 = 0.05;
pub const SATURATION_STEPS: usize = 50;

fn check_consistency(
    data: &Dataset,
    rec: &RecognizerModel,
    disc: &DiscriminatorModel,
    cfg: &TrainConfig,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if *rec.layout() != data.layout {
        return Err(Error::config("recognizer layout does not match the dataset"));
    }
    if rec.input_width() != data.feature_width {
        return Err(Error::config(format!(
            "recognizer expects {} features, dataset has {}",
            rec.input_width(),
            data.feature_width
        )));
    }
    cfg.subset.check_mode(data.layout.mode)?;
    if !cfg.subset.is_none() && disc.input_width() != cfg.subset.combo_width(&data.layout) {
        return Err(Error::config(format!(
            "discriminator expects {} inputs, subset '{}' yields {}",
            disc.input_width(),
            cfg.subset.name(),
            cfg.subset.combo_width(&data.layout)
        )));
    }
    Ok(())
}

/// Runs the alternating procedure in place on the two models.
pub fn train(
    data: &Dataset,
    recognizer: &mut RecognizerModel,
    discriminator: &mut DiscriminatorModel,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_consistency(data, recognizer, discriminator, cfg)?;
    let k = cfg.effective_inner_steps();
    let mut weights = cfg.weights;
    weights.adversarial = cfg.effective_adversarial_weight();
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.sampling, cfg.seed)?;
    let mut opt_r = Sgd::new(cfg.lr_recognizer, cfg.momentum);
    let mut opt_d = Sgd::new(cfg.lr_discriminator, cfg.momentum);
    let mut log = TrainLog {
        mode: Some(data.layout.mode),
        config_hash: crate::hash::stable_hash(cfg),
        ..TrainLog::default()
    };
    let mut saturated_for = 0;
    observer.on_event(&TrainEvent::Start, recognizer, discriminator)?;
    for step in 1..=cfg.outer_steps {
        let started = Instant::now();
        let mut d_loss = 0.0;
        let mut d_acc = 0.0;
        for inner in 1..=k {
            let feature_batch = sampler.next_batch();
            let label_batch = if cfg.paired_discriminator_batches {
                feature_batch.clone()
            } else {
                sampler.next_batch()
            };
            let result = update_discriminator_step(
                recognizer,
                discriminator,
                &data.features(&feature_batch)?,
                &data.labels(&label_batch)?,
                cfg.subset,
                &mut opt_d,
            )
            .map_err(|e| at_step(e, step))?;
            log.d_updates += 1;
            d_loss += result.loss;
            d_acc += result.accuracy;
            let ev = TrainEvent::DiscriminatorUpdate {
                step,
                inner,
                feature_batch,
                label_batch,
                result,
            };
            observer.on_event(&ev, recognizer, discriminator)?;
        }
        let batch = sampler.next_batch();
        let result = update_recognizer_step(
            recognizer,
            discriminator,
            &data.features(&batch)?,
            &data.labels(&batch)?,
            &weights,
            cfg.subset,
            &mut opt_r,
        )
        .map_err(|e| at_step(e, step))?;
        log.r_updates += 1;
        let (loss_d, acc) = if k > 0 {
            (Some(d_loss / k as f64), Some(d_acc / k as f64))
        } else {
            (None, None)
        };
        if loss_d.is_some_and(|l| l < SATURATION_LOSS) {
            saturated_for += 1;
            if saturated_for == SATURATION_STEPS {
                let msg = format!(
                    "discriminator loss below {SATURATION_LOSS} for {SATURATION_STEPS} consecutive steps (step {step})"
                );
                log::warn!("{msg}");
                log.warnings.push(msg);
            }
        } else {
            saturated_for = 0;
        }
        log.records.push(StepRecord {
            step,
            supervised: result.supervised,
            loss_adv_r: result.adversarial,
            loss_d,
            d_acc: acc,
            d_updates: k,
            ms: started.elapsed().as_secs_f64() * 1e3,
        });
        observer.on_event(
            &TrainEvent::RecognizerUpdate { step, batch, result },
            recognizer,
            discriminator,
        )?;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            observer.on_event(&TrainEvent::Evaluate { step }, recognizer, discriminator)?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            observer.on_event(&TrainEvent::Checkpoint { step }, recognizer, discriminator)?;
        }
    }
    Ok(log)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("outer step {step}: {m}")),
        other => other,
    }
}
