//! Supervised task losses and their weighted combination.
//!
//! Every function records onto a [`Tape`] and averages over the batch, so
//! the same code serves training (gradients) and evaluation (values). The
//! [`bundle`] submodule evaluates the same losses for single label bundles.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var, PROB_EPS};
use crate::error::{Error, Result};
use crate::labels::{check_one_hot, BundleBatch, TaskMode};
use crate::models::PredVars;

/// Weight coefficients for the supervised terms and the adversarial term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub landmark: f64,
    pub visibility: f64,
    pub pose: f64,
    pub gender: f64,
    pub attributes: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            landmark: 1.0,
            visibility: 1.0,
            pose: 1.0,
            gender: 1.0,
            attributes: 1.0,
            adversarial: 0.03,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.landmark,
            self.visibility,
            self.pose,
            self.gender,
            self.attributes,
            self.adversarial,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

fn check_same(tape: &Tape, pred: Var, truth: &Tensor, op: &'static str) -> Result<()> {
    if tape.shape(pred) != truth.shape() {
        return Err(Error::dim(op, tape.shape(pred), truth.shape()));
    }
    Ok(())
}

/// `(1/2m) Σ v_i ((x̂_i - x_i)² + (ŷ_i - y_i)²)`, batch-averaged.
/// `pred` and `truth` are `batch × 2m` (x1, y1, x2, …); `visibility` is `batch × m`.
pub fn landmark(tape: &mut Tape, pred: Var, truth: &Tensor, visibility: &Tensor) -> Result<Var> {
    check_same(tape, pred, truth, "landmark loss")?;
    let (batch, m) = (visibility.rows(), visibility.cols());
    if truth.cols() != 2 * m || truth.rows() != batch {
        return Err(Error::dim(
            "landmark loss visibility",
            truth.shape(),
            visibility.shape(),
        ));
    }
    let mask: Vec<f64> = visibility.data().iter().flat_map(|&v| [v, v]).collect();
    let mask = tape.constant(&Tensor::matrix(batch, 2 * m, mask)?);
    let t = tape.constant(truth);
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff);
    let masked = tape.mul(sq, mask)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / (2.0 * m as f64 * batch as f64)))
}

/// Mean binary cross-entropy with clamped predictions, `-Σ[t ln p + (1-t) ln(1-p)] / count`.
pub fn binary_cross_entropy(tape: &mut Tape, pred: Var, truth: &Tensor) -> Result<Var> {
    check_same(tape, pred, truth, "binary cross-entropy")?;
    let n = truth.numel() as f64;
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let ln_p = tape.ln(p);
    let q = tape.affine(p, -1.0, 1.0);
    let ln_q = tape.ln(q);
    let t = tape.constant(truth);
    let one_minus_t = Tensor::new(truth.shape().to_vec(), truth.data().iter().map(|v| 1.0 - v).collect())?;
    let u = tape.constant(&one_minus_t);
    let a = tape.mul(ln_p, t)?;
    let b = tape.mul(ln_q, u)?;
    let ab = tape.add(a, b)?;
    let s = tape.sum(ab);
    Ok(tape.scale(s, -1.0 / n))
}

/// Visibility cross-entropy, averaged over the `m` landmarks and the batch.
pub fn visibility(tape: &mut Tape, pred: Var, truth: &Tensor) -> Result<Var> {
    binary_cross_entropy(tape, pred, truth)
}

/// `(1/3) Σ (p̂_j - p_j)²` over (roll, pitch, yaw), batch-averaged.
pub fn pose_continuous(tape: &mut Tape, pred: Var, truth: &Tensor) -> Result<Var> {
    check_same(tape, pred, truth, "continuous pose loss")?;
    if truth.cols() != 3 {
        return Err(Error::dim("continuous pose loss", truth.shape(), &[truth.rows(), 3]));
    }
    let t = tape.constant(truth);
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / (3.0 * truth.rows() as f64)))
}

/// `-Σ p_i ln p̂_i` against one-hot truth, batch-averaged.
pub fn pose_discrete(tape: &mut Tape, pred: Var, truth: &Tensor) -> Result<Var> {
    check_same(tape, pred, truth, "discrete pose loss")?;
    let k = truth.cols();
    for r in 0..truth.rows() {
        check_one_hot(truth.row(r), k)?;
    }
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.ln(p);
    let t = tape.constant(truth);
    let prod = tape.mul(lp, t)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / truth.rows() as f64))
}

/// Gender cross-entropy; `pred` and `truth` are `batch × 1`.
pub fn gender(tape: &mut Tape, pred: Var, truth: &Tensor) -> Result<Var> {
    binary_cross_entropy(tape, pred, truth)
}

/// Mean binary cross-entropy over the `n` attributes.
pub fn attributes(tape: &mut Tape, pred: Var, truth: &Tensor) -> Result<Var> {
    binary_cross_entropy(tape, pred, truth)
}

/// Individual task terms plus their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedTerms {
    pub total: Var,
    pub landmark: Option<Var>,
    pub visibility: Option<Var>,
    pub pose: Option<Var>,
    pub gender: Option<Var>,
    pub attributes: Option<Var>,
}

/// Scalar values of each term, as logged per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLossValues {
    pub landmark: f64,
    pub visibility: f64,
    pub pose: f64,
    pub gender: f64,
    pub attributes: f64,
    pub total: f64,
}

impl SupervisedTerms {
    pub fn values(&self, tape: &Tape) -> TaskLossValues {
        let v = |x: Option<Var>| x.map(|x| tape.value(x)[0]).unwrap_or(0.0);
        TaskLossValues {
            landmark: v(self.landmark),
            visibility: v(self.visibility),
            pose: v(self.pose),
            gender: v(self.gender),
            attributes: v(self.attributes),
            total: tape.value(self.total)[0],
        }
    }
}

fn need<T: Copy>(x: Option<T>, what: &str) -> Result<T> {
    x.ok_or_else(|| Error::contract(format!("supervised loss: missing {what}")))
}

fn need_ref<'a, T>(x: &'a Option<T>, what: &str) -> Result<&'a T> {
    x.as_ref()
        .ok_or_else(|| Error::contract(format!("supervised loss: missing {what}")))
}

/// `α_L L^L + α_V L^V + α_P L^P + α_G L^G` in landmark mode,
/// `α_attr L^A` in attribute mode.
pub fn supervised(
    tape: &mut Tape,
    pred: &PredVars,
    truth: &BundleBatch,
    weights: &LossWeights,
    mode: TaskMode,
) -> Result<SupervisedTerms> {
    match mode {
        TaskMode::Landmark => {
            let vis_t = need_ref(&truth.visibility, "visibility truth")?;
            let l = landmark(
                tape,
                need(pred.landmarks, "landmark head")?,
                need_ref(&truth.landmarks, "landmark truth")?,
                vis_t,
            )?;
            let v = visibility(tape, need(pred.visibility, "visibility head")?, vis_t)?;
            let pose_pred = need(pred.pose, "pose head")?;
            let pose_t = need_ref(&truth.pose, "pose truth")?;
            let p = match truth.layout.pose {
                crate::labels::PoseMode::Continuous => pose_continuous(tape, pose_pred, pose_t)?,
                crate::labels::PoseMode::Discrete { .. } => pose_discrete(tape, pose_pred, pose_t)?,
            };
            let g = gender(
                tape,
                need(pred.gender, "gender head")?,
                need_ref(&truth.gender, "gender truth")?,
            )?;
            let wl = tape.scale(l, weights.landmark);
            let wv = tape.scale(v, weights.visibility);
            let wp = tape.scale(p, weights.pose);
            let wg = tape.scale(g, weights.gender);
            let s1 = tape.add(wl, wv)?;
            let s2 = tape.add(s1, wp)?;
            let total = tape.add(s2, wg)?;
            Ok(SupervisedTerms {
                total,
                landmark: Some(l),
                visibility: Some(v),
                pose: Some(p),
                gender: Some(g),
                attributes: None,
            })
        }
        TaskMode::Attribute => {
            let a = attributes(
                tape,
                need(pred.attributes, "attribute head")?,
                need_ref(&truth.attributes, "attribute truth")?,
            )?;
            let total = tape.scale(a, weights.attributes);
            Ok(SupervisedTerms {
                total,
                landmark: None,
                visibility: None,
                pose: None,
                gender: None,
                attributes: Some(a),
            })
        }
    }
}

/// The same losses evaluated on single label bundles (pose in the bundle's
/// own units).
pub mod bundle {
    use super::*;
    use crate::labels::{LabelBundle, Pose};

    fn row(v: &[f64]) -> Result<Tensor> {
        Tensor::matrix(1, v.len(), v.to_vec())
    }

    fn field<'a, T>(x: &'a Option<T>, what: &str) -> Result<&'a T> {
        x.as_ref()
            .ok_or_else(|| Error::contract(format!("bundle is missing {what}")))
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        tape.scalar(v)
    }

    fn flat(lm: &[[f64; 2]]) -> Vec<f64> {
        lm.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn landmark(pred: &LabelBundle, truth: &LabelBundle) -> Result<f64> {
        let p = field(&pred.landmarks, "landmarks")?;
        let t = field(&truth.landmarks, "landmarks")?;
        let v = field(&truth.visibility, "visibility")?;
        if p.len() != t.len() || v.len() != t.len() {
            return Err(Error::dim("landmark loss", &[p.len()], &[t.len(), v.len()]));
        }
        eval(|tape| {
            let pv = tape.constant(&row(&flat(p))?);
            super::landmark(tape, pv, &row(&flat(t))?, &row(v)?)
        })
    }

    pub fn visibility(pred: &LabelBundle, truth: &LabelBundle) -> Result<f64> {
        let p = field(&pred.visibility, "visibility")?;
        let t = field(&truth.visibility, "visibility")?;
        eval(|tape| {
            let pv = tape.constant(&row(p)?);
            super::visibility(tape, pv, &row(t)?)
        })
    }

    pub fn pose_continuous(pred: &LabelBundle, truth: &LabelBundle) -> Result<f64> {
        match (field(&pred.pose, "pose")?, field(&truth.pose, "pose")?) {
            (Pose::Continuous(p), Pose::Continuous(t)) => eval(|tape| {
                let pv = tape.constant(&row(p)?);
                super::pose_continuous(tape, pv, &row(t)?)
            }),
            _ => Err(Error::contract("continuous pose loss needs continuous poses")),
        }
    }

    pub fn pose_discrete(pred: &LabelBundle, truth: &LabelBundle) -> Result<f64> {
        match (field(&pred.pose, "pose")?, field(&truth.pose, "pose")?) {
            (Pose::Discrete(p), Pose::Discrete(t)) => eval(|tape| {
                let pv = tape.constant(&row(p)?);
                super::pose_discrete(tape, pv, &row(t)?)
            }),
            _ => Err(Error::contract("discrete pose loss needs discrete poses")),
        }
    }

    pub fn gender(pred: &LabelBundle, truth: &LabelBundle) -> Result<f64> {
        let p = *field(&pred.gender, "gender")?;
        let t = *field(&truth.gender, "gender")?;
        eval(|tape| {
            let pv = tape.constant(&row(&[p])?);
            super::gender(tape, pv, &row(&[t])?)
        })
    }

    pub fn attributes(pred: &LabelBundle, truth: &LabelBundle) -> Result<f64> {
        let p = field(&pred.attributes, "attributes")?;
        let t = field(&truth.attributes, "attributes")?;
        if p.len() != t.len() {
            return Err(Error::dim("attribute loss", &[p.len()], &[t.len()]));
        }
        eval(|tape| {
            let pv = tape.constant(&row(p)?);
            super::attributes(tape, pv, &row(t)?)
        })
    }

    pub fn supervised(pred: &LabelBundle, truth: &LabelBundle, weights: &LossWeights, mode: TaskMode) -> Result<f64> {
        match mode {
            TaskMode::Landmark => {
                let p = match field(&truth.pose, "pose")? {
                    Pose::Continuous(_) => pose_continuous(pred, truth)?,
                    Pose::Discrete(_) => pose_discrete(pred, truth)?,
                };
                Ok(weights.landmark * landmark(pred, truth)?
                    + weights.visibility * visibility(pred, truth)?
                    + weights.pose * p
                    + weights.gender * gender(pred, truth)?)
            }
            TaskMode::Attribute => Ok(weights.attributes * attributes(pred, truth)?),
        }
    }
}
