//! Label combinations fed to the discriminator and the adversarial
//! objectives that couple recognizer and discriminator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var, PROB_EPS};
use crate::error::{Error, Result};
use crate::labels::{BundleBatch, LabelBundle, LabelLayout, Pose, PoseMode, TaskMode};
use crate::losses::LossWeights;
use crate::models::{HeadKind, PredVars};

/// Which label fields enter the discriminator. Names follow the ablation
/// family: `none`, `l`, `lv`, `lvg`, `lvp`, `all`, `attr`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LabelSubset {
    None,
    L,
    Lv,
    Lvg,
    Lvp,
    All,
    Attr,
}

impl LabelSubset {
    pub const LANDMARK_FAMILY: [LabelSubset; 6] = [
        LabelSubset::None,
        LabelSubset::L,
        LabelSubset::Lv,
        LabelSubset::Lvg,
        LabelSubset::Lvp,
        LabelSubset::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelSubset::None => "none",
            LabelSubset::L => "l",
            LabelSubset::Lv => "lv",
            LabelSubset::Lvg => "lvg",
            LabelSubset::Lvp => "lvp",
            LabelSubset::All => "all",
            LabelSubset::Attr => "attr",
        }
    }

    /// Covered fields in combo order.
    pub fn fields(self) -> &'static [HeadKind] {
        use HeadKind::*;
        match self {
            LabelSubset::None => &[],
            LabelSubset::L => &[Landmarks],
            LabelSubset::Lv => &[Landmarks, Visibility],
            LabelSubset::Lvg => &[Landmarks, Visibility, Gender],
            LabelSubset::Lvp => &[Landmarks, Visibility, Pose],
            LabelSubset::All => &[Landmarks, Visibility, Pose, Gender],
            LabelSubset::Attr => &[Attributes],
        }
    }

    pub fn is_none(self) -> bool {
        self == LabelSubset::None
    }

    pub fn check_mode(self, mode: TaskMode) -> Result<()> {
        let ok = match self {
            LabelSubset::None => true,
            LabelSubset::Attr => mode == TaskMode::Attribute,
            _ => mode == TaskMode::Landmark,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "label subset '{}' is not valid in {mode:?} mode",
                self.name()
            )))
        }
    }

    /// "all" in attribute mode means every attribute.
    pub fn for_mode(self, mode: TaskMode) -> Self {
        match (self, mode) {
            (LabelSubset::All, TaskMode::Attribute) => LabelSubset::Attr,
            (s, _) => s,
        }
    }

    /// Subsets compared by default in an ablation sweep.
    pub fn ablation_family(mode: TaskMode) -> Vec<LabelSubset> {
        match mode {
            TaskMode::Landmark => vec![
                LabelSubset::None,
                LabelSubset::L,
                LabelSubset::Lv,
                LabelSubset::Lvg,
                LabelSubset::Lvp,
                LabelSubset::All,
            ],
            TaskMode::Attribute => vec![LabelSubset::None, LabelSubset::Attr],
        }
    }

    pub fn field_width(field: HeadKind, layout: &LabelLayout) -> usize {
        match field {
            HeadKind::Landmarks => 2 * layout.landmarks,
            HeadKind::Visibility => layout.landmarks,
            HeadKind::Pose => layout.pose_width(),
            HeadKind::Gender => 1,
            HeadKind::Attributes => layout.attributes,
        }
    }

    /// Width of the flattened combo for `layout`.
    pub fn combo_width(self, layout: &LabelLayout) -> usize {
        self.fields().iter().map(|&f| Self::field_width(f, layout)).sum()
    }
}

impl fmt::Display for LabelSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" | "no" => LabelSubset::None,
            "l" => LabelSubset::L,
            "lv" => LabelSubset::Lv,
            "lvg" => LabelSubset::Lvg,
            "lvp" => LabelSubset::Lvp,
            "all" => LabelSubset::All,
            "attr" | "gan" => LabelSubset::Attr,
            other => {
                return Err(Error::config(format!(
                    "unknown label subset '{other}' (expected none, l, lv, lvg, lvp, all or attr)"
                )))
            }
        })
    }
}

impl TryFrom<String> for LabelSubset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LabelSubset> for String {
    fn from(s: LabelSubset) -> String {
        s.name().to_string()
    }
}

fn missing(field: HeadKind) -> Error {
    Error::config(format!("label combo needs '{}' but the bundle has none", field.name()))
}

fn empty_subset() -> Error {
    Error::config("label subset 'none' has no combination")
}

/// Flattens the subset's fields of one bundle in fixed order. Continuous
/// pose enters in model units, matching [`assemble_combo_batch`].
pub fn assemble_combo(bundle: &LabelBundle, subset: LabelSubset, layout: &LabelLayout) -> Result<Vec<f64>> {
    if subset.is_none() {
        return Err(empty_subset());
    }
    let mut out = Vec::with_capacity(subset.combo_width(layout));
    for &field in subset.fields() {
        let before = out.len();
        match field {
            HeadKind::Landmarks => out.extend(
                bundle
                    .landmarks
                    .as_ref()
                    .ok_or_else(|| missing(field))?
                    .iter()
                    .flat_map(|p| p.iter().copied()),
            ),
            HeadKind::Visibility => out.extend(bundle.visibility.as_ref().ok_or_else(|| missing(field))?),
            HeadKind::Pose => match bundle.pose.as_ref().ok_or_else(|| missing(field))? {
                Pose::Continuous(p) => out.extend(p.iter().map(|d| d / layout.pose_scale_deg)),
                Pose::Discrete(p) => out.extend(p),
            },
            HeadKind::Gender => out.push(bundle.gender.ok_or_else(|| missing(field))?),
            HeadKind::Attributes => out.extend(bundle.attributes.as_ref().ok_or_else(|| missing(field))?),
        }
        let want = LabelSubset::field_width(field, layout);
        if out.len() - before != want {
            return Err(Error::dim("label combo field", &[want], &[out.len() - before]));
        }
    }
    Ok(out)
}

/// Inverse of [`assemble_combo`]: recovers the covered fields.
pub fn split_combo(combo: &[f64], subset: LabelSubset, layout: &LabelLayout) -> Result<LabelBundle> {
    if combo.len() != subset.combo_width(layout) {
        return Err(Error::dim("split_combo", &[subset.combo_width(layout)], &[combo.len()]));
    }
    let mut out = LabelBundle::default();
    let mut at = 0;
    for &field in subset.fields() {
        let w = LabelSubset::field_width(field, layout);
        let part = &combo[at..at + w];
        at += w;
        match field {
            HeadKind::Landmarks => out.landmarks = Some(part.chunks(2).map(|c| [c[0], c[1]]).collect()),
            HeadKind::Visibility => out.visibility = Some(part.to_vec()),
            HeadKind::Pose => {
                out.pose = Some(match layout.pose {
                    PoseMode::Continuous => Pose::Continuous([
                        part[0] * layout.pose_scale_deg,
                        part[1] * layout.pose_scale_deg,
                        part[2] * layout.pose_scale_deg,
                    ]),
                    PoseMode::Discrete { .. } => Pose::Discrete(part.to_vec()),
                })
            }
            HeadKind::Gender => out.gender = Some(part[0]),
            HeadKind::Attributes => out.attributes = Some(part.to_vec()),
        }
    }
    Ok(out)
}

fn batch_field(batch: &BundleBatch, field: HeadKind) -> Option<&Tensor> {
    match field {
        HeadKind::Landmarks => batch.landmarks.as_ref(),
        HeadKind::Visibility => batch.visibility.as_ref(),
        HeadKind::Pose => batch.pose.as_ref(),
        HeadKind::Gender => batch.gender.as_ref(),
        HeadKind::Attributes => batch.attributes.as_ref(),
    }
}

/// `batch × width` combos from a label batch (ground truth or detached
/// predictions).
pub fn assemble_combo_batch(batch: &BundleBatch, subset: LabelSubset) -> Result<Tensor> {
    if subset.is_none() {
        return Err(empty_subset());
    }
    let parts = subset
        .fields()
        .iter()
        .map(|&f| batch_field(batch, f).ok_or_else(|| missing(f)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_cols(&parts)
}

/// Differentiable combo built from recognizer head outputs.
pub fn assemble_combo_vars(tape: &mut Tape, pred: &PredVars, subset: LabelSubset) -> Result<Var> {
    if subset.is_none() {
        return Err(empty_subset());
    }
    let parts = subset
        .fields()
        .iter()
        .map(|&f| {
            let v = match f {
                HeadKind::Landmarks => pred.landmarks,
                HeadKind::Visibility => pred.visibility,
                HeadKind::Pose => pred.pose,
                HeadKind::Gender => pred.gender,
                HeadKind::Attributes => pred.attributes,
            };
            v.ok_or_else(|| missing(f))
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat_cols(&parts)
}

fn mean_log(tape: &mut Tape, p: Var) -> Var {
    let c = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let l = tape.ln(c);
    tape.mean(l)
}

/// `-mean ln D(ŷ)`: small when the discriminator takes predictions for real.
pub fn loss_adv_recognizer(tape: &mut Tape, d_fake: Var) -> Var {
    let m = mean_log(tape, d_fake);
    tape.scale(m, -1.0)
}

/// `-[mean ln D(y) + mean ln(1 - D(ŷ))]`. The caller supplies `d_fake`
/// computed from detached predictions.
pub fn loss_discriminator(tape: &mut Tape, d_real: Var, d_fake: Var) -> Var {
    let real = mean_log(tape, d_real);
    let q = tape.affine(d_fake, -1.0, 1.0);
    let fake = mean_log(tape, q);
    let s = tape.add(real, fake).expect("scalars");
    tape.scale(s, -1.0)
}

/// `L^R = L_s + α_A · L_adv^R`.
pub fn loss_recognizer_total(tape: &mut Tape, supervised: Var, adversarial: Var, weights: &LossWeights) -> Result<Var> {
    let w = tape.scale(adversarial, weights.adversarial);
    tape.add(supervised, w)
}
