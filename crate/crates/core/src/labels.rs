//! Label layouts, per-sample label bundles and their columnar batch form.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Landmarks, visibility, pose and gender.
    Landmark,
    /// A vector of binary face attributes.
    Attribute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PoseMode {
    /// (roll, pitch, yaw) in degrees.
    Continuous,
    /// One-hot over `bins` equal yaw bins spanning [-90°, 90°].
    Discrete { bins: usize },
}

/// Fixed shape of the label vector for one task family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelLayout {
    pub mode: TaskMode,
    /// Landmark count `m` (landmark mode).
    pub landmarks: usize,
    pub pose: PoseMode,
    /// Attribute count `n` (attribute mode).
    pub attributes: usize,
    /// Degrees per model unit for continuous pose. Networks, losses and
    /// discriminator inputs see `degrees / pose_scale_deg`.
    pub pose_scale_deg: f64,
}

impl LabelLayout {
    pub fn landmark(m: usize, pose: PoseMode) -> Self {
        LabelLayout {
            mode: TaskMode::Landmark,
            landmarks: m,
            pose,
            attributes: 0,
            pose_scale_deg: 90.0,
        }
    }

    pub fn attribute(n: usize) -> Self {
        LabelLayout {
            mode: TaskMode::Attribute,
            landmarks: 0,
            pose: PoseMode::Continuous,
            attributes: n,
            pose_scale_deg: 90.0,
        }
    }

    pub fn pose_width(&self) -> usize {
        match self.pose {
            PoseMode::Continuous => 3,
            PoseMode::Discrete { bins } => bins,
        }
    }

    /// Number of label floats per sample.
    pub fn width(&self) -> usize {
        match self.mode {
            TaskMode::Landmark => 3 * self.landmarks + self.pose_width() + 1,
            TaskMode::Attribute => self.attributes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            TaskMode::Landmark => {
                if self.landmarks == 0 {
                    return Err(Error::config("landmark mode needs at least one landmark"));
                }
                if let PoseMode::Discrete { bins } = self.pose {
                    if bins < 2 {
                        return Err(Error::config("discrete pose needs at least two bins"));
                    }
                }
                if !(self.pose_scale_deg.is_finite() && self.pose_scale_deg > 0.0) {
                    return Err(Error::config("pose_scale_deg must be positive"));
                }
            }
            TaskMode::Attribute => {
                if self.attributes == 0 {
                    return Err(Error::config("attribute mode needs at least one attribute"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Pose {
    /// (roll, pitch, yaw) in degrees.
    Continuous([f64; 3]),
    /// Class distribution (one-hot for ground truth).
    Discrete(Vec<f64>),
}

impl Pose {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Pose::Continuous(p) => p.to_vec(),
            Pose::Discrete(p) => p.clone(),
        }
    }
}

/// One sample's labels. Fields absent for the active mode are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelBundle {
    /// Normalized `(x, y)` coordinates.
    pub landmarks: Option<Vec<[f64; 2]>>,
    pub visibility: Option<Vec<f64>>,
    pub pose: Option<Pose>,
    pub gender: Option<f64>,
    pub attributes: Option<Vec<f64>>,
}

fn is_binary(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

impl LabelBundle {
    pub fn landmark(landmarks: Vec<[f64; 2]>, visibility: Vec<f64>, pose: Pose, gender: f64) -> Self {
        LabelBundle {
            landmarks: Some(landmarks),
            visibility: Some(visibility),
            pose: Some(pose),
            gender: Some(gender),
            attributes: None,
        }
    }

    pub fn attribute(attributes: Vec<f64>) -> Self {
        LabelBundle {
            attributes: Some(attributes),
            ..Default::default()
        }
    }

    /// Checks the ground-truth invariants: binary visibility, gender and
    /// attributes, one-hot discrete pose, consistent landmark count.
    pub fn validate_truth(&self, layout: &LabelLayout) -> Result<()> {
        match layout.mode {
            TaskMode::Landmark => {
                let lm = self
                    .landmarks
                    .as_ref()
                    .ok_or_else(|| Error::contract("missing landmarks"))?;
                let vis = self
                    .visibility
                    .as_ref()
                    .ok_or_else(|| Error::contract("missing visibility"))?;
                if lm.len() != layout.landmarks || vis.len() != layout.landmarks {
                    return Err(Error::dim(
                        "label bundle landmarks",
                        &[layout.landmarks],
                        &[lm.len(), vis.len()],
                    ));
                }
                if !vis.iter().all(|&v| is_binary(v)) {
                    return Err(Error::contract("ground-truth visibility must be 0 or 1"));
                }
                match (&self.pose, layout.pose) {
                    (Some(Pose::Continuous(_)), PoseMode::Continuous) => {}
                    (Some(Pose::Discrete(p)), PoseMode::Discrete { bins }) => check_one_hot(p, bins)?,
                    _ => return Err(Error::contract("pose missing or of the wrong mode")),
                }
                let g = self.gender.ok_or_else(|| Error::contract("missing gender"))?;
                if !is_binary(g) {
                    return Err(Error::contract("ground-truth gender must be 0 or 1"));
                }
            }
            TaskMode::Attribute => {
                let a = self
                    .attributes
                    .as_ref()
                    .ok_or_else(|| Error::contract("missing attributes"))?;
                if a.len() != layout.attributes {
                    return Err(Error::dim("label bundle attributes", &[layout.attributes], &[a.len()]));
                }
                if !a.iter().all(|&v| is_binary(v)) {
                    return Err(Error::contract("ground-truth attributes must be 0 or 1"));
                }
            }
        }
        Ok(())
    }

    /// Flat label row in file order: landmarks (x1, y1, …), visibility,
    /// pose, gender; or the attribute vector.
    pub fn to_row(&self, layout: &LabelLayout) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(layout.width());
        match layout.mode {
            TaskMode::Landmark => {
                let lm = self
                    .landmarks
                    .as_ref()
                    .ok_or_else(|| Error::contract("missing landmarks"))?;
                row.extend(lm.iter().flat_map(|p| p.iter().copied()));
                row.extend(
                    self.visibility
                        .as_ref()
                        .ok_or_else(|| Error::contract("missing visibility"))?,
                );
                row.extend(
                    self.pose
                        .as_ref()
                        .ok_or_else(|| Error::contract("missing pose"))?
                        .values(),
                );
                row.push(self.gender.ok_or_else(|| Error::contract("missing gender"))?);
            }
            TaskMode::Attribute => {
                row.extend(
                    self.attributes
                        .as_ref()
                        .ok_or_else(|| Error::contract("missing attributes"))?,
                );
            }
        }
        if row.len() != layout.width() {
            return Err(Error::dim("label row", &[layout.width()], &[row.len()]));
        }
        Ok(row)
    }

    pub fn from_row(layout: &LabelLayout, row: &[f64]) -> Result<Self> {
        if row.len() != layout.width() {
            return Err(Error::dim("label row", &[layout.width()], &[row.len()]));
        }
        Ok(match layout.mode {
            TaskMode::Landmark => {
                let m = layout.landmarks;
                let landmarks = row[..2 * m].chunks(2).map(|c| [c[0], c[1]]).collect();
                let visibility = row[2 * m..3 * m].to_vec();
                let pw = layout.pose_width();
                let pose_vals = &row[3 * m..3 * m + pw];
                let pose = match layout.pose {
                    PoseMode::Continuous => Pose::Continuous([pose_vals[0], pose_vals[1], pose_vals[2]]),
                    PoseMode::Discrete { .. } => Pose::Discrete(pose_vals.to_vec()),
                };
                LabelBundle::landmark(landmarks, visibility, pose, row[3 * m + pw])
            }
            TaskMode::Attribute => LabelBundle::attribute(row.to_vec()),
        })
    }
}

pub(crate) fn check_one_hot(p: &[f64], bins: usize) -> Result<()> {
    if p.len() != bins {
        return Err(Error::dim("one-hot pose", &[bins], &[p.len()]));
    }
    let ones = p.iter().filter(|&&v| v == 1.0).count();
    let zeros = p.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != bins {
        return Err(Error::contract(format!("discrete pose truth is not one-hot: {p:?}")));
    }
    Ok(())
}

/// Columnar batch of labels, one `batch × width` tensor per task field.
///
/// Continuous pose is stored in model units (degrees / `pose_scale_deg`).
#[derive(Clone, Debug, PartialEq)]
pub struct BundleBatch {
    pub layout: LabelLayout,
    pub landmarks: Option<Tensor>,
    pub visibility: Option<Tensor>,
    pub pose: Option<Tensor>,
    pub gender: Option<Tensor>,
    pub attributes: Option<Tensor>,
}

impl BundleBatch {
    pub fn from_bundles(layout: &LabelLayout, bundles: &[&LabelBundle]) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::EmptyDataset("label batch of size zero".into()));
        }
        let b = bundles.len();
        let mut out = BundleBatch {
            layout: *layout,
            landmarks: None,
            visibility: None,
            pose: None,
            gender: None,
            attributes: None,
        };
        match layout.mode {
            TaskMode::Landmark => {
                let m = layout.landmarks;
                let pw = layout.pose_width();
                let (mut lm, mut vis, mut pose, mut gen) = (
                    Vec::with_capacity(b * 2 * m),
                    Vec::with_capacity(b * m),
                    Vec::with_capacity(b * pw),
                    Vec::with_capacity(b),
                );
                for bundle in bundles {
                    let row = bundle.to_row(layout)?;
                    lm.extend_from_slice(&row[..2 * m]);
                    vis.extend_from_slice(&row[2 * m..3 * m]);
                    match layout.pose {
                        PoseMode::Continuous => {
                            pose.extend(row[3 * m..3 * m + 3].iter().map(|d| d / layout.pose_scale_deg))
                        }
                        PoseMode::Discrete { .. } => pose.extend_from_slice(&row[3 * m..3 * m + pw]),
                    }
                    gen.push(row[3 * m + pw]);
                }
                out.landmarks = Some(Tensor::matrix(b, 2 * m, lm)?);
                out.visibility = Some(Tensor::matrix(b, m, vis)?);
                out.pose = Some(Tensor::matrix(b, pw, pose)?);
                out.gender = Some(Tensor::matrix(b, 1, gen)?);
            }
            TaskMode::Attribute => {
                let n = layout.attributes;
                let mut attrs = Vec::with_capacity(b * n);
                for bundle in bundles {
                    attrs.extend(bundle.to_row(layout)?);
                }
                out.attributes = Some(Tensor::matrix(b, n, attrs)?);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.fields().first().map(|t| t.rows()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn fields(&self) -> Vec<&Tensor> {
        [
            &self.landmarks,
            &self.visibility,
            &self.pose,
            &self.gender,
            &self.attributes,
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    /// Converts back to per-sample bundles, with pose in degrees.
    pub fn to_bundles(&self) -> Vec<LabelBundle> {
        let layout = self.layout;
        (0..self.len())
            .map(|r| match layout.mode {
                TaskMode::Landmark => {
                    let lm = self.landmarks.as_ref().expect("landmark batch").row(r);
                    let vis = self.visibility.as_ref().expect("landmark batch").row(r);
                    let pose_row = self.pose.as_ref().expect("landmark batch").row(r);
                    let pose = match layout.pose {
                        PoseMode::Continuous => Pose::Continuous([
                            pose_row[0] * layout.pose_scale_deg,
                            pose_row[1] * layout.pose_scale_deg,
                            pose_row[2] * layout.pose_scale_deg,
                        ]),
                        PoseMode::Discrete { .. } => Pose::Discrete(pose_row.to_vec()),
                    };
                    LabelBundle::landmark(
                        lm.chunks(2).map(|c| [c[0], c[1]]).collect(),
                        vis.to_vec(),
                        pose,
                        self.gender.as_ref().expect("landmark batch").row(r)[0],
                    )
                }
                TaskMode::Attribute => {
                    LabelBundle::attribute(self.attributes.as_ref().expect("attribute batch").row(r).to_vec())
                }
            })
            .collect()
    }
}
