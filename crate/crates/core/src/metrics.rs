//! Evaluation metrics and the label-combination divergence diagnostic.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::adversary::LabelSubset;
use crate::error::{Error, Result};
use crate::labels::{LabelBundle, Pose, TaskMode};
use crate::models::HeadKind;
use crate::synthgen::yaw_bin_center;

/// How the per-sample face size in NME is computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FaceNormalizer {
    /// `sqrt(box_width · box_height)`.
    SqrtArea,
    /// `sqrt(box_width² + box_height²)`.
    Diagonal,
    /// Ground-truth distance between two landmarks (usually the eyes).
    InterOcular { left: usize, right: usize },
}

impl FaceNormalizer {
    pub fn name(&self) -> String {
        match self {
            FaceNormalizer::SqrtArea => "sqrt_area".into(),
            FaceNormalizer::Diagonal => "diagonal".into(),
            FaceNormalizer::InterOcular { left, right } => format!("inter_ocular({left},{right})"),
        }
    }

    pub fn face_size(&self, box_wh: [f64; 2], truth: &LabelBundle) -> Result<f64> {
        Ok(match self {
            FaceNormalizer::SqrtArea => (box_wh[0] * box_wh[1]).sqrt(),
            FaceNormalizer::Diagonal => box_wh[0].hypot(box_wh[1]),
            FaceNormalizer::InterOcular { left, right } => {
                let lm = landmarks(truth)?;
                let (a, b) = (
                    lm.get(*left)
                        .ok_or_else(|| Error::config("inter-ocular index out of range"))?,
                    lm.get(*right)
                        .ok_or_else(|| Error::config("inter-ocular index out of range"))?,
                );
                (a[0] - b[0]).hypot(a[1] - b[1])
            }
        })
    }
}

fn landmarks(b: &LabelBundle) -> Result<&[[f64; 2]]> {
    b.landmarks
        .as_deref()
        .ok_or_else(|| Error::contract("bundle has no landmarks"))
}

fn visibility(b: &LabelBundle) -> Result<&[f64]> {
    b.visibility
        .as_deref()
        .ok_or_else(|| Error::contract("bundle has no visibility"))
}

fn check_pairs(preds: &[LabelBundle], truths: &[LabelBundle]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::dim("metric inputs", &[preds.len()], &[truths.len()]));
    }
    Ok(())
}

/// Mean Euclidean error over the visible landmarks of one sample, with the
/// visible count. `None` when nothing is visible.
fn sample_error(pred: &LabelBundle, truth: &LabelBundle) -> Result<Option<(f64, usize)>> {
    let (p, t, v) = (landmarks(pred)?, landmarks(truth)?, visibility(truth)?);
    if p.len() != t.len() || v.len() != t.len() {
        return Err(Error::dim("landmark metric", &[p.len()], &[t.len(), v.len()]));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for ((a, b), &vis) in p.iter().zip(t).zip(v) {
        if vis == 1.0 {
            sum += (a[0] - b[0]).hypot(a[1] - b[1]);
            count += 1;
        }
    }
    Ok((count > 0).then_some((sum, count)))
}

/// Normalized mean error in percent. Samples with no visible landmark are
/// skipped.
pub fn nme(preds: &[LabelBundle], truths: &[LabelBundle], face_sizes: &[f64]) -> Result<f64> {
    Ok(nme_with_count(preds, truths, face_sizes)?.0)
}

/// NME plus the number of samples that entered the mean.
pub fn nme_with_count(preds: &[LabelBundle], truths: &[LabelBundle], face_sizes: &[f64]) -> Result<(f64, usize)> {
    check_pairs(preds, truths)?;
    if face_sizes.len() != truths.len() {
        return Err(Error::dim("nme face sizes", &[truths.len()], &[face_sizes.len()]));
    }
    let mut total = 0.0;
    let mut used = 0;
    for ((p, t), &size) in preds.iter().zip(truths).zip(face_sizes) {
        if size.is_nan() || size <= 0.0 {
            return Err(Error::contract(format!("face size must be positive, got {size}")));
        }
        if let Some((sum, count)) = sample_error(p, t)? {
            total += sum / count as f64 / size;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("NME: no sample has a visible landmark".into()));
    }
    Ok((100.0 * total / used as f64, used))
}

/// Per-sample normalized error in percent; `None` for samples with no
/// visible landmark.
pub fn per_sample_nme(preds: &[LabelBundle], truths: &[LabelBundle], face_sizes: &[f64]) -> Result<Vec<Option<f64>>> {
    check_pairs(preds, truths)?;
    if face_sizes.len() != truths.len() {
        return Err(Error::dim("nme face sizes", &[truths.len()], &[face_sizes.len()]));
    }
    preds
        .iter()
        .zip(truths)
        .zip(face_sizes)
        .map(|((p, t), &size)| Ok(sample_error(p, t)?.map(|(sum, count)| 100.0 * sum / count as f64 / size)))
        .collect()
}

/// Unnormalized mean Euclidean error pooled over every visible landmark.
pub fn mae(preds: &[LabelBundle], truths: &[LabelBundle]) -> Result<f64> {
    check_pairs(preds, truths)?;
    let mut total = 0.0;
    let mut count = 0;
    for (p, t) in preds.iter().zip(truths) {
        if let Some((s, c)) = sample_error(p, t)? {
            total += s;
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("MAE: no visible landmarks".into()));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccuracyKind {
    /// Every entry thresholded at 0.5 and compared with its 0/1 truth.
    Binary,
    /// Row-wise arg-max compared with the truth row's arg-max.
    MulticlassArgmax,
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &[Vec<f64>], truths: &[Vec<f64>], kind: AccuracyKind) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::dim("accuracy", &[preds.len()], &[truths.len()]));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::dim("accuracy row", &[p.len()], &[t.len()]));
        }
        match kind {
            AccuracyKind::Binary => {
                for (a, b) in p.iter().zip(t) {
                    hits += usize::from(((*a > 0.5) as u8 as f64) == *b);
                    total += 1;
                }
            }
            AccuracyKind::MulticlassArgmax => {
                hits += usize::from(argmax(p) == argmax(t));
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

fn continuous_pose(b: &LabelBundle) -> Result<[f64; 3]> {
    match &b.pose {
        Some(Pose::Continuous(p)) => Ok(*p),
        _ => Err(Error::contract("pose degree error needs continuous poses")),
    }
}

/// Mean absolute (roll, pitch, yaw) error in degrees.
pub fn pose_degree_error(preds: &[LabelBundle], truths: &[LabelBundle]) -> Result<[f64; 3]> {
    check_pairs(preds, truths)?;
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("pose error of an empty set".into()));
    }
    let mut acc = [0.0; 3];
    for (p, t) in preds.iter().zip(truths) {
        let (p, t) = (continuous_pose(p)?, continuous_pose(t)?);
        for k in 0..3 {
            acc[k] += (p[k] - t[k]).abs();
        }
    }
    Ok(acc.map(|a| a / preds.len() as f64))
}

/// Cumulative error curve: sorted errors paired with the fraction of
/// samples at or below each.
pub fn cumulative_error_curve(errors: &[f64]) -> Vec<[f64; 2]> {
    let mut e = errors.to_vec();
    e.sort_by(|a, b| a.total_cmp(b));
    let n = e.len() as f64;
    e.iter().enumerate().map(|(i, v)| [*v, (i + 1) as f64 / n]).collect()
}

/// Discretization used to turn a label bundle into a hashable symbol tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComboGrid {
    /// Fields entering the tuple.
    pub subset: LabelSubset,
    /// Uniform bins per landmark axis over `landmark_range`.
    pub landmark_bins: usize,
    pub landmark_range: [f64; 2],
    /// Bins of continuous yaw over [-90°, 90°].
    pub yaw_bins: usize,
}

impl Default for ComboGrid {
    fn default() -> Self {
        ComboGrid {
            subset: LabelSubset::All,
            landmark_bins: 4,
            landmark_range: [0.0, 1.0],
            yaw_bins: 6,
        }
    }
}

/// Half-open uniform bin `[lo, hi)`; values outside fall into the edge bins.
pub fn uniform_bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let b = ((v - lo) / (hi - lo) * bins as f64).floor();
    if b < 0.0 || b.is_nan() {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

fn threshold(v: f64) -> u32 {
    u32::from(v > 0.5)
}

pub fn discretize_combo(bundle: &LabelBundle, grid: &ComboGrid) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    let missing = |f: HeadKind| Error::config(format!("discretize: bundle lacks '{}'", f.name()));
    for &field in grid.subset.fields() {
        match field {
            HeadKind::Landmarks => {
                for p in bundle.landmarks.as_ref().ok_or_else(|| missing(field))? {
                    for &c in p {
                        out.push(
                            uniform_bin(c, grid.landmark_range[0], grid.landmark_range[1], grid.landmark_bins) as u32,
                        );
                    }
                }
            }
            HeadKind::Visibility => out.extend(
                bundle
                    .visibility
                    .as_ref()
                    .ok_or_else(|| missing(field))?
                    .iter()
                    .map(|&v| threshold(v)),
            ),
            HeadKind::Pose => match bundle.pose.as_ref().ok_or_else(|| missing(field))? {
                Pose::Discrete(p) => out.push(argmax(p) as u32),
                Pose::Continuous(p) => out.push(uniform_bin(p[2], -90.0, 90.0, grid.yaw_bins) as u32),
            },
            HeadKind::Gender => out.push(threshold(bundle.gender.ok_or_else(|| missing(field))?)),
            HeadKind::Attributes => out.extend(
                bundle
                    .attributes
                    .as_ref()
                    .ok_or_else(|| missing(field))?
                    .iter()
                    .map(|&v| threshold(v)),
            ),
        }
    }
    Ok(out)
}

fn kl_to_mixture(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / (0.5 * (pi + qi))).ln())
        .sum()
}

/// Jensen–Shannon divergence (natural log) between two distributions on the
/// same support.
pub fn js_divergence_probs(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::dim("js divergence", &[p.len()], &[q.len()]));
    }
    Ok((0.5 * kl_to_mixture(p, q) + 0.5 * kl_to_mixture(q, p)).clamp(0.0, std::f64::consts::LN_2))
}

/// JS divergence between the empirical distributions of two symbol sets,
/// with add-one smoothing over the union of their supports.
pub fn js_divergence<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("js divergence of an empty set".into()));
    }
    let mut counts: BTreeMap<&T, (usize, usize)> = BTreeMap::new();
    for s in a {
        counts.entry(s).or_default().0 += 1;
    }
    for s in b {
        counts.entry(s).or_default().1 += 1;
    }
    let k = counts.len() as f64;
    let (na, nb) = (a.len() as f64 + k, b.len() as f64 + k);
    let (p, q): (Vec<f64>, Vec<f64>) = counts
        .values()
        .map(|(ca, cb)| ((*ca as f64 + 1.0) / na, (*cb as f64 + 1.0) / nb))
        .unzip();
    js_divergence_probs(&p, &q)
}

/// Absolute-yaw bins for the per-pose breakdown, `[lo, hi)` with the last
/// bin closed.
pub const DEFAULT_YAW_BINS: [[f64; 2]; 3] = [[0.0, 30.0], [30.0, 60.0], [60.0, 90.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub normalizer: FaceNormalizer,
    /// Face box (width, height) in landmark units.
    pub face_box: [f64; 2],
    pub yaw_bins: Vec<[f64; 2]>,
    pub grid: ComboGrid,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            normalizer: FaceNormalizer::SqrtArea,
            face_box: [1.0, 1.0],
            yaw_bins: DEFAULT_YAW_BINS.to_vec(),
            grid: ComboGrid::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseBinMetrics {
    pub abs_yaw_lo: f64,
    pub abs_yaw_hi: f64,
    /// Samples in the bin.
    pub count: usize,
    /// Samples that entered the bin's NME (at least one visible landmark).
    pub nme_count: usize,
    pub nme_percent: Option<f64>,
    pub visibility_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub samples: usize,
    pub normalizer: String,
    pub nme_percent: Option<f64>,
    pub mae: Option<f64>,
    pub visibility_accuracy: Option<f64>,
    pub pose_accuracy: Option<f64>,
    pub pose_degree_error: Option<[f64; 3]>,
    pub gender_accuracy: Option<f64>,
    pub attribute_accuracy: Option<Vec<f64>>,
    pub mean_attribute_accuracy: Option<f64>,
    pub per_pose_bin: Vec<PoseBinMetrics>,
    pub combo_subset: String,
    pub combo_js_divergence: f64,
}

/// Ground-truth yaw in degrees: the continuous value or the bin centre.
pub fn truth_yaw(b: &LabelBundle) -> Result<f64> {
    match &b.pose {
        Some(Pose::Continuous(p)) => Ok(p[2]),
        Some(Pose::Discrete(p)) => Ok(yaw_bin_center(argmax(p), p.len())),
        None => Err(Error::contract("bundle has no pose")),
    }
}

fn column<F: Fn(&LabelBundle) -> Option<Vec<f64>>>(bundles: &[LabelBundle], f: F) -> Result<Vec<Vec<f64>>> {
    bundles
        .iter()
        .map(|b| f(b).ok_or_else(|| Error::contract("bundle lacks a field required by the metric")))
        .collect()
}

fn visible_landmark_sets(preds: &[LabelBundle], truths: &[LabelBundle]) -> bool {
    truths
        .iter()
        .zip(preds)
        .any(|(t, _)| t.visibility.as_ref().is_some_and(|v| v.contains(&1.0)))
}

impl MetricsReport {
    pub fn evaluate(
        preds: &[LabelBundle],
        truths: &[LabelBundle],
        mode: TaskMode,
        opts: &EvalOptions,
        config_hash: &str,
    ) -> Result<MetricsReport> {
        check_pairs(preds, truths)?;
        if preds.is_empty() {
            return Err(Error::UndefinedMetric("evaluation of an empty set".into()));
        }
        let mut r = MetricsReport {
            config_hash: config_hash.to_string(),
            samples: preds.len(),
            normalizer: opts.normalizer.name(),
            nme_percent: None,
            mae: None,
            visibility_accuracy: None,
            pose_accuracy: None,
            pose_degree_error: None,
            gender_accuracy: None,
            attribute_accuracy: None,
            mean_attribute_accuracy: None,
            per_pose_bin: Vec::new(),
            combo_subset: opts.grid.subset.name().to_string(),
            combo_js_divergence: 0.0,
        };
        match mode {
            TaskMode::Landmark => {
                let sizes = truths
                    .iter()
                    .map(|t| opts.normalizer.face_size(opts.face_box, t))
                    .collect::<Result<Vec<_>>>()?;
                if visible_landmark_sets(preds, truths) {
                    r.nme_percent = Some(nme(preds, truths, &sizes)?);
                    r.mae = Some(mae(preds, truths)?);
                }
                let vis_p = column(preds, |b| b.visibility.clone())?;
                let vis_t = column(truths, |b| b.visibility.clone())?;
                r.visibility_accuracy = Some(accuracy(&vis_p, &vis_t, AccuracyKind::Binary)?);
                let g_p = column(preds, |b| b.gender.map(|g| vec![g]))?;
                let g_t = column(truths, |b| b.gender.map(|g| vec![g]))?;
                r.gender_accuracy = Some(accuracy(&g_p, &g_t, AccuracyKind::Binary)?);
                match &truths[0].pose {
                    Some(Pose::Discrete(_)) => {
                        let pp = column(preds, |b| b.pose.as_ref().map(|p| p.values()))?;
                        let pt = column(truths, |b| b.pose.as_ref().map(|p| p.values()))?;
                        r.pose_accuracy = Some(accuracy(&pp, &pt, AccuracyKind::MulticlassArgmax)?);
                    }
                    _ => r.pose_degree_error = Some(pose_degree_error(preds, truths)?),
                }
                r.per_pose_bin = per_pose_bins(preds, truths, &sizes, &opts.yaw_bins)?;
            }
            TaskMode::Attribute => {
                let ap = column(preds, |b| b.attributes.clone())?;
                let at = column(truths, |b| b.attributes.clone())?;
                let n = at[0].len();
                let per: Vec<f64> = (0..n)
                    .map(|j| {
                        let pj: Vec<Vec<f64>> = ap.iter().map(|r| vec![r[j]]).collect();
                        let tj: Vec<Vec<f64>> = at.iter().map(|r| vec![r[j]]).collect();
                        accuracy(&pj, &tj, AccuracyKind::Binary)
                    })
                    .collect::<Result<_>>()?;
                r.mean_attribute_accuracy = Some(per.iter().sum::<f64>() / n as f64);
                r.attribute_accuracy = Some(per);
            }
        }
        let pa = preds
            .iter()
            .map(|b| discretize_combo(b, &opts.grid))
            .collect::<Result<Vec<_>>>()?;
        let ta = truths
            .iter()
            .map(|b| discretize_combo(b, &opts.grid))
            .collect::<Result<Vec<_>>>()?;
        r.combo_js_divergence = js_divergence(&pa, &ta)?;
        Ok(r)
    }

    /// Pretty JSON with fields in declaration order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat `(column, value)` pairs for cross-run CSV tables.
    pub fn csv_fields(&self) -> Vec<(String, String)> {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = vec![
            ("config_hash".to_string(), self.config_hash.clone()),
            ("samples".to_string(), self.samples.to_string()),
            ("nme_percent".to_string(), f(self.nme_percent)),
            ("mae".to_string(), f(self.mae)),
            ("visibility_accuracy".to_string(), f(self.visibility_accuracy)),
            ("pose_accuracy".to_string(), f(self.pose_accuracy)),
            ("yaw_error_deg".to_string(), f(self.pose_degree_error.map(|p| p[2]))),
            ("gender_accuracy".to_string(), f(self.gender_accuracy)),
            ("mean_attribute_accuracy".to_string(), f(self.mean_attribute_accuracy)),
            ("combo_js_divergence".to_string(), self.combo_js_divergence.to_string()),
        ];
        for b in &self.per_pose_bin {
            out.push((format!("nme_yaw_{}_{}", b.abs_yaw_lo, b.abs_yaw_hi), f(b.nme_percent)));
        }
        out
    }

    /// Scalar metrics by name, for cross-seed aggregation.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        self.csv_fields()
            .into_iter()
            .filter(|(k, _)| k != "config_hash" && k != "samples")
            .filter_map(|(k, v)| v.parse::<f64>().ok().map(|x| (k, x)))
            .collect()
    }
}

fn per_pose_bins(
    preds: &[LabelBundle],
    truths: &[LabelBundle],
    sizes: &[f64],
    bins: &[[f64; 2]],
) -> Result<Vec<PoseBinMetrics>> {
    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, t) in truths.iter().enumerate() {
        let y = truth_yaw(t)?.abs();
        let last = bins.len().saturating_sub(1);
        if let Some(b) = bins
            .iter()
            .position(|r| y >= r[0] && y < r[1])
            .or_else(|| bins.last().filter(|r| y == r[1]).map(|_| last))
        {
            members.entry(b).or_default().push(i);
        }
    }
    bins.iter()
        .enumerate()
        .map(|(b, r)| {
            let idx = members.get(&b).cloned().unwrap_or_default();
            let sub_p: Vec<LabelBundle> = idx.iter().map(|&i| preds[i].clone()).collect();
            let sub_t: Vec<LabelBundle> = idx.iter().map(|&i| truths[i].clone()).collect();
            let sub_s: Vec<f64> = idx.iter().map(|&i| sizes[i]).collect();
            let (nme_percent, nme_count) = match nme_with_count(&sub_p, &sub_t, &sub_s) {
                Ok((v, c)) => (Some(v), c),
                Err(Error::UndefinedMetric(_)) => (None, 0),
                Err(e) => return Err(e),
            };
            let visibility_accuracy = if idx.is_empty() {
                None
            } else {
                let vp = column(&sub_p, |b| b.visibility.clone())?;
                let vt = column(&sub_t, |b| b.visibility.clone())?;
                Some(accuracy(&vp, &vt, AccuracyKind::Binary)?)
            };
            Ok(PoseBinMetrics {
                abs_yaw_lo: r[0],
                abs_yaw_hi: r[1],
                count: idx.len(),
                nme_count,
                nme_percent,
                visibility_accuracy,
            })
        })
        .collect()
}
