//! The multi-task recognizer (shared trunk plus per-task heads) and the
//! label-combination discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Tape, Tensor, Var, PROB_EPS};
use crate::error::{Error, Result};
use crate::labels::{BundleBatch, LabelBundle, LabelLayout, PoseMode, TaskMode};

/// Fully connected layer, `weight` is `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform in `[-r, r]`, `r = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-r..=r)).collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("positive dims").into_param(),
            bias: Tensor::zeros(vec![fan_out]).into_param(),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![fan_in, fan_out]).into_param(),
            bias: Tensor::zeros(vec![fan_out]).into_param(),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Per-feature affine standardization fitted on the training features.
/// Stands in for batch normalization at desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Standardizer {
            mean: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    /// Column means and inverse standard deviations of `features`.
    /// Constant columns get scale 1.
    pub fn fit(features: &Tensor) -> Self {
        let (n, w) = (features.rows(), features.cols());
        let mut mean = vec![0.0; w];
        for r in 0..n {
            mean.iter_mut().zip(features.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; w];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        if features.shape().len() != 2 || features.cols() != self.mean.len() {
            return Err(Error::dim(
                "recognizer input",
                features.shape(),
                &[features.rows(), self.mean.len()],
            ));
        }
        let w = self.mean.len();
        let mut data = features.data().to_vec();
        for row in data.chunks_mut(w) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) * s;
            }
        }
        Tensor::matrix(features.rows(), w, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Landmarks,
    Visibility,
    Pose,
    Gender,
    Attributes,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Landmarks => "landmarks",
            HeadKind::Visibility => "visibility",
            HeadKind::Pose => "pose",
            HeadKind::Gender => "gender",
            HeadKind::Attributes => "attributes",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            HeadKind::Landmarks,
            HeadKind::Visibility,
            HeadKind::Pose,
            HeadKind::Gender,
            HeadKind::Attributes,
        ]
        .into_iter()
        .find(|h| h.name() == s)
    }
}

/// Head outputs recorded on a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct PredVars {
    pub landmarks: Option<Var>,
    pub visibility: Option<Var>,
    pub pose: Option<Var>,
    pub gender: Option<Var>,
    pub attributes: Option<Var>,
}

/// Heads for a layout, in declaration order.
pub fn head_widths(layout: &LabelLayout) -> Vec<(HeadKind, usize)> {
    match layout.mode {
        TaskMode::Landmark => vec![
            (HeadKind::Landmarks, 2 * layout.landmarks),
            (HeadKind::Visibility, layout.landmarks),
            (HeadKind::Pose, layout.pose_width()),
            (HeadKind::Gender, 1),
        ],
        TaskMode::Attribute => vec![(HeadKind::Attributes, layout.attributes)],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognizerModel {
    layout: LabelLayout,
    input_width: usize,
    trunk: Vec<Linear>,
    heads: Vec<(HeadKind, Linear)>,
    standardizer: Standardizer,
}

impl RecognizerModel {
    pub fn new<R: Rng + ?Sized>(
        input_width: usize,
        trunk_widths: &[usize],
        layout: LabelLayout,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(input_width, trunk_widths, layout, |i, o| Linear::glorot(i, o, rng))
    }

    /// All-zero parameters.
    pub fn zeroed(input_width: usize, trunk_widths: &[usize], layout: LabelLayout) -> Result<Self> {
        Self::build(input_width, trunk_widths, layout, Linear::zeros)
    }

    fn build(
        input_width: usize,
        trunk_widths: &[usize],
        layout: LabelLayout,
        mut make: impl FnMut(usize, usize) -> Linear,
    ) -> Result<Self> {
        layout.validate()?;
        if input_width == 0 || trunk_widths.contains(&0) {
            return Err(Error::config("recognizer widths must be positive"));
        }
        let mut trunk = Vec::with_capacity(trunk_widths.len());
        let mut prev = input_width;
        for &w in trunk_widths {
            trunk.push(make(prev, w));
            prev = w;
        }
        let heads = head_widths(&layout)
            .into_iter()
            .map(|(kind, w)| (kind, make(prev, w)))
            .collect();
        Ok(RecognizerModel {
            layout,
            input_width,
            trunk,
            heads,
            standardizer: Standardizer::identity(input_width),
        })
    }

    /// Reassembles a model from its parts (used by checkpoint loading).
    pub fn from_parts(
        layout: LabelLayout,
        input_width: usize,
        trunk: Vec<Linear>,
        heads: Vec<(HeadKind, Linear)>,
        standardizer: Standardizer,
    ) -> Result<Self> {
        layout.validate()?;
        let expected = head_widths(&layout);
        let mut prev = input_width;
        for l in &trunk {
            if l.in_width() != prev {
                return Err(Error::dim("trunk layer", &[prev], l.weight.shape()));
            }
            prev = l.out_width();
        }
        if heads.len() != expected.len() {
            return Err(Error::config("recognizer heads do not match the layout"));
        }
        for ((kind, l), (ek, ew)) in heads.iter().zip(&expected) {
            if kind != ek || l.in_width() != prev || l.out_width() != *ew {
                return Err(Error::dim("recognizer head", &[prev, *ew], l.weight.shape()));
            }
        }
        if standardizer.mean.len() != input_width || standardizer.scale.len() != input_width {
            return Err(Error::dim("standardizer", &[input_width], &[standardizer.mean.len()]));
        }
        Ok(RecognizerModel {
            layout,
            input_width,
            trunk,
            heads,
            standardizer,
        })
    }

    pub fn layout(&self) -> &LabelLayout {
        &self.layout
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn trunk(&self) -> &[Linear] {
        &self.trunk
    }

    pub fn heads(&self) -> &[(HeadKind, Linear)] {
        &self.heads
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, s: Standardizer) -> Result<()> {
        if s.mean.len() != self.input_width {
            return Err(Error::dim("standardizer", &[self.input_width], &[s.mean.len()]));
        }
        self.standardizer = s;
        Ok(())
    }

    /// Numbers emitted per sample: `2m + m + (3 | K) + 1` or `n`.
    pub fn output_width(&self) -> usize {
        self.heads.iter().map(|(_, l)| l.out_width()).sum()
    }

    /// Parameters in declaration order: trunk (w, b)…, then heads (w, b)….
    pub fn params(&self) -> Vec<&Tensor> {
        self.trunk
            .iter()
            .chain(self.heads.iter().map(|(_, l)| l))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut().map(|(_, l)| l))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Records every parameter on the tape; trainable leaves take gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind_params(self.params(), tape, trainable)
    }

    /// Standardizes raw features (no tape involvement).
    pub fn prepare_input(&self, features: &Tensor) -> Result<Tensor> {
        self.standardizer.apply(features)
    }

    /// Forward pass over already-standardized input `x` using bound
    /// parameter handles from [`RecognizerModel::bind`].
    pub fn forward_bound(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<PredVars> {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.input_width {
            return Err(Error::dim("recognizer input", xs, &[xs[0], self.input_width]));
        }
        if params.len() != 2 * (self.trunk.len() + self.heads.len()) {
            return Err(Error::contract("recognizer parameter handle count mismatch"));
        }
        let mut h = x;
        let mut p = params.chunks(2);
        for _ in &self.trunk {
            let wb = p.next().expect("length checked");
            let z = tape.linear(h, wb[0], wb[1])?;
            h = tape.relu(z)?;
        }
        let mut out = PredVars::default();
        for (kind, _) in &self.heads {
            let wb = p.next().expect("length checked");
            let z = tape.linear(h, wb[0], wb[1])?;
            match kind {
                HeadKind::Landmarks => out.landmarks = Some(z),
                HeadKind::Visibility => out.visibility = Some(tape.sigmoid(z)?),
                HeadKind::Pose => {
                    out.pose = Some(match self.layout.pose {
                        PoseMode::Continuous => z,
                        PoseMode::Discrete { .. } => tape.softmax_rows(z)?,
                    })
                }
                HeadKind::Gender => out.gender = Some(tape.sigmoid(z)?),
                HeadKind::Attributes => out.attributes = Some(tape.sigmoid(z)?),
            }
        }
        Ok(out)
    }

    /// Standardizes `features`, binds parameters and runs the forward pass.
    pub fn forward(&self, tape: &mut Tape, features: &Tensor, trainable: bool) -> Result<(Vec<Var>, PredVars)> {
        let input = self.prepare_input(features)?;
        let params = self.bind(tape, trainable);
        let x = tape.constant(&input);
        let pred = self.forward_bound(tape, &params, x)?;
        Ok((params, pred))
    }

    /// Inference: predicted labels for every row of `features`, in order.
    pub fn predict(&self, features: &Tensor) -> Result<BundleBatch> {
        let mut tape = Tape::new();
        let (_, pred) = self.forward(&mut tape, features, false)?;
        Ok(pred_batch(&tape, &pred, &self.layout))
    }

    pub fn predict_bundles(&self, features: &Tensor) -> Result<Vec<LabelBundle>> {
        Ok(self.predict(features)?.to_bundles())
    }

    /// Adds tape gradients into the parameter gradient buffers.
    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        accumulate(self.params_mut(), grads, vars)
    }
}

/// Reads head outputs off a tape into a label batch (model units).
pub fn pred_batch(tape: &Tape, pred: &PredVars, layout: &LabelLayout) -> BundleBatch {
    let get = |v: Option<Var>| v.map(|v| tape.tensor(v));
    BundleBatch {
        layout: *layout,
        landmarks: get(pred.landmarks),
        visibility: get(pred.visibility),
        pose: get(pred.pose),
        gender: get(pred.gender),
        attributes: get(pred.attributes),
    }
}

fn bind_params(params: Vec<&Tensor>, tape: &mut Tape, trainable: bool) -> Vec<Var> {
    params
        .into_iter()
        .map(|p| if trainable { tape.leaf(p) } else { tape.constant(p) })
        .collect()
}

fn accumulate(params: Vec<&mut Tensor>, grads: &Gradients, vars: &[Var]) -> Result<()> {
    if params.len() != vars.len() {
        return Err(Error::contract("gradient handle count mismatch"));
    }
    for (p, v) in params.into_iter().zip(vars) {
        grads.accumulate_into(*v, p)?;
    }
    Ok(())
}

/// Two hidden ReLU layers and a clamped sigmoid unit over a flattened
/// label combination.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    layers: [Linear; 3],
}

impl DiscriminatorModel {
    pub fn new<R: Rng + ?Sized>(input_width: usize, hidden: [usize; 2], rng: &mut R) -> Result<Self> {
        Self::check_widths(input_width, hidden)?;
        Ok(DiscriminatorModel {
            layers: [
                Linear::glorot(input_width, hidden[0], rng),
                Linear::glorot(hidden[0], hidden[1], rng),
                Linear::glorot(hidden[1], 1, rng),
            ],
        })
    }

    pub fn zeroed(input_width: usize, hidden: [usize; 2]) -> Result<Self> {
        Self::check_widths(input_width, hidden)?;
        Ok(DiscriminatorModel {
            layers: [
                Linear::zeros(input_width, hidden[0]),
                Linear::zeros(hidden[0], hidden[1]),
                Linear::zeros(hidden[1], 1),
            ],
        })
    }

    fn check_widths(input_width: usize, hidden: [usize; 2]) -> Result<()> {
        if input_width == 0 || hidden.contains(&0) {
            return Err(Error::config("discriminator widths must be positive"));
        }
        Ok(())
    }

    pub fn from_layers(layers: [Linear; 3]) -> Result<Self> {
        if layers[0].out_width() != layers[1].in_width()
            || layers[1].out_width() != layers[2].in_width()
            || layers[2].out_width() != 1
        {
            return Err(Error::config("discriminator layer shapes do not chain"));
        }
        Ok(DiscriminatorModel { layers })
    }

    pub fn layers(&self) -> &[Linear; 3] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.layers[0].out_width(), self.layers[1].out_width()]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind_params(self.params(), tape, trainable)
    }

    /// `batch × 1` probabilities in `[1e-12, 1 - 1e-12]`.
    pub fn forward_bound(&self, tape: &mut Tape, params: &[Var], combo: Var) -> Result<Var> {
        let cs = tape.shape(combo);
        if cs.len() != 2 || cs[1] != self.input_width() {
            return Err(Error::dim("discriminator input", cs, &[cs[0], self.input_width()]));
        }
        if params.len() != 6 {
            return Err(Error::contract("discriminator parameter handle count mismatch"));
        }
        let z1 = tape.linear(combo, params[0], params[1])?;
        let h1 = tape.relu(z1)?;
        let z2 = tape.linear(h1, params[2], params[3])?;
        let h2 = tape.relu(z2)?;
        let z3 = tape.linear(h2, params[4], params[5])?;
        let p = tape.sigmoid(z3)?;
        Ok(tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }

    /// Plain evaluation on a `batch × width` combo tensor.
    pub fn score(&self, combos: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(combos);
        let out = self.forward_bound(&mut tape, &params, x)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        accumulate(self.params_mut(), grads, vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> LabelLayout {
        LabelLayout::landmark(3, PoseMode::Discrete { bins: 4 })
    }

    #[test]
    fn zero_model_outputs() {
        let model = RecognizerModel::zeroed(5, &[4, 4], layout()).unwrap();
        let feats = Tensor::matrix(2, 5, vec![0.3; 10]).unwrap();
        let pred = model.predict(&feats).unwrap();
        assert!(pred.landmarks.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(pred.visibility.as_ref().unwrap().data().iter().all(|&v| v == 0.5));
        assert!(pred.gender.as_ref().unwrap().data().iter().all(|&v| v == 0.5));
        assert!(pred.pose.as_ref().unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn output_width_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = RecognizerModel::new(6, &[8], LabelLayout::landmark(5, PoseMode::Continuous), &mut rng).unwrap();
        assert_eq!(m.output_width(), 10 + 5 + 3 + 1);
        let m = RecognizerModel::new(
            6,
            &[8],
            LabelLayout::landmark(5, PoseMode::Discrete { bins: 13 }),
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.output_width(), 10 + 5 + 13 + 1);
        let m = RecognizerModel::new(6, &[8], LabelLayout::attribute(12), &mut rng).unwrap();
        assert_eq!(m.output_width(), 12);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let model = RecognizerModel::zeroed(5, &[4], layout()).unwrap();
        let feats = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(model.predict(&feats), Err(Error::Dimension { .. })));
        let d = DiscriminatorModel::zeroed(3, [4, 2]).unwrap();
        assert!(matches!(
            d.score(&Tensor::zeros(vec![1, 2])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = Linear::glorot(10, 20, &mut rng);
        let r = (6.0f64 / 30.0).sqrt();
        assert!(l.weight.data().iter().all(|w| w.abs() <= r));
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_discriminator_is_half() {
        let d = DiscriminatorModel::zeroed(4, [3, 2]).unwrap();
        let combos = Tensor::from_rows(&[[1.0, -2.0, 3.0, 0.5], [9.0, 9.0, 9.0, 9.0]]).unwrap();
        assert_eq!(d.score(&combos).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn discriminator_output_is_clamped() {
        let mut d = DiscriminatorModel::zeroed(1, [1, 1]).unwrap();
        d.layers[2].bias.data_mut()[0] = 1e3;
        assert_eq!(d.score(&Tensor::zeros(vec![1, 1])).unwrap()[0], 1.0 - PROB_EPS);
        d.layers[2].bias.data_mut()[0] = -1e3;
        assert_eq!(d.score(&Tensor::zeros(vec![1, 1])).unwrap()[0], PROB_EPS);
    }

    #[test]
    fn discriminator_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DiscriminatorModel::new(6, [5, 4], &mut rng).unwrap();
        let combo = Tensor::matrix(2, 6, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let err = gradient_check(
            |tape, x| {
                let p = d.bind(tape, false);
                let out = d.forward_bound(tape, &p, x)?;
                Ok(tape.sum(out))
            },
            &combo,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn standardizer_fit() {
        let f = Tensor::from_rows(&[[1.0, 5.0], [3.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&f);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        let z = s.apply(&f).unwrap();
        assert_eq!(z.data(), &[-1.0, 0.0, 1.0, 0.0]);
    }
}
