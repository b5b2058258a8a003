//! Landmark world: a rigid 3-D face template, rotated by a sampled head pose
//! and projected orthographically.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelBundle, LabelLayout, Pose, PoseMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkWorld {
    /// Canonical 3-D landmark positions on a unit face (x right, y up, z
    /// toward the camera).
    pub template: Vec<[f64; 3]>,
    /// Outward surface normal at each landmark.
    pub normals: Vec<[f64; 3]>,
    /// Displacement added to the template when gender = 1.
    pub gender_offsets: Vec<[f64; 3]>,
    /// P(gender = 1).
    pub gender_prior: f64,
    pub yaw_range_deg: [f64; 2],
    pub pitch_range_deg: [f64; 2],
    pub roll_range_deg: [f64; 2],
    /// A landmark is visible iff its rotated normal's z component exceeds this.
    pub visibility_threshold: f64,
    pub pose: PoseMode,
    /// Degrees per model unit for continuous pose.
    pub pose_scale_deg: f64,
    /// Std-dev of the noise on observed landmark coordinates.
    pub coord_noise: f64,
    /// Std-dev of the noise on pose and gender cue channels.
    pub cue_noise: f64,
    /// Amplitude of the gender cue channel before noise.
    pub gender_cue: f64,
    /// Pure-noise feature channels appended to every sample.
    pub distractors: usize,
}

impl Default for LandmarkWorld {
    /// Five landmarks: left eye, right eye, nose tip, left and right mouth
    /// corner. Yaw-only pose over [-90°, 90°], 13 discrete yaw bins.
    fn default() -> Self {
        LandmarkWorld {
            template: vec![
                [-0.35, 0.30, 0.55],
                [0.35, 0.30, 0.55],
                [0.0, 0.0, 0.85],
                [-0.28, -0.38, 0.58],
                [0.28, -0.38, 0.58],
            ],
            normals: vec![
                [-0.50, 0.10, 0.86],
                [0.50, 0.10, 0.86],
                [0.0, 0.0, 1.0],
                [-0.45, -0.20, 0.87],
                [0.45, -0.20, 0.87],
            ],
            gender_offsets: vec![
                [-0.06, 0.02, 0.0],
                [0.06, 0.02, 0.0],
                [0.0, -0.04, 0.08],
                [-0.04, -0.10, 0.0],
                [0.04, -0.10, 0.0],
            ],
            gender_prior: 0.5,
            yaw_range_deg: [-90.0, 90.0],
            pitch_range_deg: [0.0, 0.0],
            roll_range_deg: [0.0, 0.0],
            visibility_threshold: 0.0,
            pose: PoseMode::Continuous,
            pose_scale_deg: 90.0,
            coord_noise: 0.08,
            cue_noise: 0.6,
            gender_cue: 0.5,
            distractors: 4,
        }
    }
}

/// Latent draw for one sample: gender, yaw, pitch, roll (degrees).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceLatent {
    pub gender: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl FaceLatent {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.gender, self.yaw, self.pitch, self.roll]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [g, y, p, r] => Ok(FaceLatent {
                gender: *g,
                yaw: *y,
                pitch: *p,
                roll: *r,
            }),
            _ => Err(Error::contract(format!(
                "landmark latent needs 4 values, got {}",
                v.len()
            ))),
        }
    }
}

/// Rotates a vector by yaw (about y), then pitch (about x), then roll
/// (about z). Positive yaw turns the face so its left side moves away from
/// the camera.
pub fn rotate(p: [f64; 3], yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> [f64; 3] {
    let (sy, cy) = yaw_deg.to_radians().sin_cos();
    let (sp, cp) = pitch_deg.to_radians().sin_cos();
    let (sr, cr) = roll_deg.to_radians().sin_cos();
    let [x, y, z] = p;
    let (x, z) = (x * cy - z * sy, x * sy + z * cy);
    let (y, z) = (y * cp - z * sp, y * sp + z * cp);
    let (x, y) = (x * cr - y * sr, x * sr + y * cr);
    [x, y, z]
}

/// Equal-width yaw bin over [-90°, 90°]; the top edge falls in the last bin.
pub fn yaw_bin(yaw_deg: f64, bins: usize) -> usize {
    let width = 180.0 / bins as f64;
    let b = ((yaw_deg + 90.0) / width).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// Center of a yaw bin, in degrees.
pub fn yaw_bin_center(bin: usize, bins: usize) -> f64 {
    let width = 180.0 / bins as f64;
    -90.0 + (bin as f64 + 0.5) * width
}

impl LandmarkWorld {
    pub fn landmarks(&self) -> usize {
        self.template.len()
    }

    pub fn layout(&self) -> LabelLayout {
        let mut l = LabelLayout::landmark(self.landmarks(), self.pose);
        l.pose_scale_deg = self.pose_scale_deg;
        l
    }

    /// Noisy landmark coordinates, three pose cues, a gender cue, distractors.
    pub fn feature_width(&self) -> usize {
        2 * self.landmarks() + 4 + self.distractors
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.template.len();
        if m == 0 {
            return Err(Error::config("landmark world needs a nonempty template"));
        }
        if self.normals.len() != m || self.gender_offsets.len() != m {
            return Err(Error::config(format!(
                "template has {m} points but {} normals and {} gender offsets",
                self.normals.len(),
                self.gender_offsets.len()
            )));
        }
        for i in 0..m {
            for j in i + 1..m {
                if self.template[i] == self.template[j] {
                    return Err(Error::config(format!("template points {i} and {j} coincide")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.gender_prior) {
            return Err(Error::config("gender_prior must lie in [0, 1]"));
        }
        for (name, r) in [
            ("yaw", self.yaw_range_deg),
            ("pitch", self.pitch_range_deg),
            ("roll", self.roll_range_deg),
        ] {
            if !(r[0] <= r[1] && r[0] >= -90.0 && r[1] <= 90.0) {
                return Err(Error::config(format!("{name} range must be ordered within [-90, 90]")));
            }
        }
        if self.coord_noise < 0.0
            || self.cue_noise < 0.0
            || !self.coord_noise.is_finite()
            || !self.cue_noise.is_finite()
        {
            return Err(Error::config("noise levels must be finite and >= 0"));
        }
        self.layout().validate()
    }

    /// Projected normalized landmark coordinates and visibility for a pose.
    pub fn project(&self, gender: f64, yaw: f64, pitch: f64, roll: f64) -> (Vec<[f64; 2]>, Vec<f64>) {
        let mut points = Vec::with_capacity(self.landmarks());
        let mut vis = Vec::with_capacity(self.landmarks());
        for ((p, n), off) in self.template.iter().zip(&self.normals).zip(&self.gender_offsets) {
            let shaped = [p[0] + gender * off[0], p[1] + gender * off[1], p[2] + gender * off[2]];
            let r = rotate(shaped, yaw, pitch, roll);
            points.push([0.5 + 0.5 * r[0], 0.5 - 0.5 * r[1]]);
            let rn = rotate(*n, yaw, pitch, roll);
            vis.push(if rn[2] > self.visibility_threshold { 1.0 } else { 0.0 });
        }
        (points, vis)
    }

    pub fn pose_label(&self, latent: &FaceLatent) -> Pose {
        match self.pose {
            PoseMode::Continuous => Pose::Continuous([latent.roll, latent.pitch, latent.yaw]),
            PoseMode::Discrete { bins } => {
                let mut onehot = vec![0.0; bins];
                onehot[yaw_bin(latent.yaw, bins)] = 1.0;
                Pose::Discrete(onehot)
            }
        }
    }

    /// Ground-truth labels as an exact function of the latent draw.
    pub fn labels(&self, latent: &FaceLatent) -> LabelBundle {
        let (points, vis) = self.project(latent.gender, latent.yaw, latent.pitch, latent.roll);
        LabelBundle::landmark(points, vis, self.pose_label(latent), latent.gender)
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> FaceLatent {
        let uniform = |rng: &mut R, r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        };
        let gender = if rng.random::<f64>() < self.gender_prior {
            1.0
        } else {
            0.0
        };
        let yaw = uniform(rng, self.yaw_range_deg);
        let pitch = uniform(rng, self.pitch_range_deg);
        let roll = uniform(rng, self.roll_range_deg);
        FaceLatent {
            gender,
            yaw,
            pitch,
            roll,
        }
    }

    /// Features for a latent draw. Hidden landmarks show up as uninformative
    /// coordinates centred on the face box.
    pub fn features<R: Rng + ?Sized>(&self, latent: &FaceLatent, labels: &LabelBundle, rng: &mut R) -> Vec<f64> {
        let mut noise = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        };
        let mut x = Vec::with_capacity(self.feature_width());
        let lm = labels.landmarks.as_ref().expect("landmark labels");
        let vis = labels.visibility.as_ref().expect("landmark labels");
        for (p, &v) in lm.iter().zip(vis) {
            for &c in p {
                let base = if v == 1.0 { c } else { 0.5 };
                x.push(base + noise(self.coord_noise));
            }
        }
        x.push(latent.yaw.to_radians().sin() + noise(self.cue_noise));
        x.push(latent.pitch.to_radians().sin() + noise(self.cue_noise));
        x.push(latent.roll.to_radians().sin() + noise(self.cue_noise));
        x.push(self.gender_cue * (2.0 * latent.gender - 1.0) + noise(self.cue_noise));
        for _ in 0..self.distractors {
            x.push(noise(1.0));
        }
        x
    }
}
