//! Synthetic datasets with a known joint label distribution.
//!
//! Labels are noiseless functions of a per-sample latent draw; only the
//! features carry noise. Each sample index owns its own ChaCha stream, so
//! output does not depend on how many worker threads generate it.

mod attribute;
mod io;
mod landmark;

pub use attribute::AttributeWorld;
pub use io::{read_dataset, write_dataset, DatasetHeader};
pub use landmark::{rotate, yaw_bin, yaw_bin_center, FaceLatent, LandmarkWorld};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::hash::stable_hash;
use crate::labels::{BundleBatch, LabelBundle, LabelLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum WorldSpec {
    Landmark(LandmarkWorld),
    Attribute(AttributeWorld),
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec::Landmark(LandmarkWorld::default())
    }
}

impl WorldSpec {
    pub fn layout(&self) -> LabelLayout {
        match self {
            WorldSpec::Landmark(w) => w.layout(),
            WorldSpec::Attribute(w) => w.layout(),
        }
    }

    pub fn feature_width(&self) -> usize {
        match self {
            WorldSpec::Landmark(w) => w.feature_width(),
            WorldSpec::Attribute(w) => w.feature_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WorldSpec::Landmark(w) => w.validate(),
            WorldSpec::Attribute(w) => w.validate(),
        }
    }

    pub fn hash(&self) -> String {
        stable_hash(self)
    }

    /// Re-derives ground-truth labels from a stored latent draw.
    pub fn labels_from_latent(&self, latent: &[f64]) -> Result<LabelBundle> {
        match self {
            WorldSpec::Landmark(w) => Ok(w.labels(&FaceLatent::from_slice(latent)?)),
            WorldSpec::Attribute(w) => w.labels(latent),
        }
    }
}

/// One feature vector with its labels. `latent` is empty for samples read
/// from a file.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub labels: LabelBundle,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub layout: LabelLayout,
    pub feature_width: usize,
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub world_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `len × feature_width` tensor of the selected rows.
    pub fn features(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.feature_width);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].features);
        }
        Tensor::matrix(idx.len(), self.feature_width, data)
    }

    pub fn all_features(&self) -> Result<Tensor> {
        self.features(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn labels(&self, idx: &[usize]) -> Result<BundleBatch> {
        let bundles: Vec<&LabelBundle> = idx.iter().map(|&i| &self.samples[i].labels).collect();
        BundleBatch::from_bundles(&self.layout, &bundles)
    }

    pub fn all_labels(&self) -> Vec<LabelBundle> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            layout: self.layout,
            feature_width: self.feature_width,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            seed: self.seed,
            world_hash: self.world_hash.clone(),
        }
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_count(n_samples: usize) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::EmptyDataset("requested zero samples".into()));
    }
    Ok(())
}

pub fn generate_landmark_world(spec: &LandmarkWorld, n_samples: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    check_count(n_samples)?;
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let latent = spec.sample_latent(&mut rng);
            let labels = spec.labels(&latent);
            let features = spec.features(&latent, &labels, &mut rng);
            Sample {
                features,
                labels,
                latent: latent.to_vec(),
            }
        })
        .collect();
    Ok(Dataset {
        layout: spec.layout(),
        feature_width: spec.feature_width(),
        samples,
        seed,
        world_hash: WorldSpec::Landmark(spec.clone()).hash(),
    })
}

pub fn generate_attribute_world(spec: &AttributeWorld, n_samples: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    check_count(n_samples)?;
    let mixing = spec.mixing();
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let latent = spec.sample_latent(&mut rng);
            let labels = spec.labels(&latent)?;
            let features = spec.features(&latent, &mixing, &mut rng);
            Ok(Sample {
                features,
                labels,
                latent,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        layout: spec.layout(),
        feature_width: spec.feature_width(),
        samples,
        seed,
        world_hash: WorldSpec::Attribute(spec.clone()).hash(),
    })
}

pub fn generate(spec: &WorldSpec, n_samples: usize, seed: u64) -> Result<Dataset> {
    match spec {
        WorldSpec::Landmark(w) => generate_landmark_world(w, n_samples, seed),
        WorldSpec::Attribute(w) => generate_attribute_world(w, n_samples, seed),
    }
}

/// Seeded random partition into `round(fraction · n)` training samples and
/// the rest. Each part keeps the original sample order.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let (train, test) = idx.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(train), dataset.subset(test)))
}
