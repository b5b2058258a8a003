//! Benchmark fixtures shared by the criterion targets.

use mtal_core::adversary::LabelSubset;
use mtal_core::synthgen::{generate, Dataset, WorldSpec};
use mtal_core::{DiscriminatorModel, ModelConfig, RecognizerModel};

/// Default landmark world with default-shaped models.
pub fn landmark_fixture(samples: usize) -> (Dataset, RecognizerModel, DiscriminatorModel) {
    let data = generate(&WorldSpec::default(), samples, 1).expect("default world generates");
    let (r, d) = mtal_core::trainer::init_models(&data, &ModelConfig::default(), LabelSubset::All, 1)
        .expect("default models build");
    (data, r, d)
}
