//! Multi-task adversarial learning at desk scale.
//!
//! A multi-task recognizer maps feature vectors to a bundle of face-analysis
//! labels (landmarks, visibility, pose, gender, or binary attributes). A
//! discriminator over flattened label combinations is trained to separate
//! ground-truth combos from predicted ones, and the recognizer is trained
//! against it, which pulls the joint distribution of predicted labels
//! toward the ground-truth joint distribution.

pub mod adversary;
pub mod checkpoint;
pub mod diffcore;
pub mod error;
pub mod hash;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod synthgen;
pub mod trainer;

pub use adversary::LabelSubset;
pub use diffcore::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use labels::{BundleBatch, LabelBundle, LabelLayout, Pose, PoseMode, TaskMode};
pub use losses::LossWeights;
pub use metrics::MetricsReport;
pub use models::{DiscriminatorModel, RecognizerModel};
pub use synthgen::{Dataset, WorldSpec};
pub use trainer::{ModelConfig, TrainConfig, TrainLog};
