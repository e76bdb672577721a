//! Encoders, projector, prediction head, feature cache and checkpoints.

mod cache;
mod checkpoint;
mod encoder;
mod heads;
mod layers;
mod params;

use std::ops::Deref;

use serde::{Deserialize, Serialize};

pub use cache::{cache_features, open_or_build, preprocess_fingerprint, teacher_id, CacheHeader, FeatureCache};
pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, ProjectorMeta};
pub use encoder::{Encoder, EncoderSpec};
pub use heads::{predict_distribution, HeadSpec, PredictionHead, Projector, ProjectorSpec, ScoreModel};
pub use params::ParamStore;

/// A fixed-length feature, e.g. a CLS token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}
