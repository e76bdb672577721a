//! Dataset manifests, image preprocessing and mixed-batch composition.

mod batch;
mod dataset;
mod manifest;
mod preprocess;

pub use batch::{compose_batches, BatchPlan, BatchStream, MixedBatch};
pub use dataset::{ImageSet, SkipReport};
pub use manifest::{merge_manifests, Label, Manifest, ManifestHeader, MergeStats, SampleRecord};
pub use preprocess::{
    images_to_tensor, load_image, preprocess, sample_rng, Mode, Normalization, PreprocessSpec,
};
