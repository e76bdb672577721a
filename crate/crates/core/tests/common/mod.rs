#![allow(dead_code)]

use std::path::Path;

use aesthete::config::{Profile, RunConfig};
use aesthete::data::ImageSet;
use aesthete::model::{EncoderSpec, Encoder, PredictionHead, Projector, ScoreModel};
use aesthete::synthetic::{generate, SyntheticSpec};

pub fn desk(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::profile(Profile::Desk);
    cfg.seed = seed;
    cfg
}

pub fn score_model(cfg: &RunConfig, spec: &EncoderSpec, seed: u64) -> ScoreModel {
    let backbone = Encoder::new(spec.clone(), seed).unwrap();
    let head = PredictionHead::new(cfg.model.head.clone(), backbone.feature_dim(), cfg.model.bins.clone(), seed ^ 0x5eed).unwrap();
    ScoreModel::new(backbone, head).unwrap()
}

pub fn projector(cfg: &RunConfig, student: &Encoder, teacher_dim: usize, seed: u64) -> Projector {
    Projector::new(cfg.model.projector.clone(), student.feature_dim(), teacher_dim, seed ^ 0x9e37).unwrap()
}

/// Labeled and unlabeled image sets generated under `dir/prefix`.
pub fn synthetic(dir: &Path, prefix: &str, n: usize, n_unlabeled: usize) -> (ImageSet, ImageSet) {
    let spec = SyntheticSpec {
        n,
        n_unlabeled,
        prefix: prefix.into(),
        ..Default::default()
    };
    let set = generate(&spec, &dir.join(prefix)).unwrap();
    (ImageSet::load(&set.labeled).unwrap(), ImageSet::load(&set.unlabeled).unwrap())
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
