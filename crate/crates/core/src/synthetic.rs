//! Deterministic synthetic scoring task.
//!
//! Each image is a tinted cosine grating over a flat base level plus pixel
//! noise. Its label is computed from the saved 8-bit pixels alone:
//!
//! ```text
//! g      = (R + G + B) / (3 · 255)           per pixel
//! m, s   = mean and population std of g
//! u      = clamp(0.7 · m + 0.3 · min(s / 0.35, 1), 0, 1)
//! z      = clamp(lo + (hi − lo) · u + noise · ε, lo, hi)
//! p_i   ∝ exp(−(v_i − z)² / (2 · spread²))
//! ```
//!
//! where `v` are the bin values, `[lo, hi]` their range, and `ε ~ N(0, 1)` is
//! drawn from a generator keyed by the spec seed and the sample id. Base
//! levels and contrasts are drawn from normal distributions, so the score
//! marginal is unimodal and concentrated mid-range.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Label, Manifest, ManifestHeader, SampleRecord};
use crate::error::{Error, Result};
use crate::score_dist::{BinSpec, ScoreDistribution};
use crate::seed;

pub const SOURCE: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Cosine gratings with random orientation, frequency and phase.
    #[default]
    Grating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Labeled samples.
    pub n: usize,
    /// Samples in the unlabeled twin, drawn disjointly from the labeled ones.
    pub n_unlabeled: usize,
    pub image_size: u32,
    pub seed: u64,
    pub family: Family,
    /// Standard deviation of the latent-score noise, in score units.
    pub label_noise: f64,
    /// Width of the label bump, in score units.
    pub spread: f64,
    pub bins: BinSpec,
    /// Id prefix; different prefixes give disjoint draws under one seed.
    pub prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 64,
            n_unlabeled: 0,
            image_size: 36,
            seed: 0,
            family: Family::Grating,
            label_noise: 0.0,
            spread: 1.0,
            bins: BinSpec::default(),
            prefix: "syn".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::Config("synthetic image_size must be >= 4".into()));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return Err(Error::Config("label_noise must be finite and >= 0".into()));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config("spread must be finite and > 0".into()));
        }
        if self.prefix.is_empty() || self.prefix.contains(['/', '\\']) {
            return Err(Error::Config("prefix must be a non-empty file-name fragment".into()));
        }
        Ok(())
    }

    pub fn labeled_id(&self, i: usize) -> String {
        format!("{}-{i:05}", self.prefix)
    }

    pub fn unlabeled_id(&self, i: usize) -> String {
        format!("{}-u{i:05}", self.prefix)
    }
}

/// Draws the image for `id`.
pub fn render(spec: &SyntheticSpec, id: &str) -> RgbImage {
    let mut rng = seed::rng(spec.seed, &["synthetic-image", id]);
    let base = Normal::new(0.5, 0.12).expect("valid").sample(&mut rng);
    let contrast = Normal::new(0.15f64, 0.07).expect("valid").sample(&mut rng).abs();
    let theta = rng.random::<f64>() * std::f64::consts::PI;
    let freq = rng.random_range(1..=3) as f64;
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let size = spec.image_size;
    let (c, s) = (theta.cos(), theta.sin());
    let mut img = RgbImage::new(size, size);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let t = (x as f64 * c + y as f64 * s) / size as f64;
        let g = base + contrast * (std::f64::consts::TAU * freq * t + phase).cos();
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.02;
        for k in 0..3 {
            px.0[k] = ((g + tint[k] + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

/// Grayscale mean and population standard deviation, both in [0, 1].
pub fn gray_stats(img: &RgbImage) -> (f64, f64) {
    let n = (img.width() * img.height()) as f64;
    let gray: Vec<f64> = img
        .pixels()
        .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / (3.0 * 255.0))
        .collect();
    let mean = gray.iter().sum::<f64>() / n;
    let var = gray.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Latent score of an image, before label noise.
pub fn latent_score(img: &RgbImage, bins: &BinSpec) -> f64 {
    let (m, s) = gray_stats(img);
    let u = (0.7 * m + 0.3 * (s / 0.35).min(1.0)).clamp(0.0, 1.0);
    bins.min() + (bins.max() - bins.min()) * u
}

/// The closed-form label of an image with the given id.
pub fn label_of(img: &RgbImage, id: &str, spec: &SyntheticSpec) -> Result<ScoreDistribution> {
    let bins = &spec.bins;
    let mut z = latent_score(img, bins);
    if spec.label_noise > 0.0 {
        let mut rng = seed::rng(spec.seed, &["synthetic-label", id]);
        let eps: f64 = rng.sample(StandardNormal);
        z = (z + spec.label_noise * eps).clamp(bins.min(), bins.max());
    }
    let two_var = 2.0 * spec.spread * spec.spread;
    let weights = bins.values().iter().map(|v| (-(v - z) * (v - z) / two_var).exp()).collect();
    ScoreDistribution::from_weights(weights, bins.clone())
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub labeled: Manifest,
    pub unlabeled: Manifest,
    pub labeled_path: PathBuf,
    pub unlabeled_path: PathBuf,
}

/// Writes `images/*.png`, `labeled.jsonl` and `unlabeled.jsonl` under `dir`.
/// Labels are computed from the decoded PNGs, so they can be recomputed
/// from the files with [`label_of`].
pub fn generate(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticSet> {
    spec.validate()?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let write = |id: &str| -> Result<(String, RgbImage)> {
        let img = render(spec, id);
        let rel = format!("images/{id}.png");
        let path = dir.join(&rel);
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        Ok((rel, img))
    };
    let mut labeled = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let id = spec.labeled_id(i);
        let (uri, img) = write(&id)?;
        let label = label_of(&img, &id, spec)?;
        labeled.push(SampleRecord {
            id,
            uri,
            source: SOURCE.into(),
            label: Some(Label::Distribution(label.into_probs())),
        });
    }
    let mut unlabeled = Vec::with_capacity(spec.n_unlabeled);
    for i in 0..spec.n_unlabeled {
        let id = spec.unlabeled_id(i);
        let (uri, _) = write(&id)?;
        unlabeled.push(SampleRecord {
            id,
            uri,
            source: SOURCE.into(),
            label: None,
        });
    }
    let mut labeled = Manifest::new(ManifestHeader::labeled(spec.bins.clone()), labeled)?;
    let mut unlabeled = Manifest::new(ManifestHeader::unlabeled(), unlabeled)?;
    let labeled_path = dir.join("labeled.jsonl");
    let unlabeled_path = dir.join("unlabeled.jsonl");
    labeled.write(&labeled_path)?;
    unlabeled.write(&unlabeled_path)?;
    labeled.base_dir = Some(dir.to_path_buf());
    unlabeled.base_dir = Some(dir.to_path_buf());
    Ok(SyntheticSet {
        labeled,
        unlabeled,
        labeled_path,
        unlabeled_path,
    })
}
