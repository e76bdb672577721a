use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    /// Square side the image is resized to first.
    pub resize: u32,
    /// Square side of the crop fed to the network.
    pub crop: u32,
    pub hflip_prob: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            resize: 256,
            crop: 224,
            hflip_prob: 0.5,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.resize
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "hflip_prob {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        Ok(())
    }

    pub fn eval(&self) -> Self {
        PreprocessSpec {
            mode: Mode::Eval,
            ..self.clone()
        }
    }
}

/// Per-channel pixel normalization applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// The convention published with the CLIP image encoders.
    pub const CLIP: Normalization = Normalization {
        mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
        std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
    };

    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

/// The random stream used to augment one sample in one epoch.
pub fn sample_rng(seed: u64, epoch: usize, id: &str) -> ChaCha8Rng {
    crate::seed::rng(seed, &["augment", &epoch.to_string(), id])
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::parse(path, e))?;
    Ok(img.to_rgb8())
}

/// Resize, crop and (in train mode) flip. The output is always `crop × crop`.
/// Train mode consumes exactly three draws from `draw` whatever the outcome.
pub fn preprocess<R: Rng>(image: &RgbImage, spec: &PreprocessSpec, draw: &mut R) -> Result<RgbImage> {
    spec.validate()?;
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Argument("empty image".into()));
    }
    let resized = if image.dimensions() == (spec.resize, spec.resize) {
        image.clone()
    } else {
        imageops::resize(image, spec.resize, spec.resize, FilterType::Triangle)
    };
    let slack = spec.resize - spec.crop;
    let (x, y, flip) = match spec.mode {
        Mode::Train => {
            let x = draw.random_range(0..=slack);
            let y = draw.random_range(0..=slack);
            let flip = draw.random::<f64>() < spec.hflip_prob;
            (x, y, flip)
        }
        Mode::Eval => (slack / 2, slack / 2, false),
    };
    let cropped = imageops::crop_imm(&resized, x, y, spec.crop, spec.crop).to_image();
    Ok(if flip {
        imageops::flip_horizontal(&cropped)
    } else {
        cropped
    })
}

/// Stacks same-sized images into a `(batch, 3, h, w)` f64 tensor.
pub fn images_to_tensor(images: &[RgbImage], norm: &Normalization, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            data.extend(img.pixels().map(|p| (p[c] as f64 / 255.0 - m) / s));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?)
}
