use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, SampleRecord};
use super::preprocess::{load_image, preprocess, sample_rng, PreprocessSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub id: String,
    pub uri: String,
    pub reason: String,
}

/// Records dropped because their image could not be decoded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub entries: Vec<SkipEntry>,
}

impl SkipReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: SkipReport) {
        self.entries.extend(other.entries);
    }

    /// One JSON object per skipped record.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e).expect("entry serializes"))
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A manifest with every decodable image held in memory. Records whose image
/// fails to decode are removed from `manifest` and listed in `skipped`.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub manifest: Manifest,
    images: Vec<RgbImage>,
    pub skipped: SkipReport,
}

impl ImageSet {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let mut kept = Vec::with_capacity(manifest.len());
        let mut images = Vec::with_capacity(manifest.len());
        let mut skipped = SkipReport::default();
        for rec in &manifest.records {
            let path = manifest.resolve_uri(rec);
            match load_image(&path) {
                Ok(img) if img.width() > 0 && img.height() > 0 => {
                    kept.push(rec.clone());
                    images.push(img);
                }
                Ok(_) => skipped.entries.push(skip(rec, "empty image".into())),
                Err(e) => {
                    log::warn!("skipping {}: {e}", rec.id);
                    skipped.entries.push(skip(rec, e.to_string()));
                }
            }
        }
        let manifest = Manifest {
            header: manifest.header.clone(),
            records: kept,
            base_dir: manifest.base_dir.clone(),
        };
        Ok(ImageSet {
            manifest,
            images,
            skipped,
        })
    }

    /// Builds a set from already-decoded images.
    pub fn from_images(manifest: Manifest, images: Vec<RgbImage>) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(Error::Shape(format!(
                "{} records for {} images",
                manifest.len(),
                images.len()
            )));
        }
        Ok(ImageSet {
            manifest,
            images,
            skipped: SkipReport::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn record(&self, i: usize) -> &SampleRecord {
        &self.manifest.records[i]
    }

    pub fn image(&self, i: usize) -> &RgbImage {
        &self.images[i]
    }

    /// Preprocessed views of the given samples. Each view's randomness is a
    /// function of `(spec.seed, epoch, id)` only.
    pub fn views(&self, indices: &[usize], spec: &PreprocessSpec, epoch: usize) -> Result<Vec<RgbImage>> {
        indices
            .iter()
            .map(|&i| {
                let mut rng = sample_rng(spec.seed, epoch, &self.record(i).id);
                preprocess(&self.images[i], spec, &mut rng)
            })
            .collect()
    }
}

fn skip(rec: &SampleRecord, reason: String) -> SkipEntry {
    SkipEntry {
        id: rec.id.clone(),
        uri: rec.uri.clone(),
        reason,
    }
}
