//! On-disk teacher features keyed by sample id.
//!
//! Layout: the magic `AFCACHE1`, a little-endian `u32` header length, the
//! JSON header, then for every id in sorted order a `u32` id length, the id
//! bytes and `feature_dim` little-endian `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::Encoder;
use super::FeatureVector;
use crate::data::{images_to_tensor, ImageSet, Normalization, PreprocessSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AFCACHE1";
const ENCODE_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    /// Identity of the teacher: its architecture and parameter hash.
    pub teacher_id: String,
    /// Digest of the eval-mode preprocessing and pixel normalization.
    pub preprocess_fingerprint: String,
    pub feature_dim: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub header: CacheHeader,
    pub features: BTreeMap<String, FeatureVector>,
}

pub fn teacher_id(encoder: &Encoder) -> Result<String> {
    let spec = serde_json::to_string(encoder.spec()).expect("spec serializes");
    Ok(format!("{}@{}", short_digest(spec.as_bytes()), encoder.params.hash()?))
}

pub fn preprocess_fingerprint(spec: &PreprocessSpec, norm: &Normalization) -> String {
    let eval = spec.eval();
    // the seed does not influence eval-mode output
    let key = serde_json::json!({
        "resize": eval.resize,
        "crop": eval.crop,
        "mean": norm.mean,
        "std": norm.std,
    });
    short_digest(key.to_string().as_bytes())
}

fn short_digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..16])
}

impl FeatureCache {
    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.features.get(id)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (id, v) in &self.features {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in &v.0 {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::parse(path, m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a feature cache"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let hlen = u32::from_le_bytes(len) as usize;
        if r.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CacheHeader = serde_json::from_slice(&r[..hlen]).map_err(|e| Error::parse(path, e))?;
        r = &r[hlen..];
        let mut features = BTreeMap::new();
        for _ in 0..header.count {
            r.read_exact(&mut len).map_err(|_| bad("truncated id length"))?;
            let ilen = u32::from_le_bytes(len) as usize;
            if r.len() < ilen + 8 * header.feature_dim {
                return Err(bad("truncated record"));
            }
            let id = String::from_utf8(r[..ilen].to_vec()).map_err(|_| bad("id is not utf-8"))?;
            r = &r[ilen..];
            let values = r[..8 * header.feature_dim]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            r = &r[8 * header.feature_dim..];
            features.insert(id, FeatureVector(values));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(FeatureCache { header, features })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads a cache and checks it was produced by `teacher_id` under
    /// `fingerprint`.
    pub fn read_checked(path: &Path, teacher_id: &str, fingerprint: &str) -> Result<Self> {
        let cache = Self::read(path)?;
        cache.check(teacher_id, fingerprint)?;
        Ok(cache)
    }

    pub fn check(&self, teacher_id: &str, fingerprint: &str) -> Result<()> {
        if self.header.teacher_id != teacher_id {
            return Err(Error::CacheIntegrity(format!(
                "cache built by teacher {}, expected {teacher_id}",
                self.header.teacher_id
            )));
        }
        if self.header.preprocess_fingerprint != fingerprint {
            return Err(Error::CacheIntegrity(format!(
                "cache preprocessing {} differs from {fingerprint}",
                self.header.preprocess_fingerprint
            )));
        }
        if let Some((id, _)) = self
            .features
            .iter()
            .find(|(_, v)| v.0.len() != self.header.feature_dim)
        {
            return Err(Error::CacheIntegrity(format!("feature of {id} has the wrong length")));
        }
        Ok(())
    }
}

/// Encodes every image of `set` with the frozen `encoder` under eval-mode
/// preprocessing.
pub fn cache_features(
    encoder: &Encoder,
    set: &ImageSet,
    spec: &PreprocessSpec,
    norm: &Normalization,
) -> Result<FeatureCache> {
    let eval = spec.eval();
    let mut features = BTreeMap::new();
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(ENCODE_CHUNK) {
        let views = set.views(chunk, &eval, 0)?;
        let batch = images_to_tensor(&views, norm, &Device::Cpu)?;
        for (&i, v) in chunk.iter().zip(encoder.encode(&batch)?) {
            features.insert(set.record(i).id.clone(), v);
        }
    }
    Ok(FeatureCache {
        header: CacheHeader {
            teacher_id: teacher_id(encoder)?,
            preprocess_fingerprint: preprocess_fingerprint(spec, norm),
            feature_dim: encoder.feature_dim(),
            count: features.len(),
        },
        features,
    })
}

/// Reuses the cache at `path` when it matches this teacher and preprocessing,
/// builds and writes it when absent, and refuses to overwrite a cache built
/// under different parameters.
pub fn open_or_build(
    path: &Path,
    encoder: &Encoder,
    set: &ImageSet,
    spec: &PreprocessSpec,
    norm: &Normalization,
) -> Result<FeatureCache> {
    let id = teacher_id(encoder)?;
    let fp = preprocess_fingerprint(spec, norm);
    if path.exists() {
        let cache = FeatureCache::read_checked(path, &id, &fp)?;
        if let Some(rec) = set.manifest.records.iter().find(|r| cache.get(&r.id).is_none()) {
            return Err(Error::CacheIntegrity(format!("cache lacks sample {}", rec.id)));
        }
        return Ok(cache);
    }
    let cache = cache_features(encoder, set, spec, norm)?;
    cache.write(path)?;
    Ok(cache)
}
