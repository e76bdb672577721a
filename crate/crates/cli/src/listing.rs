//! Manifests from image directories and label files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use aesthete::data::{Label, Manifest, ManifestHeader, SampleRecord};
use aesthete::{BinSpec, Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// An image directory and the source tag its records get.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDir {
    pub source: String,
    pub dir: PathBuf,
}

impl std::str::FromStr for SourceDir {
    type Err = String;

    /// `NAME=DIR`, or `DIR` tagged with its own base name.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (source, dir) = match s.split_once('=') {
            Some((name, dir)) if !name.is_empty() => (name.to_string(), PathBuf::from(dir)),
            _ => {
                let dir = PathBuf::from(s);
                let name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| format!("cannot derive a source name from `{s}`"))?;
                (name, dir)
            }
        };
        Ok(SourceDir { source, dir })
    }
}

/// Image files under `dir`, recursively, in sorted order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `key,score` or `key,p1,...,pd` rows. Keys are image file stems.
/// Blank lines, `#` comments and a non-numeric header row are skipped.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Label>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split([',', '\t', ' ']).filter(|f| !f.is_empty());
        let key = fields.next().expect("non-empty line");
        let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) if !v.is_empty() => v,
            _ if n == 0 => continue,
            _ => return Err(Error::parse(path, format!("line {}: expected a key and numbers", n + 1))),
        };
        let key = Path::new(key)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| key.to_string());
        let label = if values.len() == 1 {
            Label::Scalar(values[0])
        } else {
            Label::Distribution(values)
        };
        if out.insert(key.clone(), label).is_some() {
            return Err(Error::parse(path, format!("label for `{key}` given twice")));
        }
    }
    Ok(out)
}

/// One record per image; ids are `source/relative-path-without-extension`.
pub fn build_manifest(
    sources: &[SourceDir],
    labels: Option<&BTreeMap<String, Label>>,
    bins: &BinSpec,
    score_range: Option<(f64, f64)>,
) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut used = 0;
    for src in sources {
        let dir = fs::canonicalize(&src.dir).map_err(|e| Error::io(&src.dir, e))?;
        for path in list_images(&dir)? {
            let rel = path.strip_prefix(&dir).expect("listed under dir").with_extension("");
            let rel = rel.to_string_lossy().replace('\\', "/");
            let stem = path.file_stem().expect("file").to_string_lossy().into_owned();
            let label = match labels {
                None => None,
                Some(map) => match map.get(&stem) {
                    Some(l) => {
                        used += 1;
                        Some(l.clone())
                    }
                    None => return Err(Error::Argument(format!("no label for image {}", path.display()))),
                },
            };
            records.push(SampleRecord {
                id: format!("{}/{rel}", src.source),
                uri: path.to_string_lossy().into_owned(),
                source: src.source.clone(),
                label,
            });
        }
    }
    if let Some(map) = labels {
        if used < map.len() {
            log::warn!("{} labels matched no image", map.len() - used);
        }
    }
    let header = match labels {
        Some(_) => ManifestHeader {
            score_range,
            ..ManifestHeader::labeled(bins.clone())
        },
        None => ManifestHeader::unlabeled(),
    };
    Manifest::new(header, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_dir_syntax() {
        let s: SourceDir = "web=/data/x".parse().unwrap();
        assert_eq!((s.source.as_str(), s.dir.as_path()), ("web", Path::new("/data/x")));
        let s: SourceDir = "/data/imagenet".parse().unwrap();
        assert_eq!(s.source, "imagenet");
    }

    #[test]
    fn label_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        fs::write(&p, "name,score\n# note\na.jpg,5.5\nb 0.5 0.5\n").unwrap();
        let l = read_labels(&p).unwrap();
        assert_eq!(l["a"], Label::Scalar(5.5));
        assert_eq!(l["b"], Label::Distribution(vec![0.5, 0.5]));
        fs::write(&p, "a,1\nb,x\n").unwrap();
        assert!(read_labels(&p).is_err());
    }
}
