use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_dist::{scalar_to_distribution, BinSpec, Discretization, ScoreDistribution};

/// A ground-truth label: either a full score histogram or a scalar MOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Scalar(f64),
    Distribution(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub uri: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub labeled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<BinSpec>,
    /// Declared range of scalar labels; defaults to the bin range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_range: Option<(f64, f64)>,
}

impl ManifestHeader {
    pub fn unlabeled() -> Self {
        ManifestHeader {
            labeled: false,
            bins: None,
            score_range: None,
        }
    }

    pub fn labeled(bins: BinSpec) -> Self {
        ManifestHeader {
            labeled: true,
            bins: Some(bins),
            score_range: None,
        }
    }

    pub fn score_range(&self) -> Option<(f64, f64)> {
        self.score_range
            .or_else(|| self.bins.as_ref().map(|b| (b.min(), b.max())))
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    manifest: ManifestHeader,
}

/// A typed list of samples, all labeled or all unlabeled.
///
/// On disk: one JSON object per line, the first being `{"manifest": header}`.
/// Relative URIs resolve against the manifest file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
    pub base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn new(header: ManifestHeader, records: Vec<SampleRecord>) -> Result<Self> {
        let m = Manifest {
            header,
            records,
            base_dir: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.header.labeled
    }

    pub fn bins(&self) -> Option<&BinSpec> {
        self.header.bins.as_ref()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        if self.header.labeled && self.header.bins.is_none() {
            return Err(Error::Validation("labeled manifest without bin spec".into()));
        }
        for r in &self.records {
            if r.uri.is_empty() {
                return Err(Error::Validation(format!("record {} has an empty uri", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {}", r.id)));
            }
            match (&r.label, self.header.labeled) {
                (None, true) => {
                    return Err(Error::Validation(format!(
                        "record {} has no label in a labeled manifest",
                        r.id
                    )))
                }
                (Some(_), false) => {
                    return Err(Error::Validation(format!(
                        "record {} has a label in an unlabeled manifest",
                        r.id
                    )))
                }
                (Some(label), true) => {
                    self.check_label(&r.id, label)?;
                }
                (None, false) => {}
            }
        }
        Ok(())
    }

    fn check_label(&self, id: &str, label: &Label) -> Result<()> {
        let bins = self.header.bins.as_ref().expect("checked by validate");
        match label {
            Label::Scalar(s) => {
                let (lo, hi) = self.header.score_range().expect("labeled manifests have bins");
                if !(lo..=hi).contains(s) {
                    return Err(Error::Range(format!("label {s} of {id} outside [{lo}, {hi}]")));
                }
            }
            Label::Distribution(p) => {
                ScoreDistribution::from_file_probs(p.clone(), bins.clone())
                    .map_err(|e| Error::Validation(format!("label of {id}: {e}")))?;
            }
        }
        Ok(())
    }

    /// The record's label as a distribution; scalar labels are discretized.
    pub fn label_distribution(
        &self,
        record: &SampleRecord,
        mode: Discretization,
    ) -> Result<ScoreDistribution> {
        let bins = self
            .header
            .bins
            .as_ref()
            .ok_or_else(|| Error::Argument("unlabeled manifest has no label bins".into()))?;
        match &record.label {
            None => Err(Error::Argument(format!("record {} is unlabeled", record.id))),
            Some(Label::Distribution(p)) => ScoreDistribution::from_file_probs(p.clone(), bins.clone()),
            Some(Label::Scalar(s)) => {
                let (lo, hi) = self.header.score_range().expect("labeled");
                // map the declared range onto the bin range before splitting
                let mapped = if (lo, hi) == (bins.min(), bins.max()) {
                    *s
                } else {
                    bins.min() + (s - lo) / (hi - lo) * (bins.max() - bins.min())
                };
                scalar_to_distribution(mapped, bins, mode)
            }
        }
    }

    pub fn resolve_uri(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.uri);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(Error::parse(path, "missing manifest header line")),
                Some((_, line)) => {
                    let line = line.map_err(|e| Error::io(path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let h: HeaderLine = serde_json::from_str(&line)
                        .map_err(|e| Error::parse(path, format!("header: {e}")))?;
                    break h.manifest;
                }
            }
        };
        let mut records = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        let m = Manifest {
            header,
            records,
            base_dir: path.parent().map(Path::to_path_buf),
        };
        m.validate().map_err(|e| Error::parse(path, e))?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let header = HeaderLine {
            manifest: self.header.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Record count per source tag.
    pub fn source_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.source.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Same manifest with every relative URI made absolute.
    pub fn with_resolved_uris(&self) -> Manifest {
        let records = self
            .records
            .iter()
            .map(|r| SampleRecord {
                uri: self.resolve_uri(r).to_string_lossy().into_owned(),
                ..r.clone()
            })
            .collect();
        Manifest {
            header: self.header.clone(),
            records,
            base_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStats {
    pub total: usize,
    pub per_source: BTreeMap<String, usize>,
    /// Records dropped because their id was already present.
    pub duplicates: usize,
    pub labeled: bool,
}

/// Concatenates manifests, keeping the first record of every id and sorting
/// the result by id. URIs are resolved so the merged manifest is portable.
pub fn merge_manifests(sources: &[Manifest]) -> Result<(Manifest, MergeStats)> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Argument("nothing to merge".into()))?;
    let labeled = first.is_labeled();
    for m in sources {
        if m.is_labeled() != labeled {
            return Err(Error::Composition(
                "cannot merge labeled with unlabeled manifests".into(),
            ));
        }
        if labeled && m.header != first.header {
            return Err(Error::Composition(
                "labeled manifests disagree on bins or score range".into(),
            ));
        }
    }
    let mut seen = HashSet::new();
    let mut duplicates = 0;
    let mut records = Vec::new();
    for m in sources {
        for r in &m.with_resolved_uris().records {
            if seen.insert(r.id.clone()) {
                records.push(r.clone());
            } else {
                duplicates += 1;
            }
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    if duplicates > 0 {
        log::warn!("merge dropped {duplicates} records with duplicate ids");
    }
    let merged = Manifest::new(first.header.clone(), records)?;
    let stats = MergeStats {
        total: merged.len(),
        per_source: merged.source_counts(),
        duplicates,
        labeled,
    };
    Ok((merged, stats))
}
