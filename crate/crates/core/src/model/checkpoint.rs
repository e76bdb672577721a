//! Checkpoints are directories holding `meta.json` and `tensors.safetensors`,
//! replaced atomically by writing a sibling temp directory then renaming.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderSpec};
use super::heads::{HeadSpec, PredictionHead, Projector, ProjectorSpec, ScoreModel};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::score_dist::BinSpec;

pub const META_FILE: &str = "meta.json";
pub const TENSOR_FILE: &str = "tensors.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Backbone,
    Projector,
    ScoreModel,
    /// Everything needed to resume a training loop, optimizer included.
    TrainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorMeta {
    pub spec: ProjectorSpec,
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    #[serde(default)]
    pub encoder: Option<EncoderSpec>,
    #[serde(default)]
    pub projector: Option<ProjectorMeta>,
    #[serde(default)]
    pub head: Option<HeadSpec>,
    #[serde(default)]
    pub bins: Option<BinSpec>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Epoch in progress and batches of it already consumed.
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub config_fingerprint: String,
    #[serde(default)]
    pub eval: Option<MetricsReport>,
    #[serde(default)]
    pub best_srcc: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(kind: CheckpointKind) -> Self {
        CheckpointMeta {
            kind,
            encoder: None,
            projector: None,
            head: None,
            bins: None,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            config_fingerprint: String::new(),
            eval: None,
            best_srcc: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn backbone(encoder: &Encoder) -> Result<Self> {
        let mut meta = CheckpointMeta::new(CheckpointKind::Backbone);
        meta.encoder = Some(encoder.spec().clone());
        let mut ck = Checkpoint::new(meta);
        ck.add_encoder(encoder)?;
        Ok(ck)
    }

    pub fn projector(projector: &Projector) -> Result<Self> {
        let mut meta = CheckpointMeta::new(CheckpointKind::Projector);
        let (input, output) = projector.dims();
        meta.projector = Some(ProjectorMeta {
            spec: projector.spec().clone(),
            input,
            output,
        });
        let mut ck = Checkpoint::new(meta);
        projector.params.export("projector.", &mut ck.tensors)?;
        Ok(ck)
    }

    pub fn score_model(model: &ScoreModel) -> Result<Self> {
        let mut meta = CheckpointMeta::new(CheckpointKind::ScoreModel);
        meta.encoder = Some(model.backbone.spec().clone());
        meta.head = Some(model.head.spec().clone());
        meta.bins = Some(model.bins().clone());
        let mut ck = Checkpoint::new(meta);
        ck.add_score_model(model)?;
        Ok(ck)
    }

    pub fn add_encoder(&mut self, encoder: &Encoder) -> Result<()> {
        encoder.params.export("backbone.", &mut self.tensors)
    }

    pub fn add_score_model(&mut self, model: &ScoreModel) -> Result<()> {
        model.backbone.params.export("backbone.", &mut self.tensors)?;
        model.head.params.export("head.", &mut self.tensors)
    }

    /// Rebuilds the backbone stored in this checkpoint.
    pub fn to_encoder(&self) -> Result<Encoder> {
        let spec = self
            .meta
            .encoder
            .clone()
            .ok_or_else(|| Error::Config("checkpoint holds no backbone".into()))?;
        let mut enc = Encoder::new(spec, 0)?;
        enc.params.import("backbone.", &self.tensors)?;
        Ok(enc)
    }

    pub fn to_projector(&self) -> Result<Projector> {
        let pm = self
            .meta
            .projector
            .clone()
            .ok_or_else(|| Error::Config("checkpoint holds no projector".into()))?;
        let mut p = Projector::new(pm.spec, pm.input, pm.output, 0)?;
        p.params.import("projector.", &self.tensors)?;
        Ok(p)
    }

    pub fn to_score_model(&self) -> Result<ScoreModel> {
        let backbone = self.to_encoder()?;
        let (head_spec, bins) = match (&self.meta.head, &self.meta.bins) {
            (Some(h), Some(b)) => (h.clone(), b.clone()),
            _ => return Err(Error::Config("checkpoint holds no prediction head".into())),
        };
        let mut head = PredictionHead::new(head_spec, backbone.feature_dim(), bins, 0)?;
        head.params.import("head.", &self.tensors)?;
        ScoreModel::new(backbone, head)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dir
            .file_name()
            .ok_or_else(|| Error::Argument(format!("bad checkpoint path {}", dir.display())))?
            .to_string_lossy()
            .into_owned();
        let tmp = parent.join(format!(".{name}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(tmp.join(META_FILE), meta).map_err(|e| Error::io(tmp.join(META_FILE), e))?;
        let map: HashMap<&str, Tensor> = self
            .tensors
            .iter()
            .map(|(k, v)| (k.as_str(), v.clone()))
            .collect();
        candle_core::safetensors::save(&map, tmp.join(TENSOR_FILE))?;
        let old = parent.join(format!(".{name}.old"));
        if dir.exists() {
            if old.exists() {
                fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
            }
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path: PathBuf = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e))?;
        let tensor_path = dir.join(TENSOR_FILE);
        if !tensor_path.exists() {
            return Err(Error::io(
                &tensor_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing tensor file"),
            ));
        }
        let tensors = candle_core::safetensors::load(&tensor_path, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Checkpoint { meta, tensors })
    }
}
