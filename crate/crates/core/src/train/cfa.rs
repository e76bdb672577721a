//! Phase I: align a student backbone (through a projector) with a frozen
//! teacher encoder's features over an unlabeled pool.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::adam::{collect_params, Adam};
use super::driver::{check_resume, drive, ensure_finite, fingerprint, Phase, Pools, Position};
use super::log::{RunDir, StepRecord, TrainControl};
use super::schedule::OptimConfig;
use crate::data::{images_to_tensor, BatchPlan, ImageSet, MixedBatch, Normalization, PreprocessSpec};
use crate::error::{Error, Result};
use crate::losses::{self, AlignmentConfig};
use crate::model::{Checkpoint, CheckpointKind, CheckpointMeta, Encoder, FeatureCache, Projector, ProjectorMeta};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherSource {
    /// Run the frozen teacher on every augmented view.
    Live,
    /// Look up features precomputed on eval-mode views.
    #[default]
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfaConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub alignment: AlignmentConfig,
    pub teacher_source: TeacherSource,
}

impl Default for CfaConfig {
    fn default() -> Self {
        CfaConfig {
            optim: OptimConfig::default(),
            batch_size: 64,
            alignment: AlignmentConfig::default(),
            teacher_source: TeacherSource::default(),
        }
    }
}

/// Where target features come from.
pub enum TeacherFeatures<'a> {
    Live { encoder: &'a Encoder, norm: Normalization },
    Cache(&'a FeatureCache),
}

impl TeacherFeatures<'_> {
    fn feature_dim(&self) -> usize {
        match self {
            TeacherFeatures::Live { encoder, .. } => encoder.feature_dim(),
            TeacherFeatures::Cache(c) => c.header.feature_dim,
        }
    }
}

pub struct CfaInputs<'a> {
    pub student: Encoder,
    pub projector: Projector,
    pub teacher: TeacherFeatures<'a>,
    pub data: &'a ImageSet,
    pub preprocess: PreprocessSpec,
    pub student_norm: Normalization,
    pub seed: u64,
}

#[derive(Debug)]
pub struct CfaOutcome {
    pub backbone: Encoder,
    pub projector: Projector,
    /// Records of the steps run by this invocation.
    pub log: Vec<StepRecord>,
    pub completed: bool,
}

struct CfaPhase<'a> {
    inputs: CfaInputs<'a>,
    cfg: &'a CfaConfig,
    opt: Adam,
    fingerprint: String,
}

impl CfaPhase<'_> {
    fn targets(&self, ids: &[&str], views: &[image::RgbImage]) -> Result<Tensor> {
        match &self.inputs.teacher {
            TeacherFeatures::Live { encoder, norm } => {
                let x = images_to_tensor(views, norm, &Device::Cpu)?;
                Ok(encoder.forward(&x)?.detach())
            }
            TeacherFeatures::Cache(cache) => {
                let dim = cache.header.feature_dim;
                let mut data = Vec::with_capacity(ids.len() * dim);
                for id in ids {
                    let f = cache
                        .get(id)
                        .ok_or_else(|| Error::CacheIntegrity(format!("no cached feature for {id}")))?;
                    data.extend_from_slice(f);
                }
                Ok(Tensor::from_vec(data, (ids.len(), dim), &Device::Cpu)?)
            }
        }
    }
}

impl Phase for CfaPhase<'_> {
    fn step(&mut self, batch: &MixedBatch, epoch: usize, lr: f64, step: u64) -> Result<StepRecord> {
        let data = self.inputs.data;
        let ids: Vec<&str> = batch.labeled.iter().map(|&i| data.record(i).id.as_str()).collect();
        let views = data.views(&batch.labeled, &self.inputs.preprocess, epoch)?;
        let target = self.targets(&ids, &views)?;
        let x = images_to_tensor(&views, &self.inputs.student_norm, &Device::Cpu)?;
        let projected = self.inputs.projector.forward(&self.inputs.student.forward(&x)?)?;
        let per_sample = losses::tensor::alignment_loss(&target, &projected, self.cfg.alignment.epsilon)?;
        let loss = losses::tensor::mean(&per_sample)?;
        let value = loss.to_scalar::<f64>()?;
        ensure_finite(value, "alignment loss", step, epoch, lr, &ids)?;
        let grads = loss.backward()?;
        self.opt.step(&grads, lr)?;
        Ok(StepRecord::new(step + 1, epoch, lr, value, seed::id_digest(ids)))
    }

    fn state(&self, pos: Position) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::new(CheckpointKind::TrainState);
        meta.encoder = Some(self.inputs.student.spec().clone());
        let (input, output) = self.inputs.projector.dims();
        meta.projector = Some(ProjectorMeta {
            spec: self.inputs.projector.spec().clone(),
            input,
            output,
        });
        meta.step = pos.step;
        meta.epoch = pos.epoch;
        meta.batch_in_epoch = pos.batch;
        meta.config_fingerprint = self.fingerprint.clone();
        let mut ck = Checkpoint::new(meta);
        ck.add_encoder(&self.inputs.student)?;
        self.inputs.projector.params.export("projector.", &mut ck.tensors)?;
        self.opt.export(&mut ck.tensors)?;
        Ok(ck)
    }
}

/// Fingerprint of everything that determines a CFA trajectory.
pub fn cfa_fingerprint(cfg: &CfaConfig, inputs: &CfaInputs<'_>) -> String {
    fingerprint(&(cfg, &inputs.preprocess, &inputs.student_norm, inputs.seed, inputs.data.len()))
}

pub fn run_cfa(
    mut inputs: CfaInputs<'_>,
    cfg: &CfaConfig,
    control: TrainControl,
    mut run: Option<&mut RunDir>,
    resume: Option<&Checkpoint>,
) -> Result<CfaOutcome> {
    cfg.optim.validate()?;
    inputs.preprocess.validate()?;
    let (proj_in, proj_out) = inputs.projector.dims();
    if proj_in != inputs.student.feature_dim() {
        return Err(Error::Config(format!(
            "projector takes {proj_in} features, student emits {}",
            inputs.student.feature_dim()
        )));
    }
    if proj_out != inputs.teacher.feature_dim() {
        return Err(Error::Config(format!(
            "projector emits {proj_out} features, teacher has {}",
            inputs.teacher.feature_dim()
        )));
    }
    let crop = inputs.preprocess.crop as usize;
    if inputs.student.spec().image_size() != Some(crop) {
        return Err(Error::Config(format!("student input size differs from crop {crop}")));
    }
    if let TeacherFeatures::Live { encoder, .. } = &inputs.teacher {
        if encoder.spec().image_size() != Some(crop) {
            return Err(Error::Config(format!("teacher input size differs from crop {crop}")));
        }
    }
    if inputs.data.is_empty() {
        return Err(Error::Argument("alignment pool is empty".into()));
    }

    let fp = cfa_fingerprint(cfg, &inputs);
    let params = collect_params([
        ("backbone.", &inputs.student.params),
        ("projector.", &inputs.projector.params),
    ]);
    let mut opt = Adam::new(params, &cfg.optim)?;
    let mut start = Position::default();
    if let Some(state) = resume {
        check_resume(state, &fp)?;
        inputs.student.params.import("backbone.", &state.tensors)?;
        inputs.projector.params.import("projector.", &state.tensors)?;
        opt.import(&state.tensors, state.meta.step)?;
        start = Position::from_state(state);
    }
    let pools = Pools {
        labeled: inputs.data.len(),
        unlabeled: 0,
        plan: BatchPlan::new(cfg.batch_size, 0)?,
    };
    let seed = inputs.seed;
    let mut phase = CfaPhase {
        inputs,
        cfg,
        opt,
        fingerprint: fp,
    };
    let mut log = Vec::new();
    let completed = drive(&mut phase, &pools, &cfg.optim, seed, start, control, run.as_deref_mut(), &mut log)?;
    let CfaPhase { inputs, .. } = phase;
    if completed {
        if let Some(r) = run {
            r.save("backbone", &Checkpoint::backbone(&inputs.student)?)?;
            r.save("projector", &Checkpoint::projector(&inputs.projector)?)?;
        }
    }
    Ok(CfaOutcome {
        backbone: inputs.student,
        projector: inputs.projector,
        log,
        completed,
    })
}
