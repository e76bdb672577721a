//! Phase II: supervised fine-tuning of a teacher with the EMD loss, and
//! semi-supervised distillation of a student from ground truth plus frozen
//! teacher pseudo labels.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::adam::{collect_params, Adam};
use super::driver::{check_resume, drive, ensure_finite, fingerprint, Phase, Pools, Position};
use super::log::{RunDir, StepRecord, TrainControl};
use super::schedule::OptimConfig;
use crate::data::{images_to_tensor, BatchPlan, ImageSet, MixedBatch, Normalization, PreprocessSpec};
use crate::error::{Error, Result};
use crate::losses::{self, EmdConfig, SkdLossConfig};
use crate::metrics::{interval_error_rate, metrics_report, EvalPair, IerConfig, IerReport, MetricsReport};
use crate::model::{predict_distribution, Checkpoint, CheckpointKind, CheckpointMeta, ScoreModel};
use crate::score_dist::{mos, Discretization, ScoreDistribution};
use crate::seed;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub emd: EmdConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            optim: OptimConfig::default(),
            batch_size: 16,
            emd: EmdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkdConfig {
    pub optim: OptimConfig,
    /// Labeled samples per batch; the batch also holds `mu · b_s` unlabeled.
    pub b_s: usize,
    pub loss: SkdLossConfig,
    pub emd: EmdConfig,
}

impl Default for SkdConfig {
    fn default() -> Self {
        SkdConfig {
            optim: OptimConfig::default(),
            b_s: 8,
            loss: SkdLossConfig::default(),
            emd: EmdConfig::default(),
        }
    }
}

impl SkdConfig {
    pub fn plan(&self) -> Result<BatchPlan> {
        BatchPlan::new(self.b_s, self.loss.mu)
    }
}

/// Preprocessing and evaluation settings shared by phase II runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSetup {
    pub preprocess: PreprocessSpec,
    pub norm: Normalization,
    pub discretization: Discretization,
    pub ier: IerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub ier: IerReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model after the last step.
    pub model: ScoreModel,
    /// Highest eval-SRCC model seen at an epoch end, with its SRCC.
    pub best: Option<(ScoreModel, f64)>,
    /// Final model on the eval set.
    pub final_eval: Option<EvalReport>,
    pub log: Vec<StepRecord>,
    pub completed: bool,
}

/// Eval-mode predictions against ground truth on a labeled set.
pub fn evaluate_pairs(model: &ScoreModel, set: &ImageSet, setup: &ScoreSetup) -> Result<Vec<EvalPair>> {
    if set.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    if !set.manifest.is_labeled() {
        return Err(Error::Argument("evaluation manifest is unlabeled".into()));
    }
    check_bins(model, set)?;
    let eval = setup.preprocess.eval();
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut pairs = Vec::with_capacity(set.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let views = set.views(chunk, &eval, 0)?;
        let x = images_to_tensor(&views, &setup.norm, &Device::Cpu)?;
        let preds = predict_distribution(&model.backbone, &model.head, &x)?;
        for (&i, p) in chunk.iter().zip(preds) {
            let truth = set.manifest.label_distribution(set.record(i), setup.discretization)?;
            pairs.push(EvalPair {
                pred: mos(&p),
                truth: mos(&truth),
            });
        }
    }
    Ok(pairs)
}

pub fn evaluate(model: &ScoreModel, set: &ImageSet, setup: &ScoreSetup) -> Result<EvalReport> {
    let pairs = evaluate_pairs(model, set, setup)?;
    Ok(EvalReport {
        metrics: metrics_report(&pairs)?,
        ier: interval_error_rate(&pairs, &setup.ier)?,
    })
}

fn check_bins(model: &ScoreModel, set: &ImageSet) -> Result<()> {
    match set.manifest.bins() {
        Some(b) if b == model.bins() => Ok(()),
        Some(b) => Err(Error::Config(format!(
            "model predicts over bins {:?}, manifest uses {:?}",
            model.bins(),
            b
        ))),
        None => Ok(()),
    }
}

/// Teacher predictions used as distillation targets.
pub fn generate_pseudo_labels(teacher: &ScoreModel, images: &Tensor) -> Result<Vec<ScoreDistribution>> {
    predict_distribution(&teacher.backbone, &teacher.head, images)
}

struct ScorePhase<'a> {
    model: ScoreModel,
    teacher: Option<&'a ScoreModel>,
    labeled: &'a ImageSet,
    unlabeled: Option<&'a ImageSet>,
    eval: Option<&'a ImageSet>,
    targets: Vec<Vec<f64>>,
    beta: f64,
    emd: EmdConfig,
    setup: &'a ScoreSetup,
    opt: Adam,
    best: Option<(ScoreModel, f64)>,
    fingerprint: String,
}

impl Phase for ScorePhase<'_> {
    fn step(&mut self, batch: &MixedBatch, epoch: usize, lr: f64, step: u64) -> Result<StepRecord> {
        let b_s = batch.labeled.len();
        let mut ids: Vec<&str> = batch
            .labeled
            .iter()
            .map(|&i| self.labeled.record(i).id.as_str())
            .collect();
        let mut views = self.labeled.views(&batch.labeled, &self.setup.preprocess, epoch)?;
        if !batch.unlabeled.is_empty() {
            let pool = self.unlabeled.expect("unlabeled batches need a pool");
            ids.extend(batch.unlabeled.iter().map(|&i| pool.record(i).id.as_str()));
            views.extend(pool.views(&batch.unlabeled, &self.setup.preprocess, epoch)?);
        }
        let x = images_to_tensor(&views, &self.setup.norm, &Device::Cpu)?;
        let pred = self.model.forward(&x)?;
        let d = self.emd.d;
        let target_data: Vec<f64> = batch
            .labeled
            .iter()
            .flat_map(|&i| self.targets[i].iter().copied())
            .collect();
        let target = Tensor::from_vec(target_data, (b_s, d), &Device::Cpu)?;
        let pred_l = pred.narrow(0, 0, b_s)?;
        let loss_s = losses::tensor::mean(&losses::tensor::emd(&pred_l, &target, self.emd.r)?)?;
        let digest = seed::id_digest(ids.iter().copied());

        let (objective, rec) = match self.teacher {
            None => {
                let v = loss_s.to_scalar::<f64>()?;
                ensure_finite(v, "supervised loss", step, epoch, lr, &ids)?;
                (loss_s, StepRecord::new(step + 1, epoch, lr, v, digest))
            }
            Some(teacher) => {
                let pseudo = teacher.forward(&x)?.detach();
                let kd_terms = pseudo.dims()[0];
                let loss_kd = losses::tensor::mean(&losses::tensor::emd(&pred, &pseudo, self.emd.r)?)?;
                let total = (&loss_s + (&loss_kd * self.beta)?)?;
                let (s, kd, t) = (
                    loss_s.to_scalar::<f64>()?,
                    loss_kd.to_scalar::<f64>()?,
                    total.to_scalar::<f64>()?,
                );
                ensure_finite(t, "student loss", step, epoch, lr, &ids)?;
                let mut rec = StepRecord::new(step + 1, epoch, lr, t, digest);
                rec.loss_s = Some(s);
                rec.loss_kd = Some(kd);
                rec.loss_total = Some(t);
                rec.labeled = Some(b_s);
                rec.unlabeled = Some(batch.unlabeled.len());
                rec.kd_terms = Some(kd_terms);
                (total, rec)
            }
        };
        let grads = objective.backward()?;
        self.opt.step(&grads, lr)?;
        Ok(rec)
    }

    fn end_epoch(&mut self, epoch: usize) -> Result<()> {
        let Some(eval) = self.eval else {
            return Ok(());
        };
        match evaluate(&self.model, eval, self.setup) {
            Ok(report) => {
                let srcc = report.metrics.srcc;
                log::info!("epoch {epoch}: eval srcc {srcc:.4} plcc {:.4} mse {:.4}", report.metrics.plcc, report.metrics.mse);
                if self.best.as_ref().is_none_or(|(_, b)| srcc > *b) {
                    self.best = Some((self.model.duplicate()?, srcc));
                }
            }
            Err(Error::Degenerate(msg)) => log::warn!("epoch {epoch}: eval skipped for model selection: {msg}"),
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn state(&self, pos: Position) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::new(CheckpointKind::TrainState);
        meta.encoder = Some(self.model.backbone.spec().clone());
        meta.head = Some(self.model.head.spec().clone());
        meta.bins = Some(self.model.bins().clone());
        meta.step = pos.step;
        meta.epoch = pos.epoch;
        meta.batch_in_epoch = pos.batch;
        meta.config_fingerprint = self.fingerprint.clone();
        let mut ck = Checkpoint::new(meta);
        ck.add_score_model(&self.model)?;
        self.opt.export(&mut ck.tensors)?;
        if let Some((best, srcc)) = &self.best {
            best.backbone.params.export("best.backbone.", &mut ck.tensors)?;
            best.head.params.export("best.head.", &mut ck.tensors)?;
            ck.meta.best_srcc = Some(*srcc);
        }
        Ok(ck)
    }
}

fn label_targets(set: &ImageSet, emd: &EmdConfig, disc: Discretization) -> Result<Vec<Vec<f64>>> {
    if !set.manifest.is_labeled() {
        return Err(Error::Argument("training manifest is unlabeled".into()));
    }
    set.manifest
        .records
        .iter()
        .map(|r| {
            let d = set.manifest.label_distribution(r, disc)?;
            if d.len() != emd.d {
                return Err(Error::Config(format!("labels have {} bins, emd expects {}", d.len(), emd.d)));
            }
            Ok(d.into_probs())
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_score_phase(
    mut model: ScoreModel,
    teacher: Option<&ScoreModel>,
    labeled: &ImageSet,
    unlabeled: Option<&ImageSet>,
    eval: Option<&ImageSet>,
    plan: BatchPlan,
    beta: f64,
    emd: EmdConfig,
    optim: &OptimConfig,
    setup: &ScoreSetup,
    fp: String,
    control: TrainControl,
    mut run: Option<&mut RunDir>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    optim.validate()?;
    emd.validate()?;
    setup.preprocess.validate()?;
    setup.ier.validate()?;
    if model.bins().len() != emd.d {
        return Err(Error::Config(format!(
            "model head has {} bins, emd expects {}",
            model.bins().len(),
            emd.d
        )));
    }
    check_bins(&model, labeled)?;
    if model.backbone.spec().image_size() != Some(setup.preprocess.crop as usize) {
        return Err(Error::Config("model input size differs from the crop size".into()));
    }
    if let Some(t) = teacher {
        if t.bins() != model.bins() {
            return Err(Error::Config("teacher and student predict over different bins".into()));
        }
        if t.backbone.spec().image_size() != model.backbone.spec().image_size() {
            return Err(Error::Config("teacher and student expect different input sizes".into()));
        }
    }
    let targets = label_targets(labeled, &emd, setup.discretization)?;
    let params = collect_params([("backbone.", &model.backbone.params), ("head.", &model.head.params)]);
    let mut opt = Adam::new(params, optim)?;
    let mut start = Position::default();
    let mut best = None;
    if let Some(state) = resume {
        check_resume(state, &fp)?;
        model.backbone.params.import("backbone.", &state.tensors)?;
        model.head.params.import("head.", &state.tensors)?;
        opt.import(&state.tensors, state.meta.step)?;
        if let Some(srcc) = state.meta.best_srcc {
            let mut b = model.duplicate()?;
            b.backbone.params.import("best.backbone.", &state.tensors)?;
            b.head.params.import("best.head.", &state.tensors)?;
            best = Some((b, srcc));
        }
        start = Position::from_state(state);
    }
    let pools = Pools {
        labeled: labeled.len(),
        unlabeled: unlabeled.map_or(0, ImageSet::len),
        plan,
    };
    let mut phase = ScorePhase {
        model,
        teacher,
        labeled,
        unlabeled,
        eval,
        targets,
        beta,
        emd,
        setup,
        opt,
        best,
        fingerprint: fp,
    };
    let mut log = Vec::new();
    let completed = drive(&mut phase, &pools, optim, setup.seed, start, control, run.as_deref_mut(), &mut log)?;
    let ScorePhase { model, best, .. } = phase;
    let final_eval = match (completed, eval) {
        (true, Some(set)) => Some(evaluate(&model, set, setup)?),
        _ => None,
    };
    if completed {
        if let Some(r) = run {
            let mut ck = Checkpoint::score_model(&model)?;
            ck.meta.eval = final_eval.as_ref().map(|e| e.metrics.clone());
            r.save("model", &ck)?;
            if let Some((b, srcc)) = &best {
                let mut ck = Checkpoint::score_model(b)?;
                ck.meta.best_srcc = Some(*srcc);
                r.save("best", &ck)?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        final_eval,
        log,
        completed,
    })
}

/// Trains a backbone + head on labeled data with the mean EMD loss.
#[allow(clippy::too_many_arguments)]
pub fn finetune_teacher(
    model: ScoreModel,
    labeled: &ImageSet,
    eval: Option<&ImageSet>,
    cfg: &SupervisedConfig,
    setup: &ScoreSetup,
    control: TrainControl,
    run: Option<&mut RunDir>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let fp = fingerprint(&("finetune", cfg, setup, labeled.len()));
    let plan = BatchPlan::new(cfg.batch_size, 0)?;
    run_score_phase(
        model, None, labeled, None, eval, plan, 0.0, cfg.emd, &cfg.optim, setup, fp, control, run, resume,
    )
}

/// Trains a student against ground truth on the labeled part of each mixed
/// batch and against the frozen teacher's pseudo labels on the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn run_skd(
    student: ScoreModel,
    teacher: &ScoreModel,
    labeled: &ImageSet,
    unlabeled: Option<&ImageSet>,
    eval: Option<&ImageSet>,
    cfg: &SkdConfig,
    setup: &ScoreSetup,
    control: TrainControl,
    run: Option<&mut RunDir>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if cfg.loss.beta < 0.0 {
        return Err(Error::Config("beta must be >= 0".into()));
    }
    if cfg.loss.mu > 0 && unlabeled.is_none_or(ImageSet::is_empty) {
        return Err(Error::Config("mu > 0 needs a non-empty unlabeled pool".into()));
    }
    if let Some(u) = unlabeled {
        if u.manifest.is_labeled() {
            log::info!("unlabeled pool is a labeled manifest; its labels are ignored");
        }
    }
    let fp = fingerprint(&("skd", cfg, setup, labeled.len(), unlabeled.map_or(0, ImageSet::len)));
    run_score_phase(
        student,
        Some(teacher),
        labeled,
        unlabeled,
        eval,
        cfg.plan()?,
        cfg.loss.beta,
        cfg.emd,
        &cfg.optim,
        setup,
        fp,
        control,
        run,
        resume,
    )
}
