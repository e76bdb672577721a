use serde::Serialize;
use sha2::{Digest, Sha256};

use super::log::{RunDir, StepRecord, TrainControl};
use super::schedule::{lr_at, OptimConfig};
use crate::data::{BatchPlan, BatchStream, MixedBatch};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::seed;

/// Where a training loop stands: steps taken, epoch in progress, batches of
/// that epoch already consumed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Position {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
}

impl Position {
    pub fn from_state(state: &Checkpoint) -> Self {
        Position {
            step: state.meta.step,
            epoch: state.meta.epoch,
            batch: state.meta.batch_in_epoch,
        }
    }
}

pub(crate) trait Phase {
    fn step(&mut self, batch: &MixedBatch, epoch: usize, lr: f64, step: u64) -> Result<StepRecord>;

    /// Full resumable state at `pos`.
    fn state(&self, pos: Position) -> Result<Checkpoint>;

    fn end_epoch(&mut self, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed::derive_seed(seed, &["epoch", &epoch.to_string()])
}

pub fn fingerprint<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(json)[..16])
}

pub(crate) fn check_resume(state: &Checkpoint, fingerprint: &str) -> Result<()> {
    if state.meta.config_fingerprint != fingerprint {
        return Err(Error::Config(format!(
            "resume state was written under config {}, current config is {fingerprint}",
            state.meta.config_fingerprint
        )));
    }
    Ok(())
}

pub(crate) struct Pools {
    pub labeled: usize,
    pub unlabeled: usize,
    pub plan: BatchPlan,
}

/// Runs epochs from `start` until done or `control.max_steps` is reached.
/// Returns whether the schedule completed.
pub(crate) fn drive<P: Phase>(
    phase: &mut P,
    pools: &Pools,
    optim: &OptimConfig,
    seed: u64,
    start: Position,
    control: TrainControl,
    mut run: Option<&mut RunDir>,
    log: &mut Vec<StepRecord>,
) -> Result<bool> {
    let mut pos = start;
    while pos.epoch < optim.total_epochs {
        let epoch = pos.epoch;
        let lr = lr_at(epoch, optim);
        let stream = BatchStream::new(pools.labeled, pools.unlabeled, pools.plan, epoch_seed(seed, epoch))?;
        let per_epoch = stream.batches_per_epoch();
        for (bi, batch) in stream.enumerate().skip(pos.batch) {
            if control.max_steps.is_some_and(|m| pos.step >= m) {
                if let Some(r) = run.as_deref_mut() {
                    r.save_state(&phase.state(pos)?)?;
                }
                return Ok(false);
            }
            let rec = phase.step(&batch, epoch, lr, pos.step)?;
            pos.step += 1;
            pos.batch = bi + 1;
            if let Some(r) = run.as_deref_mut() {
                r.append(&rec)?;
                let due = control.checkpoint_every.is_some_and(|k| k > 0 && pos.step.is_multiple_of(k));
                if due && pos.batch < per_epoch {
                    r.save_state(&phase.state(pos)?)?;
                }
            }
            log.push(rec);
        }
        phase.end_epoch(epoch)?;
        pos.epoch += 1;
        pos.batch = 0;
        if let Some(r) = run.as_deref_mut() {
            r.save_state(&phase.state(pos)?)?;
        }
    }
    if let Some(r) = run.as_deref_mut() {
        r.flush()?;
    }
    Ok(true)
}

pub(crate) fn ensure_finite(value: f64, what: &str, step: u64, epoch: usize, lr: f64, ids: &[&str]) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    Err(Error::Numerical {
        step,
        epoch,
        lr,
        detail: format!("{what} is {value}"),
        batch_ids: ids.join(","),
    })
}
