use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use crate::error::{Error, Result};
use crate::seed;

/// Composition of a mixed batch: `b_s` labeled plus `mu · b_s` unlabeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPlan {
    pub b_s: usize,
    pub mu: usize,
}

impl BatchPlan {
    pub fn new(b_s: usize, mu: usize) -> Result<Self> {
        if b_s == 0 {
            return Err(Error::Argument("labeled batch size must be >= 1".into()));
        }
        Ok(BatchPlan { b_s, mu })
    }

    pub fn unlabeled(&self) -> usize {
        self.mu * self.b_s
    }

    pub fn total(&self) -> usize {
        self.b_s + self.unlabeled()
    }
}

/// Indices into the labeled and unlabeled manifests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// One epoch of mixed batches.
///
/// The labeled manifest is shuffled once and cut into `len / b_s` batches; a
/// trailing remainder smaller than `b_s` is left out of this epoch. The
/// unlabeled pool is shuffled and consumed in order, reshuffling whenever it
/// runs dry.
#[derive(Debug, Clone)]
pub struct BatchStream {
    plan: BatchPlan,
    labeled_order: Vec<usize>,
    unlabeled_len: usize,
    unlabeled_order: Vec<usize>,
    unlabeled_cursor: usize,
    cycle: usize,
    epoch_seed: u64,
    next: usize,
}

pub fn compose_batches(
    labeled: &Manifest,
    unlabeled: &Manifest,
    plan: BatchPlan,
    epoch_seed: u64,
) -> Result<BatchStream> {
    BatchStream::new(labeled.len(), unlabeled.len(), plan, epoch_seed)
}

impl BatchStream {
    pub fn new(labeled_len: usize, unlabeled_len: usize, plan: BatchPlan, epoch_seed: u64) -> Result<Self> {
        let plan = BatchPlan::new(plan.b_s, plan.mu)?;
        if labeled_len < plan.b_s {
            return Err(Error::Argument(format!(
                "{labeled_len} labeled samples cannot fill a batch of {}",
                plan.b_s
            )));
        }
        if plan.mu > 0 && unlabeled_len == 0 {
            return Err(Error::Argument("mu > 0 but the unlabeled pool is empty".into()));
        }
        let mut labeled_order: Vec<usize> = (0..labeled_len).collect();
        labeled_order.shuffle(&mut seed::rng(epoch_seed, &["labeled"]));
        let mut stream = BatchStream {
            plan,
            labeled_order,
            unlabeled_len,
            unlabeled_order: Vec::new(),
            unlabeled_cursor: 0,
            cycle: 0,
            epoch_seed,
            next: 0,
        };
        if plan.mu > 0 {
            stream.reshuffle_unlabeled();
        }
        Ok(stream)
    }

    /// Batches in a full epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.labeled_order.len() / self.plan.b_s
    }

    pub fn plan(&self) -> BatchPlan {
        self.plan
    }

    fn reshuffle_unlabeled(&mut self) {
        self.unlabeled_order = (0..self.unlabeled_len).collect();
        let cycle = self.cycle.to_string();
        self.unlabeled_order
            .shuffle(&mut seed::rng(self.epoch_seed, &["unlabeled", &cycle]));
        self.cycle += 1;
        self.unlabeled_cursor = 0;
    }

    fn take_unlabeled(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.unlabeled_cursor == self.unlabeled_order.len() {
                self.reshuffle_unlabeled();
            }
            out.push(self.unlabeled_order[self.unlabeled_cursor]);
            self.unlabeled_cursor += 1;
        }
        out
    }
}

impl Iterator for BatchStream {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        if self.next >= self.batches_per_epoch() {
            return None;
        }
        let start = self.next * self.plan.b_s;
        let labeled = self.labeled_order[start..start + self.plan.b_s].to_vec();
        let unlabeled = self.take_unlabeled(self.plan.unlabeled());
        self.next += 1;
        Some(MixedBatch { labeled, unlabeled })
    }
}
