use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// The objective that was minimized at this step.
    pub loss: f64,
    pub batch_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_kd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled: Option<usize>,
    /// Number of per-sample terms averaged into `loss_kd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_terms: Option<usize>,
}

impl StepRecord {
    pub fn new(step: u64, epoch: usize, lr: f64, loss: f64, batch_digest: String) -> Self {
        StepRecord {
            step,
            epoch,
            lr,
            loss,
            batch_digest,
            loss_s: None,
            loss_kd: None,
            loss_total: None,
            labeled: None,
            unlabeled: None,
            kd_terms: None,
        }
    }
}

/// Mean loss of every epoch present in `log`, in epoch order.
pub fn epoch_means(log: &[StepRecord]) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

pub const LOG_FILE: &str = "log.jsonl";
pub const STATE_DIR: &str = "checkpoints/last";

/// A run directory: step log, resumable training state and outputs.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    log: BufWriter<File>,
}

impl RunDir {
    /// Starts a fresh run, truncating any previous log.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(LOG_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            log: BufWriter::new(file),
        })
    }

    /// Reopens a run for resumption from the saved training state, dropping
    /// log records past that state's step.
    pub fn resume(root: &Path) -> Result<(Self, Checkpoint)> {
        let state = Checkpoint::load(&root.join(STATE_DIR))?;
        let path = root.join(LOG_FILE);
        let kept: Vec<StepRecord> = read_log(&path)?
            .into_iter()
            .filter(|r| r.step <= state.meta.step)
            .collect();
        let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &kept {
            writeln!(file, "{}", serde_json::to_string(r).expect("record serializes"))
                .map_err(|e| Error::io(&path, e))?;
        }
        drop(file);
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok((
            RunDir {
                root: root.to_path_buf(),
                log: BufWriter::new(file),
            },
            state,
        ))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn append(&mut self, rec: &StepRecord) -> Result<()> {
        let path = self.root.join(LOG_FILE);
        writeln!(self.log, "{}", serde_json::to_string(rec).expect("record serializes"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        let path = self.root.join(LOG_FILE);
        self.log.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save_state(&mut self, state: &Checkpoint) -> Result<()> {
        self.flush()?;
        state.save(&self.root.join(STATE_DIR))
    }

    pub fn save(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        ck.save(&self.root.join(name))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// Limits on a training invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainControl {
    /// Stop (after saving state) once this many total steps have run.
    pub max_steps: Option<u64>,
    /// Save resumable state every this many steps, besides epoch ends.
    pub checkpoint_every: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_means_group_consecutive_records() {
        let rec = |e, l| StepRecord::new(0, e, 1.0, l, String::new());
        let log = vec![rec(0, 1.0), rec(0, 3.0), rec(1, 0.5)];
        assert_eq!(epoch_means(&log), vec![2.0, 0.5]);
    }
}
