//! MOS-level evaluation: MSE, Pearson and Spearman correlation, and the
//! per-interval error rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_dist::Mos;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub pred: Mos,
    pub truth: Mos,
}

impl EvalPair {
    pub fn new(pred: f64, truth: f64) -> Self {
        EvalPair {
            pred: Mos(pred),
            truth: Mos(truth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IerConfig {
    /// Number of equal-width intervals.
    pub k: usize,
    /// Absolute error above which a prediction counts as wrong.
    pub t: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for IerConfig {
    fn default() -> Self {
        IerConfig {
            k: 9,
            t: 0.5,
            lo: 1.0,
            hi: 10.0,
        }
    }
}

impl IerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("ier interval count must be >= 1".into()));
        }
        if !(self.t > 0.0) {
            return Err(Error::Config(format!("ier tolerance must be > 0, got {}", self.t)));
        }
        if !(self.lo < self.hi) {
            return Err(Error::Config(format!(
                "ier range [{}, {}) is empty",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// The `k + 1` interval edges.
    pub fn edges(&self) -> Vec<f64> {
        let width = self.hi - self.lo;
        (0..=self.k)
            .map(|i| {
                if i == self.k {
                    self.hi
                } else {
                    self.lo + width * i as f64 / self.k as f64
                }
            })
            .collect()
    }

    /// Interval holding `score`: half-open `[lo_k, hi_k)`, with the top
    /// interval closed. Scores outside the range clamp to the edge intervals.
    pub fn interval_of(&self, score: f64, edges: &[f64]) -> usize {
        // number of interior edges <= score
        let interior = &edges[1..self.k];
        interior.partition_point(|e| *e <= score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IerInterval {
    pub lo: f64,
    pub hi: f64,
    /// Samples whose truth score falls in this interval.
    pub n: usize,
    pub errors: usize,
    /// `None` when the interval holds no samples.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IerReport {
    pub t: f64,
    pub intervals: Vec<IerInterval>,
    /// Samples whose truth lay outside `[lo, hi]` and were clamped into an
    /// edge interval.
    pub clamped: usize,
}

impl IerReport {
    pub fn total(&self) -> usize {
        self.intervals.iter().map(|i| i.n).sum()
    }
}

fn check_finite(pairs: &[EvalPair]) -> Result<()> {
    if pairs
        .iter()
        .any(|p| !p.pred.0.is_finite() || !p.truth.0.is_finite())
    {
        return Err(Error::Argument("non-finite score in evaluation pairs".into()));
    }
    Ok(())
}

pub fn mse(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("mse of an empty set".into()));
    }
    check_finite(pairs)?;
    let sum: f64 = pairs
        .iter()
        .map(|p| (p.pred.0 - p.truth.0).powi(2))
        .sum();
    Ok(sum / pairs.len() as f64)
}

fn pearson(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Argument(format!("{what} needs at least 2 samples, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(format!("{what}: a series has zero variance")));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn split(pairs: &[EvalPair]) -> (Vec<f64>, Vec<f64>) {
    pairs.iter().map(|p| (p.pred.0, p.truth.0)).unzip()
}

pub fn plcc(pairs: &[EvalPair]) -> Result<f64> {
    check_finite(pairs)?;
    let (x, y) = split(pairs);
    pearson(&x, &y, "plcc")
}

/// One-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn srcc(pairs: &[EvalPair]) -> Result<f64> {
    check_finite(pairs)?;
    let (x, y) = split(pairs);
    pearson(&average_ranks(&x), &average_ranks(&y), "srcc")
}

pub fn metrics_report(pairs: &[EvalPair]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mse: mse(pairs)?,
        srcc: srcc(pairs)?,
        plcc: plcc(pairs)?,
        n: pairs.len(),
    })
}

/// Per-interval error rate. Samples are assigned to intervals by their truth
/// score; an interval's rate is the fraction with `|pred - truth| > t`.
pub fn interval_error_rate(pairs: &[EvalPair], cfg: &IerConfig) -> Result<IerReport> {
    cfg.validate()?;
    check_finite(pairs)?;
    let edges = cfg.edges();
    let mut counts = vec![(0usize, 0usize); cfg.k];
    let mut clamped = 0;
    for p in pairs {
        let truth = p.truth.0;
        if truth < cfg.lo || truth > cfg.hi {
            clamped += 1;
        }
        let slot = &mut counts[cfg.interval_of(truth, &edges)];
        slot.0 += 1;
        if (p.pred.0 - truth).abs() > cfg.t {
            slot.1 += 1;
        }
    }
    let intervals = counts
        .into_iter()
        .enumerate()
        .map(|(k, (n, errors))| IerInterval {
            lo: edges[k],
            hi: edges[k + 1],
            n,
            errors,
            rate: (n > 0).then(|| errors as f64 / n as f64),
        })
        .collect();
    Ok(IerReport {
        t: cfg.t,
        intervals,
        clamped,
    })
}
