//! Binned aesthetic score distributions and their mean opinion score.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum deviation of `Σ probs` from one for a distribution to be valid.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Distributions read from files are renormalized when their mass is off by
/// at most this much, and rejected otherwise.
pub const FILE_RENORMALIZE_TOL: f64 = 1e-3;

/// The score represented by each bin. Strictly increasing, at least two bins.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BinSpec(Arc<[f64]>);

impl BinSpec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 bins, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("bin values must be finite".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(
                "bin values must be strictly increasing".into(),
            ));
        }
        Ok(BinSpec(values.into()))
    }

    /// Bins `1, 2, ..., d`.
    pub fn integer(d: usize) -> Result<Self> {
        Self::new((1..=d).map(|v| v as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec::integer(10).expect("ten integer bins are valid")
    }
}

impl fmt::Debug for BinSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl TryFrom<Vec<f64>> for BinSpec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        BinSpec::new(v)
    }
}

impl From<BinSpec> for Vec<f64> {
    fn from(b: BinSpec) -> Self {
        b.0.to_vec()
    }
}

/// A probability vector over score bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    probs: Vec<f64>,
    bins: BinSpec,
}

impl ScoreDistribution {
    /// Validates `probs` against `bins` without renormalizing.
    pub fn new(probs: Vec<f64>, bins: BinSpec) -> Result<Self> {
        if probs.len() != bins.len() {
            return Err(Error::Validation(format!(
                "{} probabilities for {} bins",
                probs.len(),
                bins.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Validation(format!("probability {bad} is not a valid mass")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Validation(format!("mass sums to {total}, not 1")));
        }
        Ok(ScoreDistribution { probs, bins })
    }

    /// Normalizes any non-negative vector with positive mass.
    pub fn from_weights(weights: Vec<f64>, bins: BinSpec) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Validation("weights have zero mass".into()));
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Self::new(probs, bins)
    }

    /// File-read policy: renormalize if the mass is within
    /// [`FILE_RENORMALIZE_TOL`] of one, reject otherwise.
    pub fn from_file_probs(probs: Vec<f64>, bins: BinSpec) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > FILE_RENORMALIZE_TOL {
            return Err(Error::Validation(format!(
                "stored distribution sums to {total}; beyond renormalization tolerance"
            )));
        }
        Self::from_weights(probs, bins)
    }

    /// Uniform mass over every bin.
    pub fn uniform(bins: BinSpec) -> Self {
        let d = bins.len();
        ScoreDistribution {
            probs: vec![1.0 / d as f64; d],
            bins,
        }
    }

    /// All mass on bin `index`.
    pub fn one_hot(index: usize, bins: BinSpec) -> Result<Self> {
        if index >= bins.len() {
            return Err(Error::Range(format!("bin {index} of {}", bins.len())));
        }
        let mut probs = vec![0.0; bins.len()];
        probs[index] = 1.0;
        Ok(ScoreDistribution { probs, bins })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn bins(&self) -> &BinSpec {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

/// Mean opinion score: the expectation of a distribution over its bin values.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mos(pub f64);

impl Mos {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Running prefix sums of the bin masses.
pub fn cdf(dist: &ScoreDistribution) -> Vec<f64> {
    cumulative(dist.probs())
}

pub(crate) fn cumulative(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

pub fn mos(dist: &ScoreDistribution) -> Mos {
    Mos(dist
        .probs()
        .iter()
        .zip(dist.bins().values())
        .map(|(p, v)| p * v)
        .sum())
}

/// How a scalar score is spread over bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discretization {
    /// One-hot at the closest bin value; exact midpoints go to the lower bin.
    NearestBin,
    /// Mass split between the two bracketing bins so the MOS is preserved.
    #[default]
    LinearSplit,
}

pub fn scalar_to_distribution(
    score: f64,
    bins: &BinSpec,
    mode: Discretization,
) -> Result<ScoreDistribution> {
    if !score.is_finite() || score < bins.min() || score > bins.max() {
        return Err(Error::Range(format!(
            "score {score} outside bin range [{}, {}]",
            bins.min(),
            bins.max()
        )));
    }
    let values = bins.values();
    // index of the last bin value <= score
    let lower = values.partition_point(|v| *v <= score).saturating_sub(1);
    if lower == values.len() - 1 {
        return ScoreDistribution::one_hot(lower, bins.clone());
    }
    let (lo, hi) = (values[lower], values[lower + 1]);
    match mode {
        Discretization::NearestBin => {
            let idx = if score - lo <= hi - score { lower } else { lower + 1 };
            ScoreDistribution::one_hot(idx, bins.clone())
        }
        Discretization::LinearSplit => {
            let upper_mass = (score - lo) / (hi - lo);
            let mut probs = vec![0.0; values.len()];
            probs[lower] = 1.0 - upper_mass;
            probs[lower + 1] = upper_mass;
            ScoreDistribution::new(probs, bins.clone())
        }
    }
}
