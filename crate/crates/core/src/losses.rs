//! Training objectives: cosine feature alignment, the CDF-based earth mover's
//! distance, and the composite semi-supervised student objective.
//!
//! Each objective exists twice. The slice functions here are the reference
//! route with closed-form gradients; [`tensor`] holds the batched versions
//! that train through candle's autodiff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_dist::ScoreDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Lower bound on the norm product in the cosine denominator.
    pub epsilon: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmdConfig {
    /// Exponent on the per-bin CDF gap; `r >= 1`.
    pub r: f64,
    /// Bin count every distribution must have.
    pub d: usize,
}

impl Default for EmdConfig {
    fn default() -> Self {
        EmdConfig { r: 2.0, d: 10 }
    }
}

impl EmdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 1.0) || !self.r.is_finite() {
            return Err(Error::Config(format!("emd exponent r must be >= 1, got {}", self.r)));
        }
        if self.d < 2 {
            return Err(Error::Config(format!("emd bin count d must be >= 2, got {}", self.d)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkdLossConfig {
    /// Weight of the distillation term.
    pub beta: f64,
    /// Unlabeled samples per labeled sample in a batch.
    pub mu: usize,
}

impl Default for SkdLossConfig {
    fn default() -> Self {
        SkdLossConfig { beta: 15.0, mu: 15 }
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty feature vector".into()));
    }
    Ok(())
}

/// `1 - x1·x2 / max(|x1| |x2|, eps)`, in `[0, 2]`.
pub fn alignment_loss(x1: &[f64], x2: &[f64], cfg: &AlignmentConfig) -> Result<f64> {
    check_same_len(x1, x2)?;
    let dot: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
    let n1 = x1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2 = x2.iter().map(|b| b * b).sum::<f64>().sqrt();
    Ok(1.0 - dot / (n1 * n2).max(cfg.epsilon))
}

/// Closed-form gradient of [`alignment_loss`] with respect to both inputs.
pub fn alignment_loss_grad(
    x1: &[f64],
    x2: &[f64],
    cfg: &AlignmentConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_len(x1, x2)?;
    let dot: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
    let sq1: f64 = x1.iter().map(|a| a * a).sum();
    let sq2: f64 = x2.iter().map(|b| b * b).sum();
    let (n1, n2) = (sq1.sqrt(), sq2.sqrt());
    let denom = n1 * n2;
    if denom <= cfg.epsilon {
        // denominator is the constant eps here
        let g1 = x2.iter().map(|b| -b / cfg.epsilon).collect();
        let g2 = x1.iter().map(|a| -a / cfg.epsilon).collect();
        return Ok((g1, g2));
    }
    let cos = dot / denom;
    let g1 = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| -(b / denom - cos * a / sq1))
        .collect();
    let g2 = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| -(a / denom - cos * b / sq2))
        .collect();
    Ok((g1, g2))
}

/// Earth mover's distance between two mass vectors of equal length, computed
/// through their running sums. Inputs are not required to be normalized,
/// which lets finite differences perturb single entries.
pub fn emd_raw(p: &[f64], q: &[f64], r: f64) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let d = p.len() as f64;
    let mut gap = 0.0;
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        gap += a - b;
        acc += gap.abs().powf(r);
    }
    (acc / d).powf(1.0 / r)
}

/// Gradient of [`emd_raw`] with respect to `p`; the gradient with respect to
/// `q` is its negation. At zero distance the gradient is taken to be zero, as
/// is the subgradient of `|x|` at a tie.
pub fn emd_raw_grad(p: &[f64], q: &[f64], r: f64) -> Vec<f64> {
    let d = p.len() as f64;
    let mut gaps = Vec::with_capacity(p.len());
    let mut gap = 0.0;
    for (a, b) in p.iter().zip(q) {
        gap += a - b;
        gaps.push(gap);
    }
    let mean: f64 = gaps.iter().map(|g: &f64| g.abs().powf(r)).sum::<f64>() / d;
    if mean == 0.0 {
        return vec![0.0; p.len()];
    }
    let outer = mean.powf(1.0 / r - 1.0) / d;
    let per_gap: Vec<f64> = gaps
        .iter()
        .map(|g| {
            if *g == 0.0 {
                0.0
            } else {
                outer * g.abs().powf(r - 1.0) * g.signum()
            }
        })
        .collect();
    // dL/dp_j = sum over gaps i >= j
    let mut grad = vec![0.0; p.len()];
    let mut suffix = 0.0;
    for j in (0..p.len()).rev() {
        suffix += per_gap[j];
        grad[j] = suffix;
    }
    grad
}

fn check_pair(p: &ScoreDistribution, q: &ScoreDistribution, cfg: &EmdConfig) -> Result<()> {
    if p.len() != cfg.d || q.len() != cfg.d {
        return Err(Error::Shape(format!(
            "expected {} bins, got {} and {}",
            cfg.d,
            p.len(),
            q.len()
        )));
    }
    if p.bins() != q.bins() {
        return Err(Error::Shape("distributions use different bin values".into()));
    }
    Ok(())
}

pub fn emd_loss(p: &ScoreDistribution, q: &ScoreDistribution, cfg: &EmdConfig) -> Result<f64> {
    check_pair(p, q, cfg)?;
    Ok(emd_raw(p.probs(), q.probs(), cfg.r))
}

fn mean_emd(
    predictions: &[ScoreDistribution],
    targets: &[ScoreDistribution],
    cfg: &EmdConfig,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, q) in predictions.iter().zip(targets) {
        total += emd_loss(p, q, cfg)?;
    }
    Ok(total / predictions.len() as f64)
}

/// Mean EMD over the labeled part of a batch against ground truth.
pub fn supervised_loss(
    predictions: &[ScoreDistribution],
    targets: &[ScoreDistribution],
    cfg: &EmdConfig,
) -> Result<f64> {
    mean_emd(predictions, targets, cfg)
}

/// Mean EMD over the whole mixed batch against teacher pseudo labels.
pub fn kd_loss(
    predictions: &[ScoreDistribution],
    pseudo_targets: &[ScoreDistribution],
    cfg: &EmdConfig,
) -> Result<f64> {
    mean_emd(predictions, pseudo_targets, cfg)
}

pub fn student_loss(sup: f64, kd: f64, cfg: &SkdLossConfig) -> f64 {
    sup + cfg.beta * kd
}

/// Batched versions over `(batch, features)` / `(batch, bins)` tensors.
pub mod tensor {
    use candle_core::{Tensor, D};

    use crate::error::Result;

    /// Per-sample alignment loss, shape `(batch,)`.
    pub fn alignment_loss(x1: &Tensor, x2: &Tensor, epsilon: f64) -> Result<Tensor> {
        let dot = (x1 * x2)?.sum(D::Minus1)?;
        let n1 = x1.sqr()?.sum(D::Minus1)?.sqrt()?;
        let n2 = x2.sqr()?.sum(D::Minus1)?.sqrt()?;
        let denom = (n1 * n2)?.maximum(epsilon)?;
        Ok(dot.div(&denom)?.affine(-1.0, 1.0)?)
    }

    /// Per-sample EMD, shape `(batch,)`. The root is masked at zero distance
    /// so identical pairs contribute a zero gradient instead of NaN.
    pub fn emd(p: &Tensor, q: &Tensor, r: f64) -> Result<Tensor> {
        let gaps = (p - q)?.cumsum(D::Minus1)?;
        let powered = if r == 2.0 {
            gaps.sqr()?
        } else {
            // |g| through a detached sign, so a tied gap has zero subgradient
            let sign = (gaps.gt(0.0)?.to_dtype(gaps.dtype())? - gaps.lt(0.0)?.to_dtype(gaps.dtype())?)?;
            let abs = (&gaps * sign)?;
            if r == 1.0 {
                abs
            } else {
                abs.powf(r)?
            }
        };
        let mean = powered.mean(D::Minus1)?;
        let positive = mean.gt(0.0)?;
        let safe = mean.maximum(f64::MIN_POSITIVE)?;
        let root = if r == 2.0 { safe.sqrt()? } else { safe.powf(1.0 / r)? };
        Ok(positive.where_cond(&root, &mean.zeros_like()?)?)
    }

    pub fn mean(per_sample: &Tensor) -> Result<Tensor> {
        Ok(per_sample.mean_all()?)
    }
}
