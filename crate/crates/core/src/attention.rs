//! Layer-wise attention locality and concentration statistics: mean attention
//! distance (in patch-grid units) and mean attention entropy (in nats).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROW_SUM_TOL: f64 = 1e-5;

/// Attention weights of every head of one layer for one image.
///
/// `weights` is `heads × tokens × tokens`, row-major, each row a query. When
/// `cls_present` the CLS token is token 0 and the `grid` patches follow in
/// row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    heads: usize,
    tokens: usize,
    grid: (usize, usize),
    cls_present: bool,
    weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new(
        weights: Vec<f64>,
        heads: usize,
        grid: (usize, usize),
        cls_present: bool,
    ) -> Result<Self> {
        let tokens = grid.0 * grid.1 + usize::from(cls_present);
        if heads == 0 || tokens == 0 {
            return Err(Error::Shape("attention map has no heads or tokens".into()));
        }
        if weights.len() != heads * tokens * tokens {
            return Err(Error::Shape(format!(
                "{} weights for {heads} heads over {tokens} tokens",
                weights.len()
            )));
        }
        for (r, row) in weights.chunks(tokens).enumerate() {
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Validation(format!("row {r} has a negative or non-finite weight")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!("row {r} sums to {sum}")));
            }
        }
        Ok(AttentionMap {
            heads,
            tokens,
            grid,
            cls_present,
            weights,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn cls_present(&self) -> bool {
        self.cls_present
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.tokens + query) * self.tokens;
        &self.weights[start..start + self.tokens]
    }

    fn offset(&self) -> usize {
        usize::from(self.cls_present)
    }

    /// Grid coordinates of spatial token `i` (counted without CLS).
    fn position(&self, i: usize) -> (f64, f64) {
        ((i / self.grid.1) as f64, (i % self.grid.1) as f64)
    }

    /// Attention-weighted distance of every spatial query of every head. CLS
    /// mass is dropped and the spatial part of the row renormalized; queries
    /// with no spatial mass at all are skipped.
    pub fn query_distances(&self) -> Vec<f64> {
        let off = self.offset();
        let spatial = self.tokens - off;
        let mut out = Vec::with_capacity(self.heads * spatial);
        for h in 0..self.heads {
            for q in 0..spatial {
                let row = &self.row(h, q + off)[off..];
                let mass: f64 = row.iter().sum();
                if mass <= 0.0 {
                    continue;
                }
                let (qy, qx) = self.position(q);
                let dist: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let (ky, kx) = self.position(k);
                        w * ((qy - ky).powi(2) + (qx - kx).powi(2)).sqrt()
                    })
                    .sum();
                out.push(dist / mass);
            }
        }
        out
    }

    /// Shannon entropy of every query row of every head, over the full row.
    pub fn row_entropies(&self) -> Vec<f64> {
        self.weights
            .chunks(self.tokens)
            .map(|row| {
                -row.iter()
                    .filter(|w| **w > 0.0)
                    .map(|w| w * w.ln())
                    .sum::<f64>()
            })
            .collect()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and standard deviation of the attention distance over heads and
/// spatial queries.
pub fn mean_attention_distance(map: &AttentionMap) -> Result<(f64, f64)> {
    pooled_distance(std::slice::from_ref(map))
}

pub fn mean_attention_entropy(map: &AttentionMap) -> Result<f64> {
    pooled_entropy(std::slice::from_ref(map))
}

fn pooled_distance(maps: &[AttentionMap]) -> Result<(f64, f64)> {
    let all: Vec<f64> = maps.iter().flat_map(|m| m.query_distances()).collect();
    if all.is_empty() {
        return Err(Error::Argument("no spatial query carries spatial attention".into()));
    }
    Ok(mean_std(&all))
}

fn pooled_entropy(maps: &[AttentionMap]) -> Result<f64> {
    let all: Vec<f64> = maps.iter().flat_map(|m| m.row_entropies()).collect();
    if all.is_empty() {
        return Err(Error::Argument("no attention rows".into()));
    }
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean_distance: f64,
    pub distance_std: f64,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub per_layer: Vec<LayerStats>,
}

/// Statistics of one layer pooled over a probe set of images.
pub fn layer_stats(maps: &[AttentionMap]) -> Result<LayerStats> {
    let (mean_distance, distance_std) = pooled_distance(maps)?;
    Ok(LayerStats {
        mean_distance,
        distance_std,
        mean_entropy: pooled_entropy(maps)?,
    })
}

/// `per_image[i][l]` is layer `l` of probe image `i`.
pub fn attention_stats(per_image: &[Vec<AttentionMap>]) -> Result<AttentionStats> {
    let depth = per_image
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Argument("empty probe set".into()))?;
    if per_image.iter().any(|layers| layers.len() != depth) {
        return Err(Error::Shape("probe images captured different layer counts".into()));
    }
    let per_layer = (0..depth)
        .map(|l| {
            let maps: Vec<AttentionMap> = per_image.iter().map(|layers| layers[l].clone()).collect();
            layer_stats(&maps)
        })
        .collect::<Result<_>>()?;
    Ok(AttentionStats { per_layer })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerComparison {
    pub layer: usize,
    pub before: LayerStats,
    pub after: LayerStats,
    pub delta_mean_distance: f64,
    pub delta_distance_std: f64,
    pub delta_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionComparison {
    pub layers: Vec<LayerComparison>,
}

pub fn compare_stats(before: &AttentionStats, after: &AttentionStats) -> Result<AttentionComparison> {
    if before.per_layer.len() != after.per_layer.len() {
        return Err(Error::Shape(format!(
            "{} layers before, {} after",
            before.per_layer.len(),
            after.per_layer.len()
        )));
    }
    let layers = before
        .per_layer
        .iter()
        .zip(&after.per_layer)
        .enumerate()
        .map(|(layer, (b, a))| LayerComparison {
            layer,
            before: *b,
            after: *a,
            delta_mean_distance: a.mean_distance - b.mean_distance,
            delta_distance_std: a.distance_std - b.distance_std,
            delta_entropy: a.mean_entropy - b.mean_entropy,
        })
        .collect();
    Ok(AttentionComparison { layers })
}
