use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::encoder::Encoder;
use super::layers::{init_linear, linear, softmax_last};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::score_dist::{BinSpec, ScoreDistribution};
use crate::seed;

/// Maps student features into the teacher's feature space during alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProjectorSpec {
    /// Pass-through; only valid when the dimensions already agree.
    Identity,
    /// Linear, GELU, linear. `hidden` defaults to the teacher dimension.
    Mlp {
        #[serde(default)]
        hidden: Option<usize>,
    },
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        ProjectorSpec::Mlp { hidden: None }
    }
}

#[derive(Debug, Clone)]
pub struct Projector {
    spec: ProjectorSpec,
    input: usize,
    output: usize,
    pub params: ParamStore,
}

impl Projector {
    pub fn new(spec: ProjectorSpec, input: usize, output: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        match &spec {
            ProjectorSpec::Identity => {
                if input != output {
                    return Err(Error::Config(format!(
                        "identity projector cannot map {input} to {output} features"
                    )));
                }
            }
            ProjectorSpec::Mlp { hidden } => {
                let hidden = hidden.unwrap_or(output);
                let mut rng = seed::rng(seed, &["projector-init"]);
                init_linear(&mut params, "fc1", input, hidden, &mut rng)?;
                init_linear(&mut params, "fc2", hidden, output, &mut rng)?;
            }
        }
        Ok(Projector {
            spec,
            input,
            output,
            params,
        })
    }

    pub fn spec(&self) -> &ProjectorSpec {
        &self.spec
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.input, self.output)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.spec {
            ProjectorSpec::Identity => Ok(x.clone()),
            ProjectorSpec::Mlp { .. } => {
                let h = linear(&self.params, "fc1", x)?.gelu()?;
                linear(&self.params, "fc2", &h)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Widths of hidden layers; empty means a single linear layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec { hidden: vec![64] }
    }
}

/// MLP from features to bin logits, normalized with a softmax.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    spec: HeadSpec,
    bins: BinSpec,
    pub params: ParamStore,
}

impl PredictionHead {
    pub fn new(spec: HeadSpec, input: usize, bins: BinSpec, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed, &["head-init"]);
        let mut params = ParamStore::new();
        let mut width = input;
        for (i, &h) in spec.hidden.iter().enumerate() {
            init_linear(&mut params, &format!("fc{i}"), width, h, &mut rng)?;
            width = h;
        }
        init_linear(&mut params, "logits", width, bins.len(), &mut rng)?;
        Ok(PredictionHead { spec, bins, params })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn bins(&self) -> &BinSpec {
        &self.bins
    }

    /// Zeroes the output layer, making every prediction uniform.
    pub fn zero_output(&mut self) -> Result<()> {
        for name in ["logits.weight", "logits.bias"] {
            let var = self.params.var(name).expect("head has an output layer");
            var.set(&var.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }

    /// Probabilities `(batch, bins)`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut x = features.clone();
        for i in 0..self.spec.hidden.len() {
            x = linear(&self.params, &format!("fc{i}"), &x)?.relu()?;
        }
        softmax_last(&linear(&self.params, "logits", &x)?)
    }
}

/// A backbone with a distribution head.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    pub backbone: Encoder,
    pub head: PredictionHead,
}

impl ScoreModel {
    pub fn new(backbone: Encoder, head: PredictionHead) -> Result<Self> {
        Ok(ScoreModel { backbone, head })
    }

    pub fn bins(&self) -> &BinSpec {
        self.head.bins()
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.backbone.forward(images)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(format!("{}:{}", self.backbone.params.hash()?, self.head.params.hash()?))
    }

    pub fn duplicate(&self) -> Result<Self> {
        Ok(ScoreModel {
            backbone: self.backbone.duplicate()?,
            head: PredictionHead {
                spec: self.head.spec.clone(),
                bins: self.head.bins.clone(),
                params: self.head.params.duplicate()?,
            },
        })
    }
}

/// Predicted score distributions for a batch of images.
pub fn predict_distribution(
    backbone: &Encoder,
    head: &PredictionHead,
    images: &Tensor,
) -> Result<Vec<ScoreDistribution>> {
    let probs = head.forward(&backbone.forward(images)?)?.detach();
    let d = probs.dim(D::Minus1)?;
    if d != head.bins().len() {
        return Err(Error::Shape(format!("head emits {d} bins, spec has {}", head.bins().len())));
    }
    probs
        .to_vec2::<f64>()?
        .into_iter()
        .map(|p| ScoreDistribution::new(p, head.bins().clone()))
        .collect()
}
