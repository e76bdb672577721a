use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::{init_layer_norm, init_linear, layer_norm, linear, softmax_last};
use super::params::ParamStore;
use super::FeatureVector;
use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::seed;

/// Architecture of a feature encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EncoderSpec {
    /// Pre-norm vision transformer; the feature is the final CLS token.
    TinyTransformer {
        image_size: usize,
        patch: usize,
        width: usize,
        depth: usize,
        heads: usize,
        feature_dim: usize,
    },
    /// Stride-2 3×3 convolutions with ReLU, global average pooling and a
    /// linear output layer.
    TinyConv {
        image_size: usize,
        channels: Vec<usize>,
        feature_dim: usize,
    },
    /// Features produced outside this toolkit and only available through a
    /// feature cache.
    External { name: String, feature_dim: usize },
}

impl EncoderSpec {
    pub fn feature_dim(&self) -> usize {
        match self {
            EncoderSpec::TinyTransformer { feature_dim, .. }
            | EncoderSpec::TinyConv { feature_dim, .. }
            | EncoderSpec::External { feature_dim, .. } => *feature_dim,
        }
    }

    pub fn image_size(&self) -> Option<usize> {
        match self {
            EncoderSpec::TinyTransformer { image_size, .. } | EncoderSpec::TinyConv { image_size, .. } => {
                Some(*image_size)
            }
            EncoderSpec::External { .. } => None,
        }
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self, EncoderSpec::TinyTransformer { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim() == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        match self {
            EncoderSpec::TinyTransformer {
                image_size,
                patch,
                width,
                depth,
                heads,
                ..
            } => {
                if *patch == 0 || *image_size == 0 || image_size % patch != 0 {
                    return Err(Error::Config(format!(
                        "image size {image_size} is not a multiple of patch {patch}"
                    )));
                }
                if *heads == 0 || width % heads != 0 {
                    return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
                }
                if *depth == 0 {
                    return Err(Error::Config("transformer depth must be >= 1".into()));
                }
            }
            EncoderSpec::TinyConv { image_size, channels, .. } => {
                if channels.is_empty() || channels.contains(&0) || *image_size == 0 {
                    return Err(Error::Config("conv encoder needs non-zero channel widths".into()));
                }
            }
            EncoderSpec::External { .. } => {}
        }
        Ok(())
    }

    /// Patch grid side and token count (including CLS) of a transformer.
    pub fn token_grid(&self) -> Option<(usize, usize)> {
        match self {
            EncoderSpec::TinyTransformer { image_size, patch, .. } => {
                let side = image_size / patch;
                Some((side, side * side + 1))
            }
            _ => None,
        }
    }
}

/// A feature encoder with its parameters.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    pub params: ParamStore,
}

impl Encoder {
    /// Deterministic random initialization from `seed`.
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed, &["encoder-init"]);
        let mut p = ParamStore::new();
        match &spec {
            EncoderSpec::TinyTransformer {
                patch,
                width,
                depth,
                feature_dim,
                ..
            } => {
                let (_, tokens) = spec.token_grid().expect("transformer");
                init_linear(&mut p, "patch_embed", 3 * patch * patch, *width, &mut rng)?;
                p.normal("cls_token", &[1, 1, *width], 0.02, &mut rng)?;
                p.normal("pos_embed", &[1, tokens, *width], 0.02, &mut rng)?;
                for l in 0..*depth {
                    let b = format!("blocks.{l:02}");
                    init_layer_norm(&mut p, &format!("{b}.ln1"), *width)?;
                    init_linear(&mut p, &format!("{b}.qkv"), *width, 3 * width, &mut rng)?;
                    init_linear(&mut p, &format!("{b}.proj"), *width, *width, &mut rng)?;
                    init_layer_norm(&mut p, &format!("{b}.ln2"), *width)?;
                    init_linear(&mut p, &format!("{b}.fc1"), *width, 2 * width, &mut rng)?;
                    init_linear(&mut p, &format!("{b}.fc2"), 2 * width, *width, &mut rng)?;
                }
                init_layer_norm(&mut p, "norm", *width)?;
                if feature_dim != width {
                    init_linear(&mut p, "out", *width, *feature_dim, &mut rng)?;
                }
            }
            EncoderSpec::TinyConv { channels, feature_dim, .. } => {
                let mut input = 3;
                for (i, &c) in channels.iter().enumerate() {
                    let bound = 1.0 / ((input * 9) as f64).sqrt();
                    p.uniform(&format!("conv.{i:02}.weight"), &[c, input, 3, 3], bound, &mut rng)?;
                    p.uniform(&format!("conv.{i:02}.bias"), &[c], bound, &mut rng)?;
                    input = c;
                }
                init_linear(&mut p, "out", input, *feature_dim, &mut rng)?;
            }
            EncoderSpec::External { name, .. } => {
                return Err(Error::Unsupported(format!(
                    "external encoder {name} has no in-process weights; use a feature cache"
                )))
            }
        }
        Ok(Encoder { spec, params: p })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// Deep copy that shares no parameter storage with `self`.
    pub fn duplicate(&self) -> Result<Self> {
        Ok(Encoder {
            spec: self.spec.clone(),
            params: self.params.duplicate()?,
        })
    }

    fn check_input(&self, images: &Tensor) -> Result<usize> {
        let size = self.spec.image_size().expect("buildable encoders have a size");
        match images.dims() {
            [b, 3, h, w] if *h == size && *w == size && *b > 0 => Ok(*b),
            dims => Err(Error::Shape(format!(
                "encoder expects (batch, 3, {size}, {size}), got {dims:?}"
            ))),
        }
    }

    /// Differentiable forward pass, `(batch, feature_dim)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward_inner(images, false)?.0)
    }

    /// Forward pass that also returns every layer's attention probabilities,
    /// each `(batch, heads, tokens, tokens)`.
    pub fn forward_with_attention(&self, images: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if !self.spec.is_transformer() {
            return Err(Error::Unsupported(
                "attention capture needs a transformer encoder".into(),
            ));
        }
        self.forward_inner(images, true)
    }

    fn forward_inner(&self, images: &Tensor, capture: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let batch = self.check_input(images)?;
        match &self.spec {
            EncoderSpec::TinyTransformer {
                image_size,
                patch,
                width,
                depth,
                heads,
                feature_dim,
            } => {
                let p = &self.params;
                let side = image_size / patch;
                let patches = images
                    .reshape((batch, 3, side, *patch, side, *patch))?
                    .permute((0, 2, 4, 1, 3, 5))?
                    .contiguous()?
                    .reshape((batch, side * side, 3 * patch * patch))?;
                let tokens = linear(p, "patch_embed", &patches)?;
                let cls = p.get("cls_token")?.broadcast_as((batch, 1, *width))?;
                let mut x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(p.get("pos_embed")?)?;
                let mut maps = Vec::new();
                for l in 0..*depth {
                    let b = format!("blocks.{l:02}");
                    let (attn_out, probs) = self_attention(p, &b, &layer_norm(p, &format!("{b}.ln1"), &x)?, *heads)?;
                    x = (x + attn_out)?;
                    let h = layer_norm(p, &format!("{b}.ln2"), &x)?;
                    let h = linear(p, &format!("{b}.fc1"), &h)?.gelu()?;
                    x = (x + linear(p, &format!("{b}.fc2"), &h)?)?;
                    if capture {
                        maps.push(probs);
                    }
                }
                let x = layer_norm(p, "norm", &x)?;
                let cls = x.narrow(1, 0, 1)?.squeeze(1)?;
                let feat = if feature_dim != width { linear(p, "out", &cls)? } else { cls };
                Ok((feat, maps))
            }
            EncoderSpec::TinyConv { channels, .. } => {
                let p = &self.params;
                let mut x = images.clone();
                for i in 0..channels.len() {
                    let w = p.get(&format!("conv.{i:02}.weight"))?;
                    let b = p.get(&format!("conv.{i:02}.bias"))?;
                    x = x.conv2d(w, 1, 2, 1, 1)?;
                    x = x.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?.relu()?;
                }
                let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
                Ok((linear(p, "out", &pooled)?, Vec::new()))
            }
            EncoderSpec::External { .. } => unreachable!("external encoders are never constructed"),
        }
    }

    /// Gradient-free features, one vector per image.
    pub fn encode(&self, images: &Tensor) -> Result<Vec<FeatureVector>> {
        let feats = self.forward(images)?.detach();
        Ok(feats
            .to_vec2::<f64>()?
            .into_iter()
            .map(FeatureVector)
            .collect())
    }

    /// One attention map per layer per image: `out[image][layer]`.
    pub fn capture_attention(&self, images: &Tensor) -> Result<Vec<Vec<AttentionMap>>> {
        let (_, maps) = self.forward_with_attention(images)?;
        let (side, tokens) = self.spec.token_grid().expect("transformer");
        let batch = images.dims()[0];
        let mut out: Vec<Vec<AttentionMap>> = (0..batch).map(|_| Vec::with_capacity(maps.len())).collect();
        for layer in &maps {
            let heads = layer.dims()[1];
            for (i, per_image) in out.iter_mut().enumerate() {
                let w = layer.get(i)?.detach().flatten_all()?.to_vec1::<f64>()?;
                debug_assert_eq!(w.len(), heads * tokens * tokens);
                per_image.push(AttentionMap::new(w, heads, (side, side), true)?);
            }
        }
        Ok(out)
    }
}

fn self_attention(p: &ParamStore, block: &str, x: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (batch, tokens, width) = x.dims3()?;
    let head_dim = width / heads;
    let qkv = linear(p, &format!("{block}.qkv"), x)?
        .reshape((batch, tokens, 3, heads, head_dim))?
        .permute((2, 0, 3, 1, 4))?;
    let q = qkv.get(0)?.contiguous()?;
    let k = qkv.get(1)?.contiguous()?;
    let v = qkv.get(2)?.contiguous()?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (head_dim as f64).sqrt())?;
    let probs = softmax_last(&scores)?;
    let ctx = probs
        .matmul(&v)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((batch, tokens, width))?;
    Ok((linear(p, &format!("{block}.proj"), &ctx)?, probs))
}
