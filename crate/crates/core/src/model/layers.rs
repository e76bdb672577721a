use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Registers `{name}.weight` `(out, in)` and `{name}.bias` `(out)`.
pub(crate) fn init_linear(
    p: &mut ParamStore,
    name: &str,
    input: usize,
    output: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = 1.0 / (input as f64).sqrt();
    p.uniform(&format!("{name}.weight"), &[output, input], bound, rng)?;
    p.uniform(&format!("{name}.bias"), &[output], bound, rng)
}

pub(crate) fn init_layer_norm(p: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    p.constant(&format!("{name}.gamma"), &[dim], 1.0)?;
    p.constant(&format!("{name}.beta"), &[dim], 0.0)
}

/// `x W^T + b` over the last dimension of any-rank `x`.
pub(crate) fn linear(p: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let dims = x.dims().to_vec();
    let input = dims[dims.len() - 1];
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let flat = x.contiguous()?.reshape((rows, input))?;
    let y = flat.matmul(&w.t()?)?.broadcast_add(b)?;
    let mut out_dims = dims;
    *out_dims.last_mut().expect("rank >= 1") = w.dims()[0];
    Ok(y.reshape(out_dims)?)
}

pub(crate) fn layer_norm(p: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // candle_nn's fused softmax has no backward pass; this one does
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}
