//! Weight initializers.
//!
//! Fans follow the usual convention: a `out × in` matrix has `fan_in = in`,
//! `fan_out = out`; a `F × C × K × K` kernel has `fan_in = C·K·K`,
//! `fan_out = F·K·K`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Which draw a per-layer RNG sub-stream serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamRole {
    Forward = 0,
    Backward = 1,
    /// Runtime redraws of sign-concordant magnitudes.
    Refresh = 2,
}

/// Independent generator for `(seed, layer, role)`.
pub fn layer_rng(seed: u64, layer: usize, role: StreamRole) -> Rng {
    Rng::derive(seed, &[layer as u64, role as u64])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardInit {
    XavierUniform,
    KaimingUniform { a: f64 },
    Normal { mean: f64, std: f64 },
}

impl ForwardInit {
    pub fn sample(&self, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
        match *self {
            ForwardInit::XavierUniform => xavier_uniform(shape, rng),
            ForwardInit::KaimingUniform { a } => kaiming_uniform(shape, a, rng),
            ForwardInit::Normal { mean, std } => {
                fans(shape)?;
                rng.normal(shape, mean, std)
            }
        }
    }
}

impl FromStr for ForwardInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xavier" | "xavier_uniform" => Ok(ForwardInit::XavierUniform),
            "kaiming" | "kaiming_uniform" => Ok(ForwardInit::KaimingUniform { a: 5f64.sqrt() }),
            "normal" => Ok(ForwardInit::Normal { mean: 0.0, std: 1.0 }),
            other => Err(Error::invalid(
                "init",
                format!("unknown initializer `{other}` (expected xavier, kaiming or normal)"),
            )),
        }
    }
}

impl fmt::Display for ForwardInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForwardInit::XavierUniform => f.write_str("xavier"),
            ForwardInit::KaimingUniform { .. } => f.write_str("kaiming"),
            ForwardInit::Normal { .. } => f.write_str("normal"),
        }
    }
}

/// Forward-weight initializer; backward weights are always Xavier uniform.
/// Biases start at zero under every scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    pub forward: ForwardInit,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            forward: ForwardInit::XavierUniform,
        }
    }
}

impl InitSpec {
    pub fn backward(&self, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
        xavier_uniform(shape, rng)
    }
}

/// `(fan_in, fan_out)` of a matrix or convolution kernel shape.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    let (fan_in, fan_out) = match *shape {
        [out, inp] => (inp, out),
        [f, c, kh, kw] => (c * kh * kw, f * kh * kw),
        _ => {
            return Err(Error::invalid(
                "init",
                format!("cannot compute fans of shape {shape:?}"),
            ))
        }
    };
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(
            "init",
            format!("degenerate shape {shape:?}"),
        ));
    }
    Ok((fan_in, fan_out))
}

/// `sqrt(2 / (fan_in + fan_out))`, the standard deviation of Xavier uniform.
pub fn xavier_std(shape: &[usize]) -> Result<f64> {
    let (fi, fo) = fans(shape)?;
    Ok((2.0 / (fi + fo) as f64).sqrt())
}

pub fn xavier_bound(shape: &[usize]) -> Result<f64> {
    let (fi, fo) = fans(shape)?;
    Ok((6.0 / (fi + fo) as f64).sqrt())
}

/// Uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let a = xavier_bound(shape)?;
    rng.uniform(shape, -a, a)
}

pub fn kaiming_bound(shape: &[usize], a_slope: f64) -> Result<f64> {
    let (fi, _) = fans(shape)?;
    Ok((6.0 / ((1.0 + a_slope * a_slope) * fi as f64)).sqrt())
}

/// Uniform on `±sqrt(6 / ((1 + a²)·fan_in))`; `a = √5` is the common layer default.
pub fn kaiming_uniform(shape: &[usize], a_slope: f64, rng: &mut Rng) -> Result<Tensor> {
    let bound = kaiming_bound(shape, a_slope)?;
    rng.uniform(shape, -bound, bound)
}
