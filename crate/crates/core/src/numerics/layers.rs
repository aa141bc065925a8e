//! Parameter bundles for the dense layers shared by every model component.

use alloc::format;

use super::{math, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Glorot-uniform weight `[fan_in, fan_out]`.
pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform_in(-a, a))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: store.add(&format!("{name}.weight"), xavier(rng, d_in, d_out)),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}
