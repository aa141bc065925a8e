//! Multi-head attention with head-wise multiplicative window masks.
//!
//! In [`MaskMode::PostSoftmax`] the attention weights are the dense softmax
//! multiplied entry-wise by the head mask, with no renormalization, so a row
//! may sum to less than one. [`MaskMode::PreSoftmax`] instead excludes the
//! out-of-window keys from the softmax, so every row sums to one over its
//! window.

use alloc::format;
use alloc::vec::Vec;

use crate::masks::{causal_mask, MaskSet};
use crate::numerics::layers::Linear;
use crate::numerics::{math, ParamStore, Rng, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    /// `(M ⊙ softmax(QKᵀ/√d_k)) V`.
    #[default]
    PostSoftmax,
    /// Out-of-window scores set to −∞ before the softmax.
    PreSoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionOptions {
    pub mode: MaskMode,
    /// Forbid attending to later positions.
    pub causal: bool,
    /// Dropout on the attention weights, after masking.
    pub dropout: f64,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            mode: MaskMode::PostSoftmax,
            causal: false,
            dropout: 0.0,
        }
    }
}

/// Scaled dot-product attention over `[B, H, N, d_k]` heads with an optional
/// head-wise mask (`mask.heads() == H`, `mask.n_steps() == N`).
///
/// `k` and `v` may have a different length from `q` when no mask is given
/// (cross-attention).
pub fn multi_view_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&MaskSet>,
    opts: &AttentionOptions,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 4 || ks.len() != 4 || qs[3] != ks[3] || tape.shape(v)[..3] != ks[..3] {
        return Err(Error::shape("multi_view_attention", &qs, &ks));
    }
    let (heads, nq, nk, dk) = (qs[1], qs[2], ks[2], qs[3]);
    if let Some(m) = mask {
        if m.heads() != heads || m.n_steps() != nq || m.n_steps() != nk {
            return Err(Error::shape(
                "multi_view_attention mask",
                &[m.heads(), m.n_steps()],
                &[heads, nq, nk],
            ));
        }
    }
    if opts.causal && nq != nk {
        return Err(Error::shape("causal attention", &qs, &ks));
    }

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / math::sqrt(dk as f64));

    let pre_mask = match (opts.mode, mask) {
        (MaskMode::PreSoftmax, Some(m)) => Some(if opts.causal {
            m.with_causal().cells().to_vec()
        } else {
            m.cells().to_vec()
        }),
        _ if opts.causal => Some(causal_mask(nq)),
        _ => None,
    };
    let mut weights = match pre_mask {
        Some(allowed) => tape.masked_softmax(scores, allowed)?,
        None => tape.softmax(scores)?,
    };
    if let (MaskMode::PostSoftmax, Some(m)) = (opts.mode, mask) {
        let mt = tape.constant(m.to_tensor());
        weights = tape.mul(weights, mt)?;
    }
    let weights = tape.dropout(weights, opts.dropout, rng)?;
    tape.matmul(weights, v)
}

/// Projections of one attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
            d_model,
        })
    }

    /// `4 (d² + d)`.
    pub fn param_count(d_model: usize) -> usize {
        4 * Linear::param_count(d_model, d_model)
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// `[B, N, d_model]` → `[B, H, N, d_k]`.
    fn split(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let r = tape.reshape(x, &[s[0], s[1], self.heads, self.d_k()])?;
        tape.permute(r, &[0, 2, 1, 3])
    }

    fn merge(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let p = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(p, &[s[0], s[2], self.d_model])
    }
}

/// Project → split heads → masked attention → merge → output projection.
/// Queries come from `x: [B, N, d]`, keys and values from `context`
/// (`x` itself for self-attention). Residual and normalization are the
/// caller's.
pub fn attention_block(
    tape: &mut Tape<'_>,
    x: Var,
    context: Var,
    params: &AttentionParams,
    mask: Option<&MaskSet>,
    opts: &AttentionOptions,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    for v in [x, context] {
        let s = tape.shape(v);
        if s.len() != 3 || s[2] != params.d_model {
            return Err(Error::shape("attention_block", s, &[params.d_model]));
        }
    }
    let q = params.query.forward(tape, x)?;
    let k = params.key.forward(tape, context)?;
    let v = params.value.forward(tape, context)?;
    let (q, k, v) = (params.split(tape, q)?, params.split(tape, k)?, params.split(tape, v)?);
    let heads = multi_view_attention(tape, q, k, v, mask, opts, rng)?;
    let merged = params.merge(tape, heads)?;
    params.output.forward(tape, merged)
}

/// Self-attention over `x: [B, N, d_model]`.
pub fn multi_head_block(
    tape: &mut Tape<'_>,
    x: Var,
    params: &AttentionParams,
    mask: Option<&MaskSet>,
    opts: &AttentionOptions,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    attention_block(tape, x, x, params, mask, opts, rng)
}

/// Attention weights `(mask ⊙) softmax(QKᵀ/√d_k)` for inspection, without
/// recording a graph the caller keeps. Returns `[B, H, N, N]` values.
pub fn attention_weights(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    mask: Option<&MaskSet>,
    mode: MaskMode,
) -> Result<Vec<f64>> {
    let n = tape.shape(k).to_vec();
    let eye = tape.constant(crate::numerics::Tensor::from_fn(&[n[0], n[1], n[2], n[2]], |i| {
        let (r, c) = ((i / n[2]) % n[2], i % n[2]);
        if r == c {
            1.0
        } else {
            0.0
        }
    }));
    // Attending over the identity as values returns the weight matrix itself.
    let opts = AttentionOptions {
        mode,
        ..AttentionOptions::default()
    };
    let w = multi_view_attention(tape, q, k, eye, mask, &opts, None)?;
    Ok(tape.value(w).data().to_vec())
}
