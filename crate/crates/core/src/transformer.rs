//! Sub-sampling convolutional prenet, sinusoidal positions, and the pre-norm
//! encoder and decoder stacks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{attention_block, multi_head_block, AttentionOptions, AttentionParams, MaskMode};
use crate::masks::{ClsPolicy, MaskSet, WindowSchedule};
use crate::numerics::layers::{xavier, LayerNorm, Linear};
use crate::numerics::{math, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::{Error, Result};

/// The five ways of turning Transformer outputs into a speaker embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// (a) Decoder fed only `[CLS]`, cross-attending the encoder output.
    FirstDecoderToken,
    /// (b) Decoder fed the prenet output followed by `[CLS]`; last position.
    LastDecoderToken,
    /// (c) Temporal mean of the encoder output.
    AverageEncoderTokens,
    /// (d) `[CLS]` prepended to the encoder input; first encoder output.
    FirstEncoderToken,
    /// (e) Linear, attentive statistics pooling, two hidden layers.
    PoolingEncoderTokens,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::FirstDecoderToken,
        Variant::LastDecoderToken,
        Variant::AverageEncoderTokens,
        Variant::FirstEncoderToken,
        Variant::PoolingEncoderTokens,
    ];

    pub fn letter(self) -> char {
        match self {
            Variant::FirstDecoderToken => 'a',
            Variant::LastDecoderToken => 'b',
            Variant::AverageEncoderTokens => 'c',
            Variant::FirstEncoderToken => 'd',
            Variant::PoolingEncoderTokens => 'e',
        }
    }

    pub fn from_letter(c: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| c.len() == 1 && c.starts_with(v.letter()))
    }

    pub fn uses_decoder(self) -> bool {
        matches!(self, Variant::FirstDecoderToken | Variant::LastDecoderToken)
    }

    pub fn uses_cls(self) -> bool {
        matches!(
            self,
            Variant::FirstDecoderToken | Variant::LastDecoderToken | Variant::FirstEncoderToken
        )
    }
}

/// Where the window masks apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MvScope {
    #[default]
    EncoderOnly,
    /// Also on decoder self-attention, combined with the causal mask.
    EncoderAndDecoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub mask_mode: MaskMode,
    pub multi_view: bool,
    pub cls_policy: ClsPolicy,
    pub mv_scope: MvScope,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub n_speakers: usize,
    /// Hidden width of the attentive-pooling scorer (variant e).
    pub pool_attn_dim: usize,
    pub positional_encoding: bool,
    /// Window overrides: empty for the doubling schedule, one list for every
    /// layer, or one list per encoder layer.
    pub layer_windows: Vec<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_encoder_layers: 6,
            n_decoder_layers: 3,
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            dropout: 0.1,
            variant: Variant::FirstDecoderToken,
            mask_mode: MaskMode::PostSoftmax,
            multi_view: true,
            cls_policy: ClsPolicy::Windowed,
            mv_scope: MvScope::EncoderOnly,
            feature_dim: 80,
            embedding_dim: 512,
            n_speakers: 1251,
            pool_attn_dim: 128,
            positional_encoding: true,
            layer_windows: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// 6 encoder layers, 3 decoder layers, 512/2048 widths, 8 heads, 1251
    /// speakers.
    pub fn full() -> Self {
        Self::default()
    }

    /// Small model used for gradient checks: 2 encoder layers, 1 decoder
    /// layer, d=16, 2 heads.
    pub fn toy(variant: Variant) -> Self {
        ModelConfig {
            n_encoder_layers: 2,
            n_decoder_layers: 1,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            dropout: 0.0,
            variant,
            feature_dim: 6,
            embedding_dim: 16,
            n_speakers: 3,
            pool_attn_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_encoder_layers", self.n_encoder_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("feature_dim", self.feature_dim),
            ("embedding_dim", self.embedding_dim),
            ("pool_attn_dim", self.pool_attn_dim),
        ];
        if let Some((k, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.n_speakers < 2 {
            return Err(Error::config("n_speakers must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.variant == Variant::AverageEncoderTokens && self.embedding_dim != self.d_model {
            return Err(Error::config(
                "variant c uses the encoder mean directly; embedding_dim must equal d_model",
            ));
        }
        if self.variant.uses_decoder() && self.n_decoder_layers == 0 {
            return Err(Error::config("decoder variants need n_decoder_layers >= 1"));
        }
        if !self.layer_windows.is_empty() {
            if self.layer_windows.len() != 1 && self.layer_windows.len() != self.n_encoder_layers {
                return Err(Error::config(
                    "layer_windows needs one schedule or one per encoder layer",
                ));
            }
            for w in &self.layer_windows {
                if w.len() != self.heads {
                    return Err(Error::config(format!(
                        "window schedule {w:?} does not have {} heads",
                        self.heads
                    )));
                }
                WindowSchedule::custom(w.clone())?;
            }
        }
        if self.layer_windows.is_empty() {
            WindowSchedule::doubling(self.heads)?;
        }
        Ok(())
    }

    /// Window schedule of encoder layer `layer` (0-based).
    pub fn schedule(&self, layer: usize) -> Result<WindowSchedule> {
        match self.layer_windows.len() {
            0 => WindowSchedule::doubling(self.heads),
            1 => WindowSchedule::custom(self.layer_windows[0].clone()),
            _ => WindowSchedule::custom(self.layer_windows[layer].clone()),
        }
    }

    /// Encoder masks for a sequence of `n_steps` tokens; all-ones when
    /// multi-view attention is off.
    pub fn encoder_masks(&self, n_steps: usize, cls_index: Option<usize>) -> Result<Vec<MaskSet>> {
        (0..self.n_encoder_layers)
            .map(|l| {
                if self.multi_view {
                    MaskSet::build(&self.schedule(l)?, n_steps, cls_index, self.cls_policy)
                } else {
                    Ok(MaskSet::full(self.heads, n_steps))
                }
            })
            .collect()
    }

    /// Decoder self-attention masks; `None` unless multi-view covers the
    /// decoder.
    pub fn decoder_masks(&self, n_steps: usize) -> Result<Option<Vec<MaskSet>>> {
        if !self.multi_view || self.mv_scope != MvScope::EncoderAndDecoder {
            return Ok(None);
        }
        let s = self.schedule(0)?;
        let m = MaskSet::build(&s, n_steps, None, ClsPolicy::Windowed)?;
        Ok(Some(vec![m; self.n_decoder_layers]))
    }
}

/// Encoder input length produced by the prenet for `t` frames: ⌈⌈t/2⌉/2⌉.
pub fn prenet_output_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2)
}

pub const PRENET_KERNEL: usize = 3;
pub const PRENET_STRIDE: usize = 2;
pub const PRENET_PADDING: usize = 1;
pub const MIN_PRENET_FRAMES: usize = 4;

/// Two strided 1-D convolutions (kernel 3, stride 2, padding 1, ReLU) that
/// shorten the frame sequence four-fold.
#[derive(Clone, Copy, Debug)]
pub struct Prenet {
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
}

/// Downsampled, position-encoded frames on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    /// `[B, N, d_model]`
    pub tokens: Var,
    pub n_steps: usize,
}

fn conv_init(rng: &mut Rng, k: usize, cin: usize, cout: usize) -> Tensor {
    xavier(rng, k * cin, cout).reshape(&[k, cin, cout]).expect("conv shape")
}

impl Prenet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (f, d, k) = (cfg.feature_dim, cfg.d_model, PRENET_KERNEL);
        Prenet {
            conv1_weight: store.add("prenet.conv1.weight", conv_init(rng, k, f, d)),
            conv1_bias: store.add("prenet.conv1.bias", Tensor::zeros(&[d])),
            conv2_weight: store.add("prenet.conv2.weight", conv_init(rng, k, d, d)),
            conv2_bias: store.add("prenet.conv2.bias", Tensor::zeros(&[d])),
        }
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let (f, d, k) = (cfg.feature_dim, cfg.d_model, PRENET_KERNEL);
        k * f * d + d + k * d * d + d
    }

    /// `x: [B, T, feature_dim]` → `[B, ⌈⌈T/2⌉/2⌉, d_model]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, cfg: &ModelConfig, rng: Option<&mut Rng>) -> Result<EncodedSequence> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != cfg.feature_dim {
            return Err(Error::shape("prenet", &s, &[cfg.feature_dim]));
        }
        if s[1] < MIN_PRENET_FRAMES {
            return Err(Error::InputTooShort {
                op: "prenet",
                detail: format!("{} frames, need at least {MIN_PRENET_FRAMES}", s[1]),
            });
        }
        let mut h = x;
        for (w, b) in [(self.conv1_weight, self.conv1_bias), (self.conv2_weight, self.conv2_bias)] {
            let (wv, bv) = (tape.param(w), tape.param(b));
            let c = tape.conv1d(h, wv, PRENET_STRIDE, PRENET_PADDING)?;
            let c = tape.add(c, bv)?;
            h = tape.relu(c);
        }
        let n = tape.shape(h)[1];
        if cfg.positional_encoding {
            let pe = tape.constant(sinusoidal_positions(n, cfg.d_model));
            h = tape.add(h, pe)?;
        }
        let h = tape.dropout(h, cfg.dropout, rng)?;
        Ok(EncodedSequence { tokens: h, n_steps: n })
    }
}

/// Standard sinusoidal table `[n, d]`: sin on even, cos on odd channels.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = math::pow(10000.0, -((j - j % 2) as f64) / d as f64);
        if j % 2 == 0 {
            math::sin(pos * freq)
        } else {
            math::cos(pos * freq)
        }
    })
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.ffn1"), d, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.ffn2"), d_ff, d, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, h)
    }
}

/// `x + dropout(sublayer)`.
fn residual(tape: &mut Tape<'_>, x: Var, y: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let y = tape.dropout(y, p, rng)?;
    tape.add(x, y)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub self_attn: AttentionParams,
    norm_attn: LayerNorm,
    ffn: FeedForward,
    norm_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

/// `4(d² + d) + 2·d·d_ff + d_ff + d + 4·d`: attention, feed-forward, two
/// layer norms.
pub fn encoder_layer_param_count(d: usize, d_ff: usize) -> usize {
    AttentionParams::param_count(d) + Linear::param_count(d, d_ff) + Linear::param_count(d_ff, d) + 2 * LayerNorm::param_count(d)
}

pub fn decoder_layer_param_count(d: usize, d_ff: usize) -> usize {
    2 * AttentionParams::param_count(d) + Linear::param_count(d, d_ff) + Linear::param_count(d_ff, d) + 3 * LayerNorm::param_count(d)
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let layers = (0..cfg.n_encoder_layers)
            .map(|l| {
                let name = format!("encoder.{l}");
                Ok(EncoderLayer {
                    self_attn: AttentionParams::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng)?,
                    norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
                    ffn: FeedForward::new(store, &name, d, cfg.d_ff, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            layers,
            final_norm: LayerNorm::new(store, "encoder.final_norm", d),
        })
    }

    /// Pre-norm layers then a final layer norm. `masks` holds one set per
    /// layer.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        seq: EncodedSequence,
        masks: &[MaskSet],
        cfg: &ModelConfig,
        mut rng: Option<&mut Rng>,
    ) -> Result<EncodedSequence> {
        if masks.len() != self.layers.len() {
            return Err(Error::shape("encode masks", &[masks.len()], &[self.layers.len()]));
        }
        let opts = AttentionOptions {
            mode: cfg.mask_mode,
            causal: false,
            dropout: cfg.dropout,
        };
        let mut x = seq.tokens;
        for (layer, mask) in self.layers.iter().zip(masks) {
            let h = layer.norm_attn.forward(tape, x)?;
            let a = multi_head_block(tape, h, &layer.self_attn, Some(mask), &opts, rng.as_deref_mut())?;
            x = residual(tape, x, a, cfg.dropout, rng.as_deref_mut())?;
            let h = layer.norm_ffn.forward(tape, x)?;
            let f = layer.ffn.forward(tape, h)?;
            x = residual(tape, x, f, cfg.dropout, rng.as_deref_mut())?;
        }
        let x = self.final_norm.forward(tape, x)?;
        Ok(EncodedSequence {
            tokens: x,
            n_steps: seq.n_steps,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    norm_self: LayerNorm,
    pub cross_attn: AttentionParams,
    norm_cross: LayerNorm,
    ffn: FeedForward,
    norm_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let layers = (0..cfg.n_decoder_layers)
            .map(|l| {
                let name = format!("decoder.{l}");
                Ok(DecoderLayer {
                    self_attn: AttentionParams::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng)?,
                    norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d),
                    cross_attn: AttentionParams::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng)?,
                    norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d),
                    ffn: FeedForward::new(store, &name, d, cfg.d_ff, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            layers,
            final_norm: LayerNorm::new(store, "decoder.final_norm", d),
        })
    }

    /// Causal self-attention, cross-attention over `memory`, feed-forward;
    /// pre-norm residuals and a final norm. `target: [B, Nt, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        target: Var,
        memory: &EncodedSequence,
        cfg: &ModelConfig,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let nt = tape.shape(target)[1];
        let masks = cfg.decoder_masks(nt)?;
        let self_opts = AttentionOptions {
            mode: cfg.mask_mode,
            causal: true,
            dropout: cfg.dropout,
        };
        let cross_opts = AttentionOptions {
            causal: false,
            ..self_opts
        };
        let mut x = target;
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = masks.as_ref().map(|m| &m[l]);
            let h = layer.norm_self.forward(tape, x)?;
            let a = multi_head_block(tape, h, &layer.self_attn, mask, &self_opts, rng.as_deref_mut())?;
            x = residual(tape, x, a, cfg.dropout, rng.as_deref_mut())?;
            let h = layer.norm_cross.forward(tape, x)?;
            let c = attention_block(tape, h, memory.tokens, &layer.cross_attn, None, &cross_opts, rng.as_deref_mut())?;
            x = residual(tape, x, c, cfg.dropout, rng.as_deref_mut())?;
            let h = layer.norm_ffn.forward(tape, x)?;
            let f = layer.ffn.forward(tape, h)?;
            x = residual(tape, x, f, cfg.dropout, rng.as_deref_mut())?;
        }
        self.final_norm.forward(tape, x)
    }
}

/// Learned-parameter count per submodule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub entries: Vec<(String, usize)>,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, n)| n).sum()
    }
}

/// Closed-form parameter count of the model `cfg` describes.
pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    let mut entries = vec![
        (String::from("prenet"), Prenet::param_count(cfg)),
        (
            String::from("encoder"),
            cfg.n_encoder_layers * encoder_layer_param_count(d, ff) + LayerNorm::param_count(d),
        ),
    ];
    if cfg.variant.uses_decoder() {
        entries.push((
            String::from("decoder"),
            cfg.n_decoder_layers * decoder_layer_param_count(d, ff) + LayerNorm::param_count(d),
        ));
    }
    if cfg.variant.uses_cls() {
        entries.push((String::from("cls"), d));
    }
    let head = crate::variants::head_param_count(cfg);
    if head > 0 {
        entries.push((String::from("embedding_head"), head));
    }
    entries.push((
        String::from("classifier"),
        Linear::param_count(cfg.embedding_dim, cfg.n_speakers),
    ));
    Ok(ParamBreakdown { entries })
}
