//! Speaker models: prenet + encoder (+ decoder) + one of five embedding heads
//! + a linear speaker classifier.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::features::FeatureMatrix;
use crate::numerics::layers::Linear;
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::transformer::{Decoder, EncodedSequence, Encoder, ModelConfig, Prenet, Variant};
use crate::{Error, Result};

/// Variance floor of attentive statistics pooling.
pub const POOL_VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub utterance_id: String,
    pub vector: Vec<f64>,
}

/// Scorer `vᵀ tanh(W h_t + b)` of attentive statistics pooling.
#[derive(Clone, Copy, Debug)]
pub struct PoolingParams {
    pub scorer: Linear,
    /// `[d_attn]`
    pub context: ParamId,
    pub var_floor: f64,
}

impl PoolingParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_attn: usize, rng: &mut Rng) -> Self {
        let scorer = Linear::new(store, &alloc::format!("{name}.scorer"), d, d_attn, rng);
        let a = crate::numerics::math::sqrt(3.0 / d_attn as f64);
        let context = store.add(
            &alloc::format!("{name}.context"),
            Tensor::from_fn(&[d_attn], |_| rng.uniform_in(-a, a)),
        );
        PoolingParams {
            scorer,
            context,
            var_floor: POOL_VAR_FLOOR,
        }
    }

    pub fn param_count(d: usize, d_attn: usize) -> usize {
        Linear::param_count(d, d_attn) + d_attn
    }
}

/// Attention-weighted mean and standard deviation over time:
/// `h: [B, N, d]` → `[B, 2d]` as `concat(μ, σ)`, with
/// `σ = sqrt(max(Σ α h⊙h − μ⊙μ, var_floor))`.
pub fn attentive_stats_pool(tape: &mut Tape<'_>, h: Var, params: &PoolingParams) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("attentive_stats_pool", &s, &[]));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let e = params.scorer.forward(tape, h)?;
    let e = tape.tanh(e);
    let v = tape.param(params.context);
    let da = tape.shape(v)[0];
    let v = tape.reshape(v, &[da, 1])?;
    let scores = tape.matmul(e, v)?;
    let scores = tape.reshape(scores, &[b, 1, n])?;
    let alpha = tape.softmax(scores)?;
    let mu = tape.matmul(alpha, h)?;
    let hh = tape.mul(h, h)?;
    let m2 = tape.matmul(alpha, hh)?;
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.sub(m2, mu2)?;
    let var = tape.clamp_min(var, params.var_floor);
    let sigma = tape.sqrt(var)?;
    let pooled = tape.concat(&[mu, sigma], 2)?;
    tape.reshape(pooled, &[b, 2 * d])
}

#[derive(Clone, Debug)]
enum Head {
    /// Variants a, b, d: square map from the selected token.
    Projection(Linear),
    /// Variant c: the mean is the embedding.
    Mean,
    /// Variant e.
    StatsPooling {
        pre: Linear,
        pool: PoolingParams,
        hidden1: Linear,
        hidden2: Linear,
    },
}

/// Learned parameters of the embedding head (everything after the encoder or
/// decoder, excluding the classifier).
pub fn head_param_count(cfg: &ModelConfig) -> usize {
    let (d, e) = (cfg.d_model, cfg.embedding_dim);
    match cfg.variant {
        Variant::AverageEncoderTokens => 0,
        Variant::PoolingEncoderTokens => {
            Linear::param_count(d, d)
                + PoolingParams::param_count(d, cfg.pool_attn_dim)
                + Linear::param_count(2 * d, e)
                + Linear::param_count(e, e)
        }
        _ => Linear::param_count(d, e),
    }
}

/// Embedding and classifier input for one batch.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B, embedding_dim]`
    pub embedding: Var,
    /// `[B, n_speakers]`
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct SpeakerModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    prenet: Prenet,
    encoder: Encoder,
    decoder: Option<Decoder>,
    cls: Option<ParamId>,
    head: Head,
    classifier: Linear,
}

impl SpeakerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let (d, e) = (cfg.d_model, cfg.embedding_dim);
        let prenet = Prenet::new(&mut store, cfg, &mut rng);
        let encoder = Encoder::new(&mut store, cfg, &mut rng)?;
        let decoder = if cfg.variant.uses_decoder() {
            Some(Decoder::new(&mut store, cfg, &mut rng)?)
        } else {
            None
        };
        let cls = cfg.variant.uses_cls().then(|| {
            let t = Tensor::from_fn(&[d], |_| 0.02 * rng.normal());
            store.add("cls", t)
        });
        let head = match cfg.variant {
            Variant::AverageEncoderTokens => Head::Mean,
            Variant::PoolingEncoderTokens => Head::StatsPooling {
                pre: Linear::new(&mut store, "head.pre_pool", d, d, &mut rng),
                pool: PoolingParams::new(&mut store, "head.pool", d, cfg.pool_attn_dim, &mut rng),
                hidden1: Linear::new(&mut store, "head.hidden1", 2 * d, e, &mut rng),
                hidden2: Linear::new(&mut store, "head.hidden2", e, e, &mut rng),
            },
            _ => Head::Projection(Linear::new(&mut store, "head.proj", d, e, &mut rng)),
        };
        let classifier = Linear::new(&mut store, "classifier", e, cfg.n_speakers, &mut rng);
        Ok(SpeakerModel {
            config,
            store,
            prenet,
            encoder,
            decoder,
            cls,
            head,
            classifier,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }

    pub fn classifier(&self) -> Linear {
        self.classifier
    }

    /// Prenet output `H` for `x: [B, T, feature_dim]`.
    pub fn prenet(&self, tape: &mut Tape<'_>, x: Var, rng: Option<&mut Rng>) -> Result<EncodedSequence> {
        self.prenet.forward(tape, x, &self.config, rng)
    }

    /// Encoder over an already prenet-processed sequence, with masks for its
    /// length (and `[CLS]` position, if any).
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        seq: EncodedSequence,
        cls_index: Option<usize>,
        rng: Option<&mut Rng>,
    ) -> Result<EncodedSequence> {
        let masks = self.config.encoder_masks(seq.n_steps, cls_index)?;
        self.encoder.forward(tape, seq, &masks, &self.config, rng)
    }

    /// `[CLS]` broadcast to `[B, 1, d]`.
    fn cls_tokens(&self, tape: &mut Tape<'_>, batch: usize) -> Result<Var> {
        let id = self.cls.ok_or_else(|| Error::config("variant has no [CLS] token"))?;
        let d = self.config.d_model;
        let c = tape.param(id);
        let c = tape.reshape(c, &[1, 1, d])?;
        tape.broadcast_to(c, &[batch, 1, d])
    }

    fn decode(&self, tape: &mut Tape<'_>, target: Var, memory: &EncodedSequence, rng: Option<&mut Rng>) -> Result<Var> {
        let dec = self.decoder.as_ref().ok_or_else(|| Error::config("variant has no decoder"))?;
        dec.forward(tape, target, memory, &self.config, rng)
    }

    /// Token `pos` of `[B, N, d]` as `[B, d]`.
    fn token(tape: &mut Tape<'_>, x: Var, pos: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let t = tape.slice(x, 1, pos, 1)?;
        tape.reshape(t, &[s[0], s[2]])
    }

    /// Encoder input and `[CLS]` position: `[CLS; H]` with `[CLS]` at 0 for
    /// variant d, `H` unchanged otherwise.
    pub fn encoder_input(&self, tape: &mut Tape<'_>, h: EncodedSequence) -> Result<(EncodedSequence, Option<usize>)> {
        if self.config.variant != Variant::FirstEncoderToken {
            return Ok((h, None));
        }
        let batch = tape.shape(h.tokens)[0];
        let cls = self.cls_tokens(tape, batch)?;
        let tokens = tape.concat(&[cls, h.tokens], 1)?;
        let seq = EncodedSequence {
            tokens,
            n_steps: h.n_steps + 1,
        };
        Ok((seq, Some(0)))
    }

    /// Decoder input: the lone `[CLS]` for variant a, `[H; CLS]` for
    /// variant b.
    pub fn decoder_target(&self, tape: &mut Tape<'_>, h: EncodedSequence) -> Result<Var> {
        let batch = tape.shape(h.tokens)[0];
        let cls = self.cls_tokens(tape, batch)?;
        match self.config.variant {
            Variant::FirstDecoderToken => Ok(cls),
            Variant::LastDecoderToken => tape.concat(&[h.tokens, cls], 1),
            _ => Err(Error::config("variant has no decoder")),
        }
    }

    /// Speaker logits from the classifier input.
    pub fn classify(&self, tape: &mut Tape<'_>, input: Var) -> Result<Var> {
        self.classifier.forward(tape, input)
    }

    /// Embedding and logits for `x: [B, T, feature_dim]`. `rng` enables
    /// dropout (training); `None` is evaluation mode.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mut rng: Option<&mut Rng>) -> Result<ModelOutput> {
        let h = self.prenet(tape, x, rng.as_deref_mut())?;
        let (seq, cls_index) = self.encoder_input(tape, h)?;
        let enc = self.encode(tape, seq, cls_index, rng.as_deref_mut())?;
        let (embedding, classifier_input) = match &self.head {
            Head::Projection(proj) => {
                let tok = if self.config.variant.uses_decoder() {
                    let target = self.decoder_target(tape, h)?;
                    let out = self.decode(tape, target, &enc, rng)?;
                    let last = tape.shape(out)[1] - 1;
                    Self::token(tape, out, last)?
                } else {
                    Self::token(tape, enc.tokens, 0)?
                };
                let e = proj.forward(tape, tok)?;
                (e, e)
            }
            Head::Mean => {
                let e = tape.mean_axis(enc.tokens, 1)?;
                (e, e)
            }
            Head::StatsPooling {
                pre,
                pool,
                hidden1,
                hidden2,
            } => {
                let z = pre.forward(tape, enc.tokens)?;
                let pooled = attentive_stats_pool(tape, z, pool)?;
                let e = hidden1.forward(tape, pooled)?;
                let a = tape.relu(e);
                let a = hidden2.forward(tape, a)?;
                (e, tape.relu(a))
            }
        };
        let logits = self.classify(tape, classifier_input)?;
        Ok(ModelOutput { embedding, logits })
    }

    /// Stacks equal-length utterances into `[B, T, F]`.
    pub fn batch_tensor(features: &[&FeatureMatrix]) -> Result<Tensor> {
        let first = features
            .first()
            .ok_or_else(|| Error::config("empty batch"))?
            .frames
            .shape()
            .to_vec();
        let mut data = Vec::with_capacity(features.len() * first[0] * first[1]);
        for f in features {
            if f.frames.shape() != first.as_slice() {
                return Err(Error::shape("batch", &first, f.frames.shape()));
            }
            data.extend_from_slice(f.frames.data());
        }
        Tensor::new(vec![features.len(), first[0], first[1]], data)
    }

    /// Evaluation-mode embedding of one full-length utterance.
    pub fn embed(&self, utt: &FeatureMatrix) -> Result<SpeakerEmbedding> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(Self::batch_tensor(&[utt])?);
        let out = self.forward(&mut tape, x, None)?;
        let vector = tape.value(out.embedding).data().to_vec();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "embed",
                detail: alloc::format!("non-finite embedding for {}", utt.utterance_id),
            });
        }
        Ok(SpeakerEmbedding {
            utterance_id: utt.utterance_id.clone(),
            vector,
        })
    }

    /// Evaluation-mode logits of one full-length utterance.
    pub fn logits(&self, utt: &FeatureMatrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(Self::batch_tensor(&[utt])?);
        let out = self.forward(&mut tape, x, None)?;
        Ok(tape.value(out.logits).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::math;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
    }

    fn pool_params(store: &mut ParamStore, d: usize, da: usize, seed: u64) -> PoolingParams {
        let mut rng = Rng::new(seed);
        let p = PoolingParams::new(store, "pool", d, da, &mut rng);
        let b = random(&mut rng, &[da]);
        store.get_mut(p.scorer.bias).value = b;
        p
    }

    #[test]
    fn uniform_scorer_gives_mean_and_population_std() {
        let (b, n, d) = (2, 5, 3);
        let mut store = ParamStore::new();
        let p = pool_params(&mut store, d, 4, 1);
        store.get_mut(p.context).value = Tensor::zeros(&[4]);
        let h = random(&mut Rng::new(2), &[b, n, d]);
        let mut tape = Tape::new(&store);
        let hv = tape.constant(h.clone());
        let out = attentive_stats_pool(&mut tape, hv, &p).unwrap();
        let out = tape.value(out);
        for bi in 0..b {
            for j in 0..d {
                let xs: Vec<f64> = (0..n).map(|t| h.at(&[bi, t, j])).collect();
                let mean = xs.iter().sum::<f64>() / n as f64;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                assert!((out.at(&[bi, j]) - mean).abs() < 1e-10);
                assert!((out.at(&[bi, d + j]) - math::sqrt(var)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_frame_pools_to_floor() {
        let mut store = ParamStore::new();
        let p = pool_params(&mut store, 3, 2, 3);
        let h = random(&mut Rng::new(4), &[1, 1, 3]);
        let mut tape = Tape::new(&store);
        let hv = tape.constant(h.clone());
        let out = attentive_stats_pool(&mut tape, hv, &p).unwrap();
        let out = tape.value(out);
        for j in 0..3 {
            assert!((out.at(&[0, j]) - h.data()[j]).abs() < 1e-15);
            assert_eq!(out.at(&[0, 3 + j]), math::sqrt(POOL_VAR_FLOOR));
        }
    }

    #[test]
    fn pooling_matches_direct_summation() {
        let (b, n, d, da) = (2, 5, 3, 4);
        let mut store = ParamStore::new();
        let p = pool_params(&mut store, d, da, 5);
        let h = random(&mut Rng::new(6), &[b, n, d]);
        let (w, bias, v) = (store.value(p.scorer.weight), store.value(p.scorer.bias), store.value(p.context));
        let mut tape = Tape::new(&store);
        let hv = tape.constant(h.clone());
        let out = attentive_stats_pool(&mut tape, hv, &p).unwrap();
        let out = tape.value(out);
        for bi in 0..b {
            let e: Vec<f64> = (0..n)
                .map(|t| {
                    (0..da)
                        .map(|a| {
                            let z = bias.data()[a] + (0..d).map(|j| h.at(&[bi, t, j]) * w.at(&[j, a])).sum::<f64>();
                            v.data()[a] * math::tanh(z)
                        })
                        .sum()
                })
                .collect();
            let z: f64 = e.iter().map(|x| math::exp(*x)).sum();
            let alpha: Vec<f64> = e.iter().map(|x| math::exp(*x) / z).collect();
            for j in 0..d {
                let mu: f64 = (0..n).map(|t| alpha[t] * h.at(&[bi, t, j])).sum();
                let m2: f64 = (0..n).map(|t| alpha[t] * h.at(&[bi, t, j]) * h.at(&[bi, t, j])).sum();
                let sigma = math::sqrt(f64::max(m2 - mu * mu, POOL_VAR_FLOOR));
                assert!((out.at(&[bi, j]) - mu).abs() < 1e-10);
                assert!((out.at(&[bi, d + j]) - sigma).abs() < 1e-10);
            }
        }
    }
}
