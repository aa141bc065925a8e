//! Adam with decoupled weight decay, the triangular cyclical learning rate,
//! and the supervised speaker-classification loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::evaluation::{argmax, speaker_labels};
use crate::features::{crop_or_pad, spec_augment, FeatureMatrix, SpecAugmentConfig, CROP_FRAMES};
use crate::numerics::{math, ParamStore, Rng, Tape, Tensor};
use crate::transformer::ModelConfig;
use crate::variants::SpeakerModel;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        OptimizerState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored on `store`.
/// Weight decay is decoupled: `θ ← θ − lr·wd·θ` precedes the Adam delta.
/// Parameters without a gradient (unreached by the loss) are left alone.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::config(format!("learning rate {lr} must be positive")));
    }
    if state.m.len() != store.len() {
        return Err(Error::config("optimizer state does not match the parameter store"));
    }
    for p in store.iter() {
        if let Some(g) = &p.grad {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { param: p.name.clone() });
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - math::pow(c.beta1, state.step as f64);
    let bc2 = 1.0 - math::pow(c.beta2, state.step as f64);
    for (i, p) in store.iter_mut().enumerate() {
        let Some(g) = &p.grad else { continue };
        if !p.requires_grad {
            continue;
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let (m_hat, v_hat) = (m[j] / bc1, v[j] / bc2);
            *theta -= lr * c.weight_decay * *theta;
            *theta -= lr * m_hat / (math::sqrt(v_hat) + c.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_steps: u64,
    pub n_cycles: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_min: 1e-8,
            lr_max: 5e-4,
            cycle_steps: 60_000,
            n_cycles: 2,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(Error::config("schedule needs 0 < lr_min < lr_max"));
        }
        if self.cycle_steps < 2 || !self.cycle_steps.is_multiple_of(2) {
            return Err(Error::config("cycle_steps must be even and at least 2"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.cycle_steps * self.n_cycles
    }
}

/// Rises linearly `lr_min → lr_max` over the first half-cycle and falls back
/// over the second; periodic in `cycle_steps`.
pub fn triangular_lr(step: u64, s: &ScheduleConfig) -> f64 {
    let half = s.cycle_steps / 2;
    let pos = step % s.cycle_steps;
    let span = s.lr_max - s.lr_min;
    if pos == half {
        s.lr_max
    } else if pos < half {
        s.lr_min + span * (pos as f64 / half as f64)
    } else {
        s.lr_max - span * ((pos - half) as f64 / half as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Utterances per optimizer step (across accumulation micro-batches).
    pub batch_size: usize,
    pub accumulation: usize,
    pub steps: u64,
    pub crop_frames: usize,
    pub spec_augment: Option<SpecAugmentConfig>,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    pub log_every: u64,
    /// Checkpoint interval in steps; `0` checkpoints only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        let schedule = ScheduleConfig::default();
        TrainConfig {
            model,
            steps: schedule.total_steps(),
            schedule,
            adam: AdamConfig::default(),
            batch_size: 64,
            accumulation: 1,
            crop_frames: CROP_FRAMES,
            spec_augment: Some(SpecAugmentConfig::default()),
            clip_norm: None,
            log_every: 10,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.accumulation == 0 || !self.batch_size.is_multiple_of(self.accumulation) {
            return Err(Error::config("batch_size must be a positive multiple of accumulation"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// One logged training step (means over the logging interval).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Percent top-1 accuracy on the (augmented) training batches.
    pub acc: f64,
}

impl MetricRecord {
    /// `step=.. lr=.. loss=.. acc=..`; floats use the shortest exact form.
    pub fn to_line(&self) -> String {
        format!("step={} lr={:?} loss={:?} acc={:?}", self.step, self.lr, self.loss, self.acc)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut rec = MetricRecord {
            step: 0,
            lr: 0.0,
            loss: 0.0,
            acc: 0.0,
        };
        let mut seen = 0u8;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::config(format!("metrics field `{field}` is not key=value")))?;
            let bad = || Error::config(format!("metrics value `{v}` for `{k}`"));
            match k {
                "step" => (rec.step, seen) = (v.parse().map_err(|_| bad())?, seen | 1),
                "lr" => (rec.lr, seen) = (v.parse().map_err(|_| bad())?, seen | 2),
                "loss" => (rec.loss, seen) = (v.parse().map_err(|_| bad())?, seen | 4),
                "acc" => (rec.acc, seen) = (v.parse().map_err(|_| bad())?, seen | 8),
                _ => return Err(Error::config(format!("unknown metrics key `{k}`"))),
            }
        }
        if seen != 15 {
            return Err(Error::config(format!("incomplete metrics line `{line}`")));
        }
        Ok(rec)
    }
}

/// Hooks the loop calls as it runs. Errors abort training.
pub trait TrainObserver {
    fn on_metrics(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: u64, _model: &SpeakerModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects metric records in memory.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl TrainObserver for MetricsLog {
    fn on_metrics(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(*record);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SpeakerModel,
    pub optimizer: OptimizerState,
    pub records: Vec<MetricRecord>,
}

/// Stacks cropped (and optionally augmented) utterances into `[B, T, F]`.
fn make_batch(
    cfg: &TrainConfig,
    utts: &[FeatureMatrix],
    picks: &[usize],
    step: u64,
) -> Result<Tensor> {
    let prepared: Vec<FeatureMatrix> = picks
        .iter()
        .map(|&i| {
            // Per-utterance, per-step streams keep augmentation independent
            // of batch composition.
            let mut rng = Rng::for_label(cfg.seed, &utts[i].utterance_id, step + 1);
            let f = crop_or_pad(&utts[i], cfg.crop_frames, &mut rng);
            match &cfg.spec_augment {
                Some(sa) => spec_augment(&f, sa, &mut rng),
                None => f,
            }
        })
        .collect();
    let refs: Vec<&FeatureMatrix> = prepared.iter().collect();
    SpeakerModel::batch_tensor(&refs)
}

fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    math::sqrt(
        grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum(),
    )
}

/// Minibatch cross-entropy training. Deterministic given `cfg.seed`:
/// epochs are seeded shuffles, crops/augmentation draw from per-utterance
/// streams and dropout from a per-step stream. A non-finite loss aborts with
/// [`Error::Diverged`]; checkpoints already handed to the observer remain the
/// last good state.
pub fn train(
    cfg: &TrainConfig,
    utts: &[FeatureMatrix],
    speakers: &[String],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if utts.is_empty() {
        return Err(Error::config("empty training set"));
    }
    if speakers.len() != cfg.model.n_speakers {
        return Err(Error::config(format!(
            "model has {} speaker classes, data has {}",
            cfg.model.n_speakers,
            speakers.len()
        )));
    }
    let labels = speaker_labels(utts, speakers)?;
    let mut model = SpeakerModel::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new(&model.store, cfg.adam);
    let mut order: Vec<usize> = (0..utts.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let micro = cfg.batch_size / cfg.accumulation;
    let mut records = Vec::new();
    let (mut loss_acc, mut hits, mut seen, mut since_log) = (0.0, 0usize, 0usize, 0u64);

    for step in 0..cfg.steps {
        let lr = triangular_lr(step, &cfg.schedule);
        let mut grads: Vec<Option<Tensor>> = (0..model.store.len()).map(|_| None).collect();
        let mut step_loss = 0.0;
        for k in 0..cfg.accumulation {
            let mut picks = Vec::with_capacity(micro);
            while picks.len() < micro {
                if cursor == order.len() {
                    Rng::for_label(cfg.seed, "epoch", epoch).shuffle(&mut order);
                    epoch += 1;
                    cursor = 0;
                }
                picks.push(order[cursor]);
                cursor += 1;
            }
            let x = make_batch(cfg, utts, &picks, step)?;
            let y: Vec<usize> = picks.iter().map(|&i| labels[i]).collect();
            let mut dropout_rng = Rng::for_label(cfg.seed, "dropout", step * cfg.accumulation as u64 + k as u64);
            let mut tape = Tape::new(&model.store);
            let xv = tape.constant(x);
            let out = model.forward(&mut tape, xv, Some(&mut dropout_rng))?;
            let loss = tape.cross_entropy(out.logits, &y)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss is {lv}"),
                });
            }
            step_loss += lv / cfg.accumulation as f64;
            let logits = tape.value(out.logits);
            hits += y.iter().enumerate().filter(|&(b, &l)| argmax(logits.row(b)) == l).count();
            seen += y.len();
            let g = tape.backward(loss)?.into_params(model.store.len());
            let scale = 1.0 / cfg.accumulation as f64;
            for (acc, gi) in grads.iter_mut().zip(g) {
                if let Some(gi) = gi {
                    match acc {
                        Some(a) => a.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += scale * b),
                        None => *acc = Some(gi.map(|v| scale * v)),
                    }
                }
            }
        }
        if let Some(max) = cfg.clip_norm {
            let norm = global_norm(&grads);
            if norm > max {
                let k = max / norm;
                grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
            }
        }
        for (p, g) in model.store.iter_mut().zip(grads) {
            p.grad = g;
        }
        adam_step(&mut model.store, &mut opt, lr)?;
        model.store.zero_grads();
        // An overflowing update is divergence too; stop before it can reach a
        // checkpoint.
        if let Some(p) = model.store.iter().find(|p| !p.value.all_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("parameter `{}` is no longer finite", p.name),
            });
        }

        loss_acc += step_loss;
        since_log += 1;
        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.steps {
            let rec = MetricRecord {
                step: done,
                lr,
                loss: loss_acc / since_log as f64,
                acc: 100.0 * hits as f64 / seen as f64,
            };
            observer.on_metrics(&rec)?;
            records.push(rec);
            (loss_acc, hits, seen, since_log) = (0.0, 0, 0, 0);
        }
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps {
            observer.on_checkpoint(done, &model)?;
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        records,
    })
}
