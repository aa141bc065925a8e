//! Flat `key = value` configuration text for models and training runs.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors; missing keys keep their defaults. Writing emits every key in a
//! fixed order, so write → parse → write is byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use mvsa_core::attention::MaskMode;
use mvsa_core::features::SpecAugmentConfig;
use mvsa_core::masks::ClsPolicy;
use mvsa_core::training::TrainConfig;
use mvsa_core::transformer::{ModelConfig, MvScope, Variant};

pub const MODEL_KEYS: &[&str] = &[
    "n_encoder_layers",
    "n_decoder_layers",
    "d_model",
    "d_ff",
    "heads",
    "dropout",
    "variant",
    "mask_mode",
    "multi_view",
    "cls_policy",
    "mv_scope",
    "feature_dim",
    "embedding_dim",
    "n_speakers",
    "pool_attn_dim",
    "positional_encoding",
    "layer_windows",
];

pub const TRAIN_KEYS: &[&str] = &[
    "lr_min",
    "lr_max",
    "cycle_steps",
    "n_cycles",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "batch_size",
    "accumulation",
    "steps",
    "crop_frames",
    "spec_augment",
    "max_time_masks",
    "max_time_width",
    "max_freq_masks",
    "max_freq_width",
    "clip_norm",
    "log_every",
    "checkpoint_every",
    "seed",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {detail}")]
pub struct ConfigError {
    pub line: usize,
    pub detail: String,
}

fn err(line: usize, detail: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        detail: detail.into(),
    }
}

/// Key → (line number, raw value), rejecting keys outside `allowed`.
fn entries(text: &str, allowed: &[&[&str]]) -> Result<BTreeMap<String, (usize, String)>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(i + 1, format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if !allowed.iter().any(|keys| keys.contains(&k)) {
            return Err(err(i + 1, format!("unknown key `{k}`")));
        }
        if out.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
            return Err(err(i + 1, format!("duplicate key `{k}`")));
        }
    }
    Ok(out)
}

struct Reader(BTreeMap<String, (usize, String)>);

impl Reader {
    fn get<T>(&self, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T, ConfigError> {
        match self.0.get(key) {
            None => Ok(default),
            Some((line, v)) => parse(v).ok_or_else(|| err(*line, format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn num<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        self.get(key, default, |v| v.parse().ok())
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

pub fn mask_mode_name(m: MaskMode) -> &'static str {
    match m {
        MaskMode::PostSoftmax => "post_softmax",
        MaskMode::PreSoftmax => "pre_softmax",
    }
}

fn cls_policy_name(c: ClsPolicy) -> &'static str {
    match c {
        ClsPolicy::Windowed => "windowed",
        ClsPolicy::Global => "global",
    }
}

fn mv_scope_name(s: MvScope) -> &'static str {
    match s {
        MvScope::EncoderOnly => "encoder_only",
        MvScope::EncoderAndDecoder => "encoder_and_decoder",
    }
}

/// `1,3,5;1,3,7` → one window list per `;`-separated group; empty → none.
fn parse_windows(v: &str) -> Option<Vec<Vec<usize>>> {
    if v.is_empty() {
        return Some(Vec::new());
    }
    v.split(';')
        .map(|g| g.split(',').map(|w| w.trim().parse().ok()).collect())
        .collect()
}

fn format_windows(w: &[Vec<usize>]) -> String {
    w.iter()
        .map(|g| g.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

fn read_model(r: &Reader) -> Result<ModelConfig, ConfigError> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        n_encoder_layers: r.num("n_encoder_layers", d.n_encoder_layers)?,
        n_decoder_layers: r.num("n_decoder_layers", d.n_decoder_layers)?,
        d_model: r.num("d_model", d.d_model)?,
        d_ff: r.num("d_ff", d.d_ff)?,
        heads: r.num("heads", d.heads)?,
        dropout: r.num("dropout", d.dropout)?,
        variant: r.get("variant", d.variant, Variant::from_letter)?,
        mask_mode: r.get("mask_mode", d.mask_mode, |v| match v {
            "post_softmax" => Some(MaskMode::PostSoftmax),
            "pre_softmax" => Some(MaskMode::PreSoftmax),
            _ => None,
        })?,
        multi_view: r.get("multi_view", d.multi_view, parse_bool)?,
        cls_policy: r.get("cls_policy", d.cls_policy, |v| match v {
            "windowed" => Some(ClsPolicy::Windowed),
            "global" => Some(ClsPolicy::Global),
            _ => None,
        })?,
        mv_scope: r.get("mv_scope", d.mv_scope, |v| match v {
            "encoder_only" => Some(MvScope::EncoderOnly),
            "encoder_and_decoder" => Some(MvScope::EncoderAndDecoder),
            _ => None,
        })?,
        feature_dim: r.num("feature_dim", d.feature_dim)?,
        embedding_dim: r.num("embedding_dim", d.embedding_dim)?,
        n_speakers: r.num("n_speakers", d.n_speakers)?,
        pool_attn_dim: r.num("pool_attn_dim", d.pool_attn_dim)?,
        positional_encoding: r.get("positional_encoding", d.positional_encoding, parse_bool)?,
        layer_windows: r.get("layer_windows", d.layer_windows, parse_windows)?,
    })
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig, ConfigError> {
    read_model(&Reader(entries(text, &[MODEL_KEYS])?))
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig, ConfigError> {
    let r = Reader(entries(text, &[MODEL_KEYS, TRAIN_KEYS])?);
    let d = TrainConfig::new(read_model(&r)?);
    let sa = d.spec_augment.unwrap_or_default();
    let spec_on = r.get("spec_augment", d.spec_augment.is_some(), parse_bool)?;
    let sa = SpecAugmentConfig {
        max_time_masks: r.num("max_time_masks", sa.max_time_masks)?,
        max_time_width: r.num("max_time_width", sa.max_time_width)?,
        max_freq_masks: r.num("max_freq_masks", sa.max_freq_masks)?,
        max_freq_width: r.num("max_freq_width", sa.max_freq_width)?,
    };
    let mut cfg = TrainConfig {
        schedule: mvsa_core::training::ScheduleConfig {
            lr_min: r.num("lr_min", d.schedule.lr_min)?,
            lr_max: r.num("lr_max", d.schedule.lr_max)?,
            cycle_steps: r.num("cycle_steps", d.schedule.cycle_steps)?,
            n_cycles: r.num("n_cycles", d.schedule.n_cycles)?,
        },
        adam: mvsa_core::training::AdamConfig {
            beta1: r.num("beta1", d.adam.beta1)?,
            beta2: r.num("beta2", d.adam.beta2)?,
            eps: r.num("eps", d.adam.eps)?,
            weight_decay: r.num("weight_decay", d.adam.weight_decay)?,
        },
        batch_size: r.num("batch_size", d.batch_size)?,
        accumulation: r.num("accumulation", d.accumulation)?,
        steps: d.steps,
        crop_frames: r.num("crop_frames", d.crop_frames)?,
        spec_augment: spec_on.then_some(sa),
        clip_norm: r.get("clip_norm", d.clip_norm, |v| match v {
            "none" => Some(None),
            _ => v.parse().ok().map(Some),
        })?,
        log_every: r.num("log_every", d.log_every)?,
        checkpoint_every: r.num("checkpoint_every", d.checkpoint_every)?,
        seed: r.num("seed", d.seed)?,
        model: d.model,
    };
    // Without an explicit step count, run every scheduled cycle.
    cfg.steps = r.num("steps", cfg.schedule.total_steps())?;
    Ok(cfg)
}

pub fn write_model_config(m: &ModelConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
    kv("n_encoder_layers", m.n_encoder_layers.to_string());
    kv("n_decoder_layers", m.n_decoder_layers.to_string());
    kv("d_model", m.d_model.to_string());
    kv("d_ff", m.d_ff.to_string());
    kv("heads", m.heads.to_string());
    kv("dropout", format!("{:?}", m.dropout));
    kv("variant", m.variant.letter().to_string());
    kv("mask_mode", mask_mode_name(m.mask_mode).into());
    kv("multi_view", m.multi_view.to_string());
    kv("cls_policy", cls_policy_name(m.cls_policy).into());
    kv("mv_scope", mv_scope_name(m.mv_scope).into());
    kv("feature_dim", m.feature_dim.to_string());
    kv("embedding_dim", m.embedding_dim.to_string());
    kv("n_speakers", m.n_speakers.to_string());
    kv("pool_attn_dim", m.pool_attn_dim.to_string());
    kv("positional_encoding", m.positional_encoding.to_string());
    kv("layer_windows", format_windows(&m.layer_windows));
    s
}

pub fn write_train_config(c: &TrainConfig) -> String {
    let mut s = write_model_config(&c.model);
    let sa = c.spec_augment.unwrap_or_default();
    let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
    kv("lr_min", format!("{:?}", c.schedule.lr_min));
    kv("lr_max", format!("{:?}", c.schedule.lr_max));
    kv("cycle_steps", c.schedule.cycle_steps.to_string());
    kv("n_cycles", c.schedule.n_cycles.to_string());
    kv("beta1", format!("{:?}", c.adam.beta1));
    kv("beta2", format!("{:?}", c.adam.beta2));
    kv("eps", format!("{:?}", c.adam.eps));
    kv("weight_decay", format!("{:?}", c.adam.weight_decay));
    kv("batch_size", c.batch_size.to_string());
    kv("accumulation", c.accumulation.to_string());
    kv("steps", c.steps.to_string());
    kv("crop_frames", c.crop_frames.to_string());
    kv("spec_augment", c.spec_augment.is_some().to_string());
    kv("max_time_masks", sa.max_time_masks.to_string());
    kv("max_time_width", sa.max_time_width.to_string());
    kv("max_freq_masks", sa.max_freq_masks.to_string());
    kv("max_freq_width", sa.max_freq_width.to_string());
    kv("clip_norm", c.clip_norm.map_or("none".into(), |v| format!("{v:?}")));
    kv("log_every", c.log_every.to_string());
    kv("checkpoint_every", c.checkpoint_every.to_string());
    kv("seed", c.seed.to_string());
    s
}
