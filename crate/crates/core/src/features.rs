//! Acoustic frontend pieces that need no FFT (mel filterbank design, CMVN,
//! SpecAugment, cropping) and the synthetic speaker corpus.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::evaluation::{Trial, TrialList};
use crate::numerics::math;
use crate::numerics::{Rng, Tensor};
use crate::{Error, Result};

pub const SAMPLE_RATE: usize = 16_000;
/// 64 ms at 16 kHz.
pub const WINDOW_SAMPLES: usize = 1024;
/// 16 ms at 16 kHz.
pub const HOP_SAMPLES: usize = 256;
pub const N_MELS: usize = 80;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const CMVN_WINDOW: usize = 200;
pub const CMVN_VAR_FLOOR: f64 = 1e-8;
pub const CROP_FRAMES: usize = 200;

/// `T × F` features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `[T, F]`
    pub frames: Tensor,
    pub utterance_id: String,
    pub speaker_id: String,
}

impl FeatureMatrix {
    pub fn new(frames: Tensor, utterance_id: impl Into<String>, speaker_id: impl Into<String>) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[0] == 0 || frames.shape()[1] == 0 {
            return Err(Error::shape("FeatureMatrix", frames.shape(), &[]));
        }
        if !frames.all_finite() {
            return Err(Error::Numeric {
                op: "FeatureMatrix",
                detail: "non-finite feature value".into(),
            });
        }
        Ok(FeatureMatrix {
            frames,
            utterance_id: utterance_id.into(),
            speaker_id: speaker_id.into(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.frames.shape()[1]
    }

    fn with_frames(&self, frames: Tensor) -> Self {
        FeatureMatrix {
            frames,
            utterance_id: self.utterance_id.clone(),
            speaker_id: self.speaker_id.clone(),
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * math::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (math::pow(10.0, mel / 2595.0) - 1.0)
}

/// Number of STFT frames for `n_samples` (no edge padding).
pub fn frame_count(n_samples: usize) -> Result<usize> {
    if n_samples < WINDOW_SAMPLES {
        return Err(Error::InputTooShort {
            op: "mel_features",
            detail: format!("{n_samples} samples, need at least {WINDOW_SAMPLES}"),
        });
    }
    Ok((n_samples - WINDOW_SAMPLES) / HOP_SAMPLES + 1)
}

/// Periodic Hann window of `n` samples.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * math::cos(2.0 * math::PI * i as f64 / n as f64))
        .collect()
}

/// Triangular mel filters over the `n_fft / 2 + 1` STFT bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[n_mels, n_fft / 2 + 1]`, peak weight 1.
    pub weights: Tensor,
    /// Center frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: usize, low_hz: f64, high_hz: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Tensor::zeros(&[n_mels, n_bins]);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = (k * sample_rate) as f64 / n_fft as f64;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights.set(&[m, k], w);
            }
        }
        MelFilterbank {
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn standard() -> Self {
        Self::new(N_MELS, WINDOW_SAMPLES, SAMPLE_RATE, MEL_LOW_HZ, MEL_HIGH_HZ)
    }

    pub fn n_mels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// `log(max(W·|X|, floor))` for one magnitude spectrum.
    pub fn log_energies(&self, magnitude: &[f64], out: &mut [f64]) {
        let n_bins = self.weights.shape()[1];
        debug_assert_eq!(magnitude.len(), n_bins);
        for (m, o) in out.iter_mut().enumerate() {
            let e: f64 = self.weights.row(m).iter().zip(magnitude).map(|(w, x)| w * x).sum();
            *o = math::ln(f64::max(e, LOG_FLOOR));
        }
    }
}

/// Per-dimension mean/variance normalization over a centered sliding window
/// of `window` frames, truncated at the utterance edges. Utterances no
/// longer than `window` use whole-utterance statistics.
pub fn cmvn(f: &FeatureMatrix, window: usize) -> FeatureMatrix {
    let (t_len, n_bins) = (f.n_frames(), f.n_bins());
    let x = f.frames.data();
    let mut out = Tensor::zeros(&[t_len, n_bins]);
    let half = window / 2;
    // Prefix sums make each window O(F).
    let mut s1 = vec![0.0; (t_len + 1) * n_bins];
    let mut s2 = vec![0.0; (t_len + 1) * n_bins];
    for t in 0..t_len {
        for j in 0..n_bins {
            let v = x[t * n_bins + j];
            s1[(t + 1) * n_bins + j] = s1[t * n_bins + j] + v;
            s2[(t + 1) * n_bins + j] = s2[t * n_bins + j] + v * v;
        }
    }
    let o = out.data_mut();
    for t in 0..t_len {
        let (lo, hi) = if t_len <= window {
            (0, t_len)
        } else {
            (t.saturating_sub(half), usize::min(t_len, t + window - half))
        };
        let n = (hi - lo) as f64;
        for j in 0..n_bins {
            let mean = (s1[hi * n_bins + j] - s1[lo * n_bins + j]) / n;
            let var = (s2[hi * n_bins + j] - s2[lo * n_bins + j]) / n - mean * mean;
            let std = math::sqrt(f64::max(var, CMVN_VAR_FLOOR));
            o[t * n_bins + j] = (x[t * n_bins + j] - mean) / std;
        }
    }
    f.with_frames(out)
}

/// Bounds for SpecAugment draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecAugmentConfig {
    pub max_time_masks: u32,
    pub max_time_width: u32,
    pub max_freq_masks: u32,
    pub max_freq_width: u32,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            max_time_masks: 2,
            max_time_width: 20,
            max_freq_masks: 2,
            max_freq_width: 10,
        }
    }
}

/// A concrete set of `(start, width)` time and frequency masks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpecAugmentPlan {
    pub time: Vec<(usize, usize)>,
    pub freq: Vec<(usize, usize)>,
}

fn draw_masks(rng: &mut Rng, max_masks: u32, max_width: u32, extent: usize) -> Vec<(usize, usize)> {
    let count = rng.int_inclusive(1, max_masks.max(1));
    (0..count)
        .map(|_| {
            let width = usize::min(rng.int_inclusive(0, max_width) as usize, extent);
            let start = rng.index(extent - width + 1);
            (start, width)
        })
        .collect()
}

impl SpecAugmentPlan {
    /// One or `max_*_masks` masks per axis, widths inclusive-uniform and
    /// clipped to the utterance.
    pub fn draw(rng: &mut Rng, cfg: &SpecAugmentConfig, n_frames: usize, n_bins: usize) -> Self {
        let time = draw_masks(rng, cfg.max_time_masks, cfg.max_time_width, n_frames);
        let freq = draw_masks(rng, cfg.max_freq_masks, cfg.max_freq_width, n_bins);
        SpecAugmentPlan { time, freq }
    }

    pub fn apply(&self, f: &FeatureMatrix) -> FeatureMatrix {
        let (t_len, n_bins) = (f.n_frames(), f.n_bins());
        let mut frames = f.frames.clone();
        let d = frames.data_mut();
        for &(start, width) in &self.time {
            for t in start..usize::min(start + width, t_len) {
                d[t * n_bins..(t + 1) * n_bins].fill(0.0);
            }
        }
        for &(start, width) in &self.freq {
            for t in 0..t_len {
                for j in start..usize::min(start + width, n_bins) {
                    d[t * n_bins + j] = 0.0;
                }
            }
        }
        f.with_frames(frames)
    }
}

pub fn spec_augment(f: &FeatureMatrix, cfg: &SpecAugmentConfig, rng: &mut Rng) -> FeatureMatrix {
    SpecAugmentPlan::draw(rng, cfg, f.n_frames(), f.n_bins()).apply(f)
}

/// Random `target`-frame crop of longer utterances, cyclic repetition of
/// shorter ones. Consumes one draw only when cropping.
pub fn crop_or_pad(f: &FeatureMatrix, target: usize, rng: &mut Rng) -> FeatureMatrix {
    let (t_len, n_bins) = (f.n_frames(), f.n_bins());
    if t_len == target {
        return f.clone();
    }
    let start = if t_len > target { rng.index(t_len - target + 1) } else { 0 };
    let src = f.frames.data();
    let mut data = Vec::with_capacity(target * n_bins);
    for t in 0..target {
        let s = (start + t) % t_len;
        data.extend_from_slice(&src[s * n_bins..(s + 1) * n_bins]);
    }
    f.with_frames(Tensor::new(vec![target, n_bins], data).expect("sized above"))
}

/// Generative parameters of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpeakerProfile {
    pub speaker_id: String,
    /// Nonnegative, unit sum.
    pub spectral_template: Vec<f64>,
    pub modulation_rate: f64,
    pub jitter_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub n_bins: usize,
    /// Per-frame Gaussian noise std of every speaker.
    pub jitter_scale: f64,
    /// Relative depth of the sinusoidal modulation.
    pub modulation_depth: f64,
    /// Held-out utterances per speaker.
    pub test_per_speaker: usize,
    /// Target trials (and as many nontarget trials).
    pub trials_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 20,
            utts_per_speaker: 50,
            frames_per_utt: 200,
            n_bins: N_MELS,
            jitter_scale: 1.0,
            modulation_depth: 0.5,
            test_per_speaker: 10,
            trials_per_class: 200,
            seed: 0,
        }
    }
}

/// Frames per second at the standard hop.
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / HOP_SAMPLES as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub profiles: Vec<SynthSpeakerProfile>,
    pub train: Vec<FeatureMatrix>,
    pub test: Vec<FeatureMatrix>,
    /// Pairs drawn from the test split.
    pub trials: TrialList,
}

impl SynthCorpus {
    pub fn speakers(&self) -> Vec<String> {
        self.profiles.iter().map(|p| p.speaker_id.clone()).collect()
    }
}

pub fn speaker_name(index: usize) -> String {
    format!("spk{index:04}")
}

fn synth_utterance(profile: &SynthSpeakerProfile, cfg: &SynthConfig, utt_id: String, seed: u64) -> FeatureMatrix {
    let mut rng = Rng::for_label(seed, &utt_id, 1);
    let phase = rng.uniform_in(0.0, 2.0 * math::PI);
    let scale = cfg.n_bins as f64;
    let frames = Tensor::from_fn(&[cfg.frames_per_utt, cfg.n_bins], |i| {
        let (t, j) = (i / cfg.n_bins, i % cfg.n_bins);
        let m = 1.0
            + cfg.modulation_depth * math::sin(2.0 * math::PI * profile.modulation_rate * t as f64 / FRAME_RATE + phase);
        scale * profile.spectral_template[j] * m + profile.jitter_scale * rng.normal()
    });
    FeatureMatrix {
        frames,
        utterance_id: utt_id,
        speaker_id: profile.speaker_id.clone(),
    }
}

/// Deterministic corpus: per speaker, a random unit-sum template, a
/// modulation rate in [0.5, 4] Hz, and per-utterance phase and noise. The
/// last `test_per_speaker` utterances of each speaker form the test split;
/// trials pair test utterances, half same-speaker and half cross-speaker.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_speakers < 2 {
        return Err(Error::config("synthetic corpus needs at least 2 speakers"));
    }
    if cfg.frames_per_utt == 0 || cfg.n_bins == 0 {
        return Err(Error::config("synthetic utterances need frames and bins"));
    }
    if cfg.test_per_speaker > cfg.utts_per_speaker {
        return Err(Error::config("test_per_speaker exceeds utts_per_speaker"));
    }
    if cfg.jitter_scale < 0.0 {
        return Err(Error::config("jitter_scale must be nonnegative"));
    }
    let mut rng = Rng::for_label(cfg.seed, "synth-profiles", 0);
    let profiles: Vec<SynthSpeakerProfile> = (0..cfg.n_speakers)
        .map(|s| {
            let raw: Vec<f64> = (0..cfg.n_bins).map(|_| rng.uniform()).collect();
            let total: f64 = raw.iter().sum();
            SynthSpeakerProfile {
                speaker_id: speaker_name(s),
                spectral_template: raw.iter().map(|w| w / total).collect(),
                modulation_rate: rng.uniform_in(0.5, 4.0),
                jitter_scale: cfg.jitter_scale,
            }
        })
        .collect();
    let n_train = cfg.utts_per_speaker - cfg.test_per_speaker;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for p in &profiles {
        for u in 0..cfg.utts_per_speaker {
            let utt = synth_utterance(p, cfg, format!("{}-{u:04}", p.speaker_id), cfg.seed);
            if u < n_train {
                train.push(utt);
            } else {
                test.push(utt);
            }
        }
    }
    let trials = balanced_trials(&test, cfg.trials_per_class, &mut Rng::for_label(cfg.seed, "synth-trials", 0))?;
    Ok(SynthCorpus {
        profiles,
        train,
        test,
        trials,
    })
}

/// `per_class` target and `per_class` nontarget pairs of distinct
/// utterances, interleaved target-first.
pub fn balanced_trials(utts: &[FeatureMatrix], per_class: usize, rng: &mut Rng) -> Result<TrialList> {
    if per_class == 0 {
        return Ok(TrialList::default());
    }
    let has_target = utts
        .iter()
        .enumerate()
        .any(|(i, a)| utts[i + 1..].iter().any(|b| b.speaker_id == a.speaker_id));
    let has_nontarget = utts.iter().any(|u| u.speaker_id != utts[0].speaker_id);
    if !has_target || !has_nontarget {
        return Err(Error::config("trial generation needs repeated and distinct speakers"));
    }
    let mut trials = Vec::with_capacity(2 * per_class);
    let pick = |rng: &mut Rng, same: bool| loop {
        let (a, b) = (rng.index(utts.len()), rng.index(utts.len()));
        if a != b && (utts[a].speaker_id == utts[b].speaker_id) == same {
            return Trial {
                target: same,
                enroll: utts[a].utterance_id.clone(),
                test: utts[b].utterance_id.clone(),
            };
        }
    };
    for _ in 0..per_class {
        trials.push(pick(rng, true));
        trials.push(pick(rng, false));
    }
    Ok(TrialList { trials })
}
