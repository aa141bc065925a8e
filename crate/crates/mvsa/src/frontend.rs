//! WAV decoding and log-mel feature extraction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use mvsa_core::features::{
    cmvn, frame_count, hann_window, FeatureMatrix, MelFilterbank, CMVN_WINDOW, HOP_SAMPLES, SAMPLE_RATE,
    WINDOW_SAMPLES,
};
use mvsa_core::numerics::Tensor;

use crate::error::{Error, Result};

/// Mono 16-bit PCM at 16 kHz, scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "need mono 16-bit PCM, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    if spec.sample_rate as usize != SAMPLE_RATE {
        return Err(Error::format(path, format!("need {SAMPLE_RATE} Hz, got {}", spec.sample_rate)));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(|e| wav_error(path, e)))
        .collect()
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Log-mel energies of magnitude spectra: Hann-windowed 1024-sample frames
/// every 256 samples, no edge padding. Returns `[T, n_mels]`.
pub fn mel_features(samples: &[f64], bank: &MelFilterbank) -> Result<Tensor> {
    let n_frames = frame_count(samples.len())?;
    let window = hann_window(WINDOW_SAMPLES);
    let fft = FftPlanner::new().plan_fft_forward(WINDOW_SAMPLES);
    let n_bins = WINDOW_SAMPLES / 2 + 1;
    let n_mels = bank.n_mels();
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW_SAMPLES];
    let mut magnitude = vec![0.0; n_bins];
    let mut out = Tensor::zeros(&[n_frames, n_mels]);
    for t in 0..n_frames {
        let frame = &samples[t * HOP_SAMPLES..t * HOP_SAMPLES + WINDOW_SAMPLES];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (m, b) in magnitude.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        bank.log_energies(&magnitude, &mut out.data_mut()[t * n_mels..(t + 1) * n_mels]);
    }
    Ok(out)
}

/// Log-mel features followed by sliding-window CMVN.
pub fn featurize(samples: &[f64], bank: &MelFilterbank, utterance_id: &str, speaker_id: &str) -> Result<FeatureMatrix> {
    let raw = FeatureMatrix::new(mel_features(samples, bank)?, utterance_id, speaker_id)?;
    Ok(cmvn(&raw, CMVN_WINDOW))
}

/// `root/<speaker>/<name>.wav`, grouped by speaker, both levels sorted.
pub fn find_wavs(root: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let list = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    let mut out = BTreeMap::new();
    for dir in list(root)?.into_iter().filter(|p| p.is_dir()) {
        let wavs: Vec<PathBuf> = list(&dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        if !wavs.is_empty() {
            let name = dir.file_name().expect("listed entry").to_string_lossy().into_owned();
            out.insert(name, wavs);
        }
    }
    if out.is_empty() {
        return Err(Error::format(root, "no <speaker>/<utterance>.wav files"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvsa_core::evaluation::argmax;

    fn write_sine(path: &Path, hz: f64, n: usize) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE as u32,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for i in 0..n {
            let s = 0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / SAMPLE_RATE as f64).sin();
            w.write_sample((s * 32767.0) as i16).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn sine_energy_peaks_in_the_nearest_filter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let bank = MelFilterbank::standard();
        for hz in [300.0, 1000.0, 4000.0] {
            write_sine(&path, hz, 16_000);
            let samples = read_wav(&path).unwrap();
            assert_eq!(samples.len(), 16_000);
            let feats = mel_features(&samples, &bank).unwrap();
            assert_eq!(feats.shape(), &[(16_000 - 1024) / 256 + 1, 80]);
            let nearest = bank
                .centers_hz
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - hz).abs().total_cmp(&(b.1 - hz).abs()))
                .unwrap()
                .0;
            let peak = argmax(feats.row(10));
            assert!(peak.abs_diff(nearest) <= 1, "{hz} Hz: peak {peak}, nearest {nearest}");
        }
    }

    #[test]
    fn short_or_wrong_format_audio_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_sine(&path, 440.0, 1000);
        let s = read_wav(&path).unwrap();
        assert!(matches!(
            mel_features(&s, &MelFilterbank::standard()),
            Err(Error::Core(mvsa_core::Error::InputTooShort { .. }))
        ));
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let stereo = dir.path().join("b.wav");
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(Error::Format { .. })));
        std::fs::write(dir.path().join("c.wav"), b"nope").unwrap();
        assert!(read_wav(&dir.path().join("c.wav")).is_err());
    }
}
