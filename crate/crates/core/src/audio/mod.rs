//! Audio standardization: channel downmix, resampling, RMS loudness
//! measurement and normalization, and 16-bit WAV I/O.
//!
//! Samples are kept as real amplitudes in `[-1, 1]`; quantization to signed
//! 16-bit happens only when a buffer is written out.

mod resample;
pub mod wav;

pub use resample::{resample, resample_with, Resampler};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Output format of the standardization stage.
pub const STANDARD_SAMPLE_RATE_HZ: u32 = 16_000;
/// Loudness target of the standardization stage, RMS dBFS.
pub const DEFAULT_TARGET_DBFS: f64 = -20.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("silent input: RMS is zero, loudness is undefined")]
    SilentInput,
    #[error("empty buffer")]
    Empty,
    #[error("buffer of {len} samples is not divisible by {channels} channels")]
    ChannelMismatch { len: usize, channels: u16 },
    #[error("length mismatch: expected {expected} samples, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Interleaved PCM with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub channel_count: u16,
}

impl AudioBuffer {
    pub fn mono(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self { samples, sample_rate_hz, channel_count: 1 }
    }

    pub fn interleaved(samples: Vec<f64>, sample_rate_hz: u32, channel_count: u16) -> Result<Self, AudioError> {
        if channel_count == 0 || samples.len() % channel_count as usize != 0 {
            return Err(AudioError::ChannelMismatch { len: samples.len(), channels: channel_count });
        }
        Ok(Self { samples, sample_rate_hz, channel_count })
    }

    pub fn silence(duration_s: f64, sample_rate_hz: u32) -> Self {
        Self::mono(vec![0.0; seconds_to_samples(duration_s, sample_rate_hz)], sample_rate_hz)
    }

    /// Number of frames (samples per channel).
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channel_count.max(1) as usize
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.sample_rate_hz as f64
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Frame index nearest to time `t_s`, clamped to `[0, frames]`.
    pub fn index_at(&self, t_s: f64) -> usize {
        seconds_to_samples(t_s, self.sample_rate_hz).min(self.frames())
    }

    /// Copy of the mono frames covering `[start_s, end_s)`, clamped to the buffer.
    pub fn slice_s(&self, start_s: f64, end_s: f64) -> AudioBuffer {
        debug_assert_eq!(self.channel_count, 1);
        let a = self.index_at(start_s);
        let b = self.index_at(end_s).max(a);
        AudioBuffer::mono(self.samples[a..b].to_vec(), self.sample_rate_hz)
    }

    /// Snap every sample to the signed 16-bit grid, as a write/read cycle would.
    pub fn quantized(&self) -> AudioBuffer {
        AudioBuffer {
            samples: self.samples.iter().map(|&s| dequantize_i16(quantize_i16(s))).collect(),
            ..self.clone()
        }
    }

    pub fn to_i16(&self) -> Vec<i16> {
        self.samples.iter().map(|&s| quantize_i16(s)).collect()
    }

    pub fn from_i16(pcm: &[i16], sample_rate_hz: u32, channel_count: u16) -> Self {
        Self {
            samples: pcm.iter().map(|&s| dequantize_i16(s)).collect(),
            sample_rate_hz,
            channel_count,
        }
    }
}

pub fn seconds_to_samples(t_s: f64, sample_rate_hz: u32) -> usize {
    (t_s * sample_rate_hz as f64).round().max(0.0) as usize
}

/// Round half away from zero onto the signed 16-bit grid, saturating.
pub fn quantize_i16(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn dequantize_i16(sample: i16) -> f64 {
    sample as f64 / 32768.0
}

/// RMS loudness of a mono buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LoudnessReport {
    pub dbfs: f64,
    pub clipped_sample_count: usize,
}

/// Average the channels of an interleaved buffer.
pub fn to_mono(buf: &AudioBuffer) -> AudioBuffer {
    let channels = buf.channel_count.max(1) as usize;
    if channels == 1 {
        return buf.clone();
    }
    let samples = buf
        .samples
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioBuffer::mono(samples, buf.sample_rate_hz)
}

/// Root mean square with compensated summation, so a constant signal
/// measures as its own magnitude.
pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    // Neumaier summation.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in samples.iter().map(|s| s * s) {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    ((sum + comp) / samples.len() as f64).sqrt()
}

/// `20·log10(RMS)` with full scale at amplitude 1.0.
pub fn measure_dbfs(buf: &AudioBuffer) -> Result<LoudnessReport, AudioError> {
    if buf.samples.is_empty() {
        return Err(AudioError::Empty);
    }
    let level = rms(&buf.samples);
    if level == 0.0 {
        return Err(AudioError::SilentInput);
    }
    let clipped = buf.samples.iter().filter(|s| s.abs() > 1.0).count();
    Ok(LoudnessReport { dbfs: 20.0 * level.log10(), clipped_sample_count: clipped })
}

/// Apply the gain that brings RMS loudness to `target_dbfs`.
///
/// Samples pushed past full scale are hard-clipped to ±1 and counted in the
/// returned report; the report's `dbfs` is measured on the output.
pub fn normalize_loudness(buf: &AudioBuffer, target_dbfs: f64) -> Result<(AudioBuffer, LoudnessReport), AudioError> {
    measure_dbfs(buf)?;
    // Ratio of amplitudes rather than a difference of logs: exact for
    // levels that are exact in binary.
    let gain = 10f64.powf(target_dbfs / 20.0) / rms(&buf.samples);
    let mut clipped = 0usize;
    let samples = buf
        .samples
        .iter()
        .map(|&s| {
            let v = s * gain;
            if v.abs() > 1.0 {
                clipped += 1;
                v.signum()
            } else {
                v
            }
        })
        .collect();
    let out = AudioBuffer { samples, ..buf.clone() };
    let after = measure_dbfs(&out)?;
    Ok((out, LoudnessReport { dbfs: after.dbfs, clipped_sample_count: clipped }))
}

/// Summary of a full standardization pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub audio: AudioBuffer,
    pub original_sample_rate_hz: u32,
    pub original_channel_count: u16,
    pub input_dbfs: f64,
    pub report: LoudnessReport,
}

/// Downmix, resample to 16 kHz and normalize loudness.
pub fn standardize(buf: &AudioBuffer, target_dbfs: f64, resampler: &Resampler) -> Result<Standardized, AudioError> {
    let mono = to_mono(buf);
    let rate = resampler.resample(&mono, STANDARD_SAMPLE_RATE_HZ);
    let input = measure_dbfs(&rate)?;
    let (audio, report) = normalize_loudness(&rate, target_dbfs)?;
    Ok(Standardized {
        audio,
        original_sample_rate_hz: buf.sample_rate_hz,
        original_channel_count: buf.channel_count,
        input_dbfs: input.dbfs,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64, rate: u32, secs: f64) -> AudioBuffer {
        let n = (secs * rate as f64) as usize;
        AudioBuffer::mono(
            (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect(),
            rate,
        )
    }

    #[test]
    fn mono_downmix() {
        let m = AudioBuffer::mono(vec![0.1, -0.2, 0.3], 16000);
        assert_eq!(to_mono(&m), m);
        let anti = AudioBuffer::interleaved(vec![0.5, -0.5, -0.25, 0.25], 16000, 2).unwrap();
        assert!(to_mono(&anti).samples.iter().all(|&s| s == 0.0));
        let same = AudioBuffer::interleaved(vec![0.5, 0.5, -0.25, -0.25], 16000, 2).unwrap();
        assert_eq!(to_mono(&same).samples, vec![0.5, -0.25]);
        let once = to_mono(&same);
        assert_eq!(to_mono(&once), once);
    }

    #[test]
    fn interleaved_rejects_ragged() {
        assert!(AudioBuffer::interleaved(vec![0.0; 3], 16000, 2).is_err());
    }

    #[test]
    fn dbfs_examples() {
        let full = AudioBuffer::mono(vec![1.0; 100], 16000);
        assert_eq!(measure_dbfs(&full).unwrap().dbfs, 0.0);
        let tenth = AudioBuffer::mono(vec![0.1; 100], 16000);
        assert!((measure_dbfs(&tenth).unwrap().dbfs + 20.0).abs() < 1e-12);
        // RMS of a full-scale sine is 1/sqrt(2)
        let s = sine(100.0, 1.0, 16000, 1.0);
        let expected = 20.0 * (1.0 / 2f64.sqrt()).log10();
        assert!((measure_dbfs(&s).unwrap().dbfs - expected).abs() < 0.02);
        assert!((expected + 3.01).abs() < 0.01);
        assert!(matches!(measure_dbfs(&AudioBuffer::mono(vec![0.0; 10], 16000)), Err(AudioError::SilentInput)));
    }

    #[test]
    fn normalize_fixed_point_and_exact_gain() {
        let at_target = AudioBuffer::mono(vec![0.1; 1000], 16000);
        let (out, rep) = normalize_loudness(&at_target, -20.0).unwrap();
        assert_eq!(rep.clipped_sample_count, 0);
        for (a, b) in out.samples.iter().zip(&at_target.samples) {
            assert!((a - b).abs() < 1e-12);
        }
        let quiet = AudioBuffer::mono(vec![0.01; 1000], 16000);
        let (out, _) = normalize_loudness(&quiet, -20.0).unwrap();
        assert!(out.samples.iter().all(|&s| (s - 0.1).abs() < 1e-12));
        assert!(normalize_loudness(&AudioBuffer::mono(vec![0.0; 10], 16000), -20.0).is_err());
    }

    #[test]
    fn normalize_counts_clipping() {
        // 100 Hz at 16 kHz: whole periods, so sampled RMS equals A/sqrt(2).
        let amp = 0.9;
        let buf = sine(100.0, amp, 16000, 1.0);
        let target = -1.0;
        let analytic_dbfs = 20.0 * (amp / 2f64.sqrt()).log10();
        let gain = 10f64.powf((target - analytic_dbfs) / 20.0);
        let expected = (0..16000)
            .filter(|&i| (amp * gain * (2.0 * PI * 100.0 * i as f64 / 16000.0).sin()).abs() > 1.0)
            .count();
        let (_, rep) = normalize_loudness(&buf, target).unwrap();
        assert!(expected > 0);
        assert_eq!(rep.clipped_sample_count, expected);
    }

    #[test]
    fn quantize_rounds_half_away() {
        assert_eq!(quantize_i16(0.5 / 32768.0), 1);
        assert_eq!(quantize_i16(-0.5 / 32768.0), -1);
        assert_eq!(quantize_i16(1.0), 32767);
        assert_eq!(quantize_i16(-1.0), -32768);
        assert_eq!(quantize_i16(2.0), 32767);
    }

    proptest! {
        #[test]
        fn normalize_hits_target(amp in 0.001f64..0.3, freq in 50.0f64..2000.0, noise_seed in 0u64..1000) {
            let mut buf = sine(freq, amp, 16000, 0.5);
            for (i, s) in buf.samples.iter_mut().enumerate() {
                *s += amp * 0.1 * (((i as u64 * 2654435761 + noise_seed) % 1000) as f64 / 1000.0 - 0.5);
            }
            let (out, rep) = normalize_loudness(&buf, -20.0).unwrap();
            prop_assume!(rep.clipped_sample_count == 0);
            prop_assert!((measure_dbfs(&out).unwrap().dbfs + 20.0).abs() <= 0.1);
        }
    }
}
