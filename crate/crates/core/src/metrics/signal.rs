//! Separation quality and controlled two-speaker overlap mixtures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} vs {1}")]
    RateMismatch(u32, u32),
    #[error("reference is all zeros")]
    ZeroReference,
    #[error("overlap ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("source is empty")]
    EmptySource,
    #[error("source is silent over the overlap region")]
    SilentOverlap,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// A residual negligible against the projected target yields `+∞`.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64, SignalError> {
    if estimate.len() != reference.len() {
        return Err(SignalError::LengthMismatch(estimate.len(), reference.len()));
    }
    let ref_energy = energy(reference);
    if ref_energy == 0.0 {
        return Err(SignalError::ZeroReference);
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let target = alpha * alpha * ref_energy;
    let residual: f64 = estimate.iter().zip(reference).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    if target == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if residual <= target * 1e-20 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / residual).log10())
}

pub fn si_sdr_buffers(estimate: &AudioBuffer, reference: &AudioBuffer) -> Result<f64, SignalError> {
    si_sdr(&estimate.samples, &reference.samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub sir_db: f64,
    /// Overlap duration as a fraction of the shorter source.
    pub overlap_ratio: f64,
}

/// A mixture with exact ground truth. `s1` occupies `[t_start, t2)` and
/// `s2` occupies `[t1, t_end)`, with the overlap `[t1, t2)` when `s2`
/// outlasts `s1`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMixture {
    pub mixture: AudioBuffer,
    /// `s1` placed on the mixture timeline, zero elsewhere.
    pub source1: AudioBuffer,
    /// `s2` after gain, placed on the mixture timeline.
    pub source2: AudioBuffer,
    pub t_start_s: f64,
    pub t1_s: f64,
    pub t2_s: f64,
    pub t_end_s: f64,
    pub overlap_samples: usize,
    pub s2_gain: f64,
}

impl OverlapMixture {
    pub fn overlap_s(&self) -> f64 {
        self.overlap_samples as f64 / self.mixture.sample_rate_hz as f64
    }

    /// Measured 10·log10(P1/P2) over the overlap samples.
    pub fn achieved_sir_db(&self) -> f64 {
        let a = self.source2.index_at(self.t1_s);
        let b = a + self.overlap_samples;
        let p1 = energy(&self.source1.samples[a..b]);
        let p2 = energy(&self.source2.samples[a..b]);
        10.0 * (p1 / p2).log10()
    }
}

/// Overlap `s2` onto the tail of `s1`.
///
/// The overlap length is `round(ratio · min(len1, len2))` samples; `s2` is
/// scaled so the power ratio of `s1` to `s2` over the overlap equals
/// `sir_db`. `s1` is not rescaled.
pub fn synth_overlap_mixture(s1: &AudioBuffer, s2: &AudioBuffer, spec: MixtureSpec) -> Result<OverlapMixture, SignalError> {
    let ratio = spec.overlap_ratio;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(SignalError::RatioOutOfRange(ratio));
    }
    if s1.sample_rate_hz != s2.sample_rate_hz {
        return Err(SignalError::RateMismatch(s1.sample_rate_hz, s2.sample_rate_hz));
    }
    let (a, b) = (&s1.samples, &s2.samples);
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(SignalError::EmptySource);
    }
    let ov = ((ratio * n1.min(n2) as f64).round() as usize).max(1);
    let offset = n1 - ov;
    let total = n1.max(offset + n2);

    let p1 = energy(&a[offset..n1]);
    let p2 = energy(&b[..ov]);
    if p1 == 0.0 || p2 == 0.0 {
        return Err(SignalError::SilentOverlap);
    }
    let gain = (p1 / (p2 * 10f64.powf(spec.sir_db / 10.0))).sqrt();

    let sr = s1.sample_rate_hz;
    let mut placed1 = vec![0.0; total];
    placed1[..n1].copy_from_slice(a);
    let mut placed2 = vec![0.0; total];
    for (dst, src) in placed2[offset..offset + n2].iter_mut().zip(b) {
        *dst = gain * src;
    }
    let mixture: Vec<f64> = placed1.iter().zip(&placed2).map(|(x, y)| x + y).collect();
    let secs = |n: usize| n as f64 / sr as f64;
    Ok(OverlapMixture {
        mixture: AudioBuffer::mono(mixture, sr),
        source1: AudioBuffer::mono(placed1, sr),
        source2: AudioBuffer::mono(placed2, sr),
        t_start_s: 0.0,
        t1_s: secs(offset),
        t2_s: secs(n1),
        t_end_s: secs(total),
        overlap_samples: ov,
        s2_gain: gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, amp: f64, secs: f64, sr: u32) -> AudioBuffer {
        let n = (secs * sr as f64) as usize;
        AudioBuffer::mono((0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(), sr)
    }

    #[test]
    fn si_sdr_examples() {
        let r = tone(220.0, 0.5, 1.0, 16000).samples;
        assert_eq!(si_sdr(&r, &r).unwrap(), f64::INFINITY);
        let scaled: Vec<f64> = r.iter().map(|x| 0.3 * x).collect();
        assert_eq!(si_sdr(&scaled, &r).unwrap(), f64::INFINITY);
        // Orthogonal decomposition: a cosine at the same frequency over an
        // integer number of periods has zero inner product with the sine.
        let noise: Vec<f64> = (0..16000).map(|i| 0.5 * (2.0 * PI * 220.0 * i as f64 / 16000.0).cos()).collect();
        let est: Vec<f64> = r.iter().zip(&noise).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&est, &r).unwrap().abs() < 0.1);
        assert_eq!(si_sdr(&r, &[0.0; 16000]), Err(SignalError::ZeroReference));
        assert!(matches!(si_sdr(&r[..10], &r), Err(SignalError::LengthMismatch(..))));
    }

    #[test]
    fn mixture_examples() {
        let s1 = tone(200.0, 0.3, 10.0, 16000);
        let s2 = tone(310.0, 0.5, 10.0, 16000);
        let full = synth_overlap_mixture(&s1, &s2, MixtureSpec { sir_db: 0.0, overlap_ratio: 1.0 }).unwrap();
        assert_eq!(full.t1_s, full.t_start_s);
        assert_eq!(full.t2_s, full.t_end_s);
        assert!(full.achieved_sir_db().abs() < 0.1);

        let part = synth_overlap_mixture(&s1, &s2, MixtureSpec { sir_db: 5.0, overlap_ratio: 0.2 }).unwrap();
        assert!((part.overlap_s() - 2.0).abs() < 1e-9);
        assert!((part.t_end_s - 18.0).abs() < 1e-9);
        assert!((part.achieved_sir_db() - 5.0).abs() < 0.1);
        assert!(matches!(
            synth_overlap_mixture(&s1, &s2, MixtureSpec { sir_db: 0.0, overlap_ratio: 0.0 }),
            Err(SignalError::RatioOutOfRange(_))
        ));
        assert!(synth_overlap_mixture(&s1, &s2, MixtureSpec { sir_db: 0.0, overlap_ratio: 1.5 }).is_err());
    }

    proptest! {
        #[test]
        fn si_sdr_scale_invariant(a in 0.01f64..100.0, seed in 0u64..1000) {
            let r: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.013 + seed as f64).sin()).collect();
            let e: Vec<f64> = r.iter().enumerate().map(|(i, x)| x + 0.3 * ((i * 7919) as f64).cos()).collect();
            let scaled: Vec<f64> = e.iter().map(|x| a * x).collect();
            prop_assert!((si_sdr(&scaled, &r).unwrap() - si_sdr(&e, &r).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn mixture_hits_targets(sir in -5.0f64..15.0, ratio in 0.05f64..1.0, d1 in 1.0f64..4.0, d2 in 1.0f64..4.0) {
            let s1 = tone(180.0, 0.4, d1, 8000);
            let s2 = tone(275.0, 0.2, d2, 8000);
            let m = synth_overlap_mixture(&s1, &s2, MixtureSpec { sir_db: sir, overlap_ratio: ratio }).unwrap();
            let want = ratio * d1.min(d2);
            prop_assert!((m.overlap_s() - want).abs() <= 0.01 * want + 1.0 / 8000.0);
            prop_assert!((m.achieved_sir_db() - sir).abs() < 0.1);
        }
    }
}
