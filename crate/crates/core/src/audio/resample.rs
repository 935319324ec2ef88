//! Polyphase windowed-sinc sample-rate conversion.

use std::f64::consts::PI;

use super::AudioBuffer;

/// Kaiser-windowed sinc resampler for rational rate ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resampler {
    /// Zero crossings of the prototype sinc on each side of the center, at
    /// the narrower of the two rates.
    pub half_width: usize,
    /// Passband edge as a fraction of the output Nyquist frequency.
    pub rolloff: f64,
    pub kaiser_beta: f64,
}

impl Default for Resampler {
    fn default() -> Self {
        Self { half_width: 24, rolloff: 0.945, kaiser_beta: 8.6 }
    }
}

pub fn resample(buf: &AudioBuffer, target_hz: u32) -> AudioBuffer {
    Resampler::default().resample(buf, target_hz)
}

pub fn resample_with(buf: &AudioBuffer, target_hz: u32, half_width: usize) -> AudioBuffer {
    Resampler { half_width, ..Resampler::default() }.resample(buf, target_hz)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// One polyphase branch: taps applied to input samples `base + offset .. `.
struct Phase {
    offset: isize,
    taps: Vec<f64>,
}

impl Resampler {
    /// Convert a mono buffer to `target_hz`. Equal rates return an exact copy.
    pub fn resample(&self, buf: &AudioBuffer, target_hz: u32) -> AudioBuffer {
        assert!(target_hz > 0, "target rate must be positive");
        debug_assert_eq!(buf.channel_count, 1, "resample expects mono input");
        let src_hz = buf.sample_rate_hz;
        if src_hz == target_hz || buf.samples.is_empty() {
            return AudioBuffer::mono(buf.samples.clone(), target_hz);
        }
        let g = gcd(src_hz as u64, target_hz as u64);
        let up = target_hz as u64 / g;
        let down = src_hz as u64 / g;
        let n_in = buf.samples.len() as u64;
        let n_out = (n_in * up).div_ceil(down) as usize;

        // Cutoff in cycles per input sample.
        let scale = (target_hz as f64 / src_hz as f64).min(1.0);
        let cutoff = 0.5 * scale * self.rolloff;
        let reach = self.half_width as f64 / scale;
        let width = reach.ceil() as isize;

        let make_phase = |p: u64| -> Phase {
            let frac = p as f64 / up as f64;
            let offset = -width + 1;
            let mut taps: Vec<f64> = (0..(2 * width) as usize)
                .map(|k| {
                    let t = (offset + k as isize) as f64 - frac;
                    if t.abs() >= reach {
                        return 0.0;
                    }
                    let w = bessel_i0(self.kaiser_beta * (1.0 - (t / reach).powi(2)).max(0.0).sqrt())
                        / bessel_i0(self.kaiser_beta);
                    2.0 * cutoff * sinc(2.0 * cutoff * t) * w
                })
                .collect();
            let sum: f64 = taps.iter().sum();
            if sum != 0.0 {
                taps.iter_mut().for_each(|t| *t /= sum);
            }
            Phase { offset, taps }
        };

        let table: Option<Vec<Phase>> = (up <= 4096).then(|| (0..up).map(make_phase).collect());
        let input = &buf.samples;
        let mut out = Vec::with_capacity(n_out);
        for n in 0..n_out as u64 {
            let pos = n * down;
            let base = (pos / up) as isize;
            let p = pos % up;
            let owned;
            let phase = match &table {
                Some(t) => &t[p as usize],
                None => {
                    owned = make_phase(p);
                    &owned
                }
            };
            let mut acc = 0.0;
            for (k, tap) in phase.taps.iter().enumerate() {
                let idx = base + phase.offset + k as isize;
                if idx >= 0 && (idx as usize) < input.len() {
                    acc += tap * input[idx as usize];
                }
            }
            out.push(acc);
        }
        AudioBuffer::mono(out, target_hz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn sine(freq: f64, rate: u32, secs: f64) -> AudioBuffer {
        let n = (secs * rate as f64) as usize;
        AudioBuffer::mono((0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect(), rate)
    }

    #[test]
    fn identity_rate_is_exact() {
        let s = sine(440.0, 16000, 0.1);
        assert_eq!(resample(&s, 16000), s);
    }

    #[test]
    fn dc_is_preserved() {
        let dc = AudioBuffer::mono(vec![0.5; 48000], 48000);
        let out = resample(&dc, 16000);
        assert_eq!(out.sample_rate_hz, 16000);
        assert_eq!(out.samples.len(), 16000);
        let edge = 200;
        for &s in &out.samples[edge..out.samples.len() - edge] {
            assert!((s - 0.5).abs() < 1e-3, "{s}");
        }
    }

    #[test]
    fn duration_preserved_for_odd_ratios() {
        for (src, dst, n) in [(44100u32, 16000u32, 44100usize), (22050, 16000, 1001), (8000, 16000, 777), (48000, 16000, 4)] {
            let buf = AudioBuffer::mono(vec![0.1; n], src);
            let out = resample(&buf, dst);
            assert!((out.duration_s() - buf.duration_s()).abs() <= 1.0 / dst as f64 + 1e-12);
        }
    }

    #[test]
    fn sine_peak_bin_survives_decimation() {
        let s = sine(440.0, 48000, 1.0);
        let out = resample(&s, 16000);
        let n = out.samples.len();
        let mut spectrum: Vec<Complex<f64>> = out.samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut spectrum);
        let peak = (1..n / 2)
            .max_by(|&a, &b| spectrum[a].norm().partial_cmp(&spectrum[b].norm()).unwrap())
            .unwrap();
        let bin_hz = 16000.0 / n as f64;
        assert!((peak as f64 * bin_hz - 440.0).abs() <= bin_hz);
    }

    #[test]
    fn aliasing_content_is_suppressed() {
        // 7.9 kHz would alias to 100 Hz at 8 kHz output; it sits above the
        // 8 kHz output's passband and should come out attenuated.
        let s = sine(7900.0, 16000, 0.5);
        let out = resample(&s, 8000);
        let inner = &out.samples[200..out.samples.len() - 200];
        let level = super::super::rms(inner);
        assert!(level < 0.01, "alias level {level}");
    }

    #[test]
    fn up_down_round_trip_correlates() {
        let rate = 16000;
        let n = 16000;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                0.3 * (2.0 * PI * 220.0 * t).sin() + 0.2 * (2.0 * PI * 1330.0 * t).sin() + 0.1 * (2.0 * PI * 3100.0 * t).cos()
            })
            .collect();
        let buf = AudioBuffer::mono(x.clone(), rate);
        let back = resample(&resample(&buf, 2 * rate), rate);
        assert_eq!(back.samples.len(), n);
        let r = 400..n - 400;
        let (a, b) = (&x[r.clone()], &back.samples[r]);
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|q| q * q).sum::<f64>().sqrt();
        assert!(dot / (na * nb) >= 0.99);
    }
}
