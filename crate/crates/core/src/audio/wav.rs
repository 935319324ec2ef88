//! RIFF WAV reading (any PCM/float layout hound understands) and writing
//! as little-endian signed 16-bit PCM.

use std::io::{Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{dequantize_i16, quantize_i16, AudioBuffer, AudioError};

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let reader = WavReader::open(path)?;
    decode(reader)
}

pub fn read_wav_from<R: Read>(reader: R) -> Result<AudioBuffer, AudioError> {
    decode(WavReader::new(reader)?)
}

fn decode<R: Read>(reader: WavReader<R>) -> Result<AudioBuffer, AudioError> {
    let spec = reader.spec();
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(dequantize_i16))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Int, bits @ (8 | 24 | 32)) => {
            let full = (1i64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full))
                .collect::<Result<_, _>>()?
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => return Err(AudioError::UnsupportedFormat(format!("{fmt:?} {bits}-bit"))),
    };
    AudioBuffer::interleaved(samples, spec.sample_rate, spec.channels)
}

fn spec_for(buf: &AudioBuffer) -> WavSpec {
    WavSpec {
        channels: buf.channel_count,
        sample_rate: buf.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

/// Write 16-bit PCM to `writer`.
pub fn write_wav_to<W: Write + Seek>(buf: &AudioBuffer, writer: W) -> Result<(), AudioError> {
    let mut w = WavWriter::new(writer, spec_for(buf))?;
    for &s in &buf.samples {
        w.write_sample(quantize_i16(s))?;
    }
    w.finalize()?;
    Ok(())
}

/// Write 16-bit PCM to `path` via a sibling temp file and rename.
pub fn write_wav(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("wav.tmp");
    {
        let file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_wav_to(buf, file)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Interleave two equal-length mono buffers into one stereo buffer.
pub fn interleave_stereo(left: &AudioBuffer, right: &AudioBuffer) -> Result<AudioBuffer, AudioError> {
    if left.samples.len() != right.samples.len() {
        return Err(AudioError::LengthMismatch { expected: left.samples.len(), actual: right.samples.len() });
    }
    let samples = left.samples.iter().zip(&right.samples).flat_map(|(&l, &r)| [l, r]).collect();
    AudioBuffer::interleaved(samples, left.sample_rate_hz, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn grid_values_survive_write_read() {
        let buf = AudioBuffer::mono(vec![0.0, 0.5, -0.5, 1.0 - 1.0 / 32768.0, -1.0, 3.0 / 32768.0], 16000);
        let mut bytes = Cursor::new(Vec::new());
        write_wav_to(&buf, &mut bytes).unwrap();
        let back = read_wav_from(Cursor::new(bytes.into_inner())).unwrap();
        assert_eq!(back, buf);
    }

    #[test]
    fn stereo_layout() {
        let l = AudioBuffer::mono(vec![0.25, 0.5], 16000);
        let r = AudioBuffer::mono(vec![-0.25, -0.5], 16000);
        let st = interleave_stereo(&l, &r).unwrap();
        assert_eq!(st.samples, vec![0.25, -0.25, 0.5, -0.5]);
        let mut bytes = Cursor::new(Vec::new());
        write_wav_to(&st, &mut bytes).unwrap();
        let back = read_wav_from(Cursor::new(bytes.into_inner())).unwrap();
        assert_eq!(back.channel_count, 2);
        assert_eq!(back.frames(), 2);
    }
}
