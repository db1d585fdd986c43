//! Mono WAV I/O at a fixed sample rate.
//!
//! Corpora are 16-bit PCM. Attack databases default to 32-bit float so that
//! `x' - x` survives the round trip exactly.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{invalid, Error, Result};
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a mono WAV, rejecting any rate other than `expected_rate`.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Waveform> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(invalid(format!("{}: expected mono, found {} channels", path.as_ref().display(), spec.channels)));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::SampleRate { expected: expected_rate, found: spec.sample_rate });
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => return Err(invalid(format!("unsupported WAV encoding {fmt:?}/{bits} bits"))),
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in w.samples() {
                writer.write_sample(quantize_pcm16(s))?;
            }
        }
        WavEncoding::Float32 => {
            for &s in w.samples() {
                writer.write_sample(s)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

/// The 16-bit code for a sample; `code / 32768` is what a reader sees.
pub fn quantize_pcm16(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Snaps samples onto the 16-bit grid, as a PCM16 write/read would.
pub fn quantized(w: &Waveform) -> Waveform {
    w.with_samples(w.iter().map(|&s| quantize_pcm16(s) as f32 / 32768.0).collect())
        .expect("quantized samples are finite")
}
