//! RIFF/WAVE reading and writing.
//!
//! Integer PCM is scaled by `1 / 2^(bits-1)`, so 16-bit `16384` reads as
//! exactly `0.5` and the range is `[-1, 1)`. Writing integer PCM rounds to
//! nearest and clamps to the representable range. 32-bit float round-trips
//! bit-exactly.

use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

use super::AudioClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Pcm24,
    Float32,
}

impl SampleFormat {
    fn spec(self) -> (u16, HoundFormat) {
        match self {
            SampleFormat::Pcm16 => (16, HoundFormat::Int),
            SampleFormat::Pcm24 => (24, HoundFormat::Int),
            SampleFormat::Float32 => (32, HoundFormat::Float),
        }
    }
}

pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioClip> {
    let reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::Format(format!("{channels}-channel WAV; only mono and stereo are supported")));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Float, 32) => reader.into_samples::<f32>().collect::<Result<_, _>>()?,
        (HoundFormat::Int, bits @ (16 | 24)) => {
            let scale = 1.0 / (1u32 << (bits - 1)) as f32;
            reader.into_samples::<i32>().map(|s| s.map(|v| v as f32 * scale)).collect::<Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::Format(format!("{bits}-bit {fmt:?} samples are not supported")));
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "sample data ends mid-frame")));
    }
    let frames = interleaved.len() / channels;
    let mut planar = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            planar[c].push(v);
        }
    }
    AudioClip::from_channels(planar, spec.sample_rate)
}

/// Writes 32-bit float samples.
pub fn save_audio(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    save_audio_as(clip, path, SampleFormat::Float32)
}

pub fn save_audio_as(clip: &AudioClip, path: impl AsRef<Path>, format: SampleFormat) -> Result<()> {
    let (bits, sample_format) = format.spec();
    let spec = WavSpec {
        channels: clip.channels() as u16,
        sample_rate: clip.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    let full = (1i64 << (bits - 1)) as f64;
    for i in 0..clip.frames() {
        for c in 0..clip.channels() {
            let v = clip.channel(c)[i];
            match format {
                SampleFormat::Float32 => writer.write_sample(v)?,
                _ => {
                    let q = (v as f64 * full).round().clamp(-full, full - 1.0) as i32;
                    writer.write_sample(q)?
                }
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
