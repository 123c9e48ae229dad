//! Waveform containers, WAV I/O, STFT/iSTFT and segment loudness.

mod stft;
mod volume;
mod wav;

pub use stft::{istft, istft_tensor, stft, stft_tensor, Spectrogram};
pub use volume::{segment_powers, volume_db, POWER_FLOOR};
pub use wav::{load_audio, save_audio, save_audio_as, SampleFormat};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;
/// Spectral frame size used by the model at 44.1 kHz.
pub const DEFAULT_N_FFT: usize = 4096;
pub const DEFAULT_HOP: usize = DEFAULT_N_FFT / 4;

/// A 1- or 2-channel waveform, `samples` shaped `[channels, frames]`.
#[derive(Debug, Clone)]
pub struct AudioClip {
    samples: Tensor,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Tensor, sample_rate: u32) -> Result<Self> {
        let &[channels, _] = samples.shape() else {
            return Err(Error::Dimension(format!("audio must be [channels, frames], got {:?}", samples.shape())));
        };
        if !(1..=2).contains(&channels) {
            return Err(Error::Format(format!("{channels} channels; only mono and stereo are supported")));
        }
        if sample_rate == 0 {
            return Err(Error::Format("sample rate must be positive".into()));
        }
        if samples.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Builds a clip from per-channel sample vectors of equal length.
    pub fn from_channels(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        let frames = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != frames) {
            return Err(Error::Dimension("channels differ in length".into()));
        }
        let n = channels.len();
        let data: Vec<f32> = channels.into_iter().flatten().collect();
        Self::new(Tensor::new(&[n, frames], data)?, sample_rate)
    }

    pub fn silence(channels: usize, frames: usize, sample_rate: u32) -> Result<Self> {
        Self::new(Tensor::zeros(&[channels, frames]), sample_rate)
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn into_samples(self) -> Tensor {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.frames();
        &self.samples.data()[c * n..(c + 1) * n]
    }

    /// `len` frames starting at `start`, detached from any tape.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let s = numerics::no_grad(|| numerics::narrow(&self.samples, 1, start, len))?;
        Self::new(s, self.sample_rate)
    }

    pub fn scaled(&self, gain: f32) -> Result<Self> {
        let data = self.samples.data().iter().map(|v| v * gain).collect();
        Self::new(Tensor::new(self.samples.shape(), data)?, self.sample_rate)
    }

    /// Sample-wise sum of two clips with identical geometry.
    pub fn mix(&self, other: &AudioClip) -> Result<Self> {
        if self.sample_rate != other.sample_rate || self.samples.shape() != other.samples.shape() {
            return Err(Error::Dimension("clips differ in rate or shape".into()));
        }
        let data = self.samples.data().iter().zip(other.samples.data()).map(|(a, b)| a + b).collect();
        Self::new(Tensor::new(self.samples.shape(), data)?, self.sample_rate)
    }
}
