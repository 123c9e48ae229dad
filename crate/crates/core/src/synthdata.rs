//! Deterministic synthetic songs with band-separated sources.
//!
//! - drums: decaying noise bursts high-passed above 5 kHz, on a beat grid
//! - bass: sine notes between 40 and 120 Hz
//! - vocals: sine notes between 200 and 800 Hz with 5 Hz vibrato
//! - other: a noise pad band-limited to 1.5–4 kHz with a slow swell

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::curation::SongStems;
use crate::dsp::{save_audio, AudioClip};
use crate::error::{Error, Result};
use crate::unet::DEFAULT_SOURCES;

/// Frequency bands each recipe occupies, in Hz.
pub const DRUMS_BAND: (f64, f64) = (5000.0, 10_000.0);
pub const BASS_BAND: (f64, f64) = (40.0, 120.0);
pub const VOCALS_BAND: (f64, f64) = (200.0, 800.0);
pub const OTHER_BAND: (f64, f64) = (1500.0, 4000.0);

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Per-source gains in the order drums, bass, other, vocals.
    pub gains: [f32; 4],
}

impl SynthSpec {
    pub fn new(seed: u64, duration_s: f64) -> Self {
        Self { seed, duration_s, sample_rate: 44_100, gains: [0.3, 0.4, 0.15, 0.3] }
    }
}

/// Four stereo stems in the default source order.
pub fn generate_song(spec: &SynthSpec) -> Result<SongStems> {
    if !(spec.duration_s >= 2.0) {
        return Err(Error::Contract(format!("synthetic songs need at least 2 s, got {}", spec.duration_s)));
    }
    let rate = spec.sample_rate as f64;
    if rate < 2.0 * DRUMS_BAND.0 {
        return Err(Error::Config(format!("sample rate {} cannot hold the drum band", spec.sample_rate)));
    }
    let n = (spec.duration_s * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mono = [drums(&mut rng, n, rate), bass(&mut rng, n, rate), other(&mut rng, n, rate), vocals(&mut rng, n, rate)];
    let stems = mono
        .into_iter()
        .zip(spec.gains)
        .map(|(signal, gain)| {
            let pan: f32 = rng.gen_range(0.25..0.75);
            let left = signal.iter().map(|&v| (v * gain as f64 * (1.0 - pan as f64).sqrt()) as f32).collect();
            let right = signal.iter().map(|&v| (v * gain as f64 * (pan as f64).sqrt()) as f32).collect();
            AudioClip::from_channels(vec![left, right], spec.sample_rate)
        })
        .collect::<Result<Vec<_>>>()?;
    SongStems::new(format!("synth-{:04}", spec.seed), DEFAULT_SOURCES.iter().map(|s| s.to_string()).collect(), stems)
}

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Zeroes every FFT bin outside `[lo, hi]` Hz and rescales to unit RMS.
fn band_limit(x: &[f64], rate: f64, (lo, hi): (f64, f64)) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re / n as f64).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    out.into_iter().map(|v| v / rms).collect()
}

fn drums(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let noise = band_limit(&white(rng, n), rate, DRUMS_BAND);
    let beat = rng.gen_range(0.25..0.4) * rate;
    let decay = 0.03 * rate;
    (0..n).map(|i| noise[i] * (-((i as f64) % beat) / decay).exp()).collect()
}

fn notes(rng: &mut ChaCha8Rng, n: usize, rate: f64, (lo, hi): (f64, f64), note_s: f64) -> Vec<f64> {
    let len = (note_s * rate) as usize;
    let count = n.div_ceil(len);
    let pitches: Vec<f64> = (0..count).map(|_| lo * (hi / lo).powf(rng.gen_range(0.05..0.95))).collect();
    (0..n).map(|i| pitches[i / len]).collect()
}

/// Phase-continuous oscillator over a per-sample frequency track.
fn oscillate(freq: impl Iterator<Item = f64>, rate: f64) -> Vec<f64> {
    let mut phase = 0.0;
    freq.map(|f| {
        phase = (phase + 2.0 * PI * f / rate) % (2.0 * PI);
        phase.sin()
    })
    .collect()
}

fn bass(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let track = notes(rng, n, rate, BASS_BAND, 0.5);
    oscillate(track.into_iter(), rate)
}

fn vocals(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let track = notes(rng, n, rate, (VOCALS_BAND.0 * 1.04, VOCALS_BAND.1 / 1.04), 0.4);
    let vibrato = |i: usize| 1.0 + 0.03 * (2.0 * PI * 5.0 * i as f64 / rate).sin();
    oscillate(track.into_iter().enumerate().map(|(i, f)| f * vibrato(i)), rate)
}

fn other(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let pad = band_limit(&white(rng, n), rate, OTHER_BAND);
    let period = rng.gen_range(2.0..4.0) * rate;
    (0..n).map(|i| pad[i] * (0.75 + 0.25 * (2.0 * PI * i as f64 / period).sin())).collect()
}

/// Writes `<root>/<song_id>/<source>.wav` for each stem and
/// `<root>/<song_id>/mixture.wav`.
pub fn write_song(song: &SongStems, root: impl AsRef<Path>) -> Result<()> {
    let dir = root.as_ref().join(&song.song_id);
    std::fs::create_dir_all(&dir)?;
    for (source, clip) in song.sources.iter().zip(&song.stems) {
        save_audio(clip, dir.join(format!("{source}.wav")))?;
    }
    save_audio(&song.mixture()?, dir.join("mixture.wav"))
}
