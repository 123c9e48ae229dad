mod common;

use std::f64::consts::PI;

use common::{fd_check, randn, randp, rng};
use htdemucs::dsp::{self, AudioClip, SampleFormat};
use htdemucs::numerics::Tensor;
use htdemucs::Error;

fn random_clip(seed: u64, channels: usize, frames: usize, rate: u32) -> AudioClip {
    let mut r = rng(seed);
    AudioClip::new(randn(&mut r, &[channels, frames]), rate).unwrap()
}

#[test]
fn round_trip_interior_on_long_signals() {
    for (seed, secs) in [(1u64, 1.0f64), (2, 3.7), (3, 12.0)] {
        let frames = (secs * 44_100.0) as usize;
        let clip = random_clip(seed, 2, frames, 44_100);
        let spec = dsp::stft(&clip, dsp::DEFAULT_N_FFT, dsp::DEFAULT_HOP).unwrap();
        let back = dsp::istft(&spec, frames, 44_100).unwrap();
        let edge = dsp::DEFAULT_N_FFT / 2;
        let mut worst = 0.0f32;
        for c in 0..2 {
            for i in edge..frames - edge {
                worst = worst.max((clip.channel(c)[i] - back.channel(c)[i]).abs());
            }
        }
        assert!(worst < 1e-4, "{secs} s: {worst}");
    }
}

#[test]
fn sine_energy_concentrates_near_its_bin() {
    let (rate, n_fft, hop, b) = (44_100usize, 4096usize, 1024usize, 93usize);
    let f = b as f64 * rate as f64 / n_fft as f64;
    let x: Vec<f32> = (0..rate).map(|i| (2.0 * PI * f * i as f64 / rate as f64).sin() as f32).collect();
    let clip = AudioClip::from_channels(vec![x.clone()], rate as u32).unwrap();
    let spec = dsp::stft(&clip, n_fft, hop).unwrap();
    let (bins, frames) = (spec.bins(), spec.frames());
    let (re, im) = (spec.real.data(), spec.imag.data());

    // An interior frame checked against a direct f64 DFT of the windowed samples.
    let t = 20;
    let start = t * hop - n_fft / 2;
    for k in [b - 1, b, b + 1, b + 40] {
        let (mut sr, mut si) = (0.0f64, 0.0f64);
        for n in 0..n_fft {
            let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / n_fft as f64).cos();
            let v = w * x[start + n] as f64;
            let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
            sr += v * ang.cos();
            si += v * ang.sin();
        }
        let norm = (n_fft as f64).sqrt();
        assert!((re[k * frames + t] as f64 - sr / norm).abs() < 1e-3);
        assert!((im[k * frames + t] as f64 - si / norm).abs() < 1e-3);
    }

    let energy = |k: usize| -> f64 {
        (0..frames).map(|t| (re[k * frames + t] as f64).powi(2) + (im[k * frames + t] as f64).powi(2)).sum()
    };
    let total: f64 = (0..bins).map(energy).sum();
    let near = energy(b - 1) + energy(b) + energy(b + 1);
    assert!(near / total >= 0.95, "{}", near / total);
}

#[test]
fn stft_is_linear() {
    let a = random_clip(4, 2, 9000, 8000);
    let b = random_clip(5, 2, 9000, 8000);
    let sa = dsp::stft(&a, 1024, 256).unwrap();
    let sb = dsp::stft(&b, 1024, 256).unwrap();
    let sab = dsp::stft(&a.mix(&b).unwrap(), 1024, 256).unwrap();
    for (plane_ab, (pa, pb)) in [(&sab.real, (&sa.real, &sb.real)), (&sab.imag, (&sa.imag, &sb.imag))] {
        for ((x, y), z) in pa.data().iter().zip(pb.data()).zip(plane_ab.data()) {
            assert!((x + y - z).abs() < 1e-5);
        }
    }
}

#[test]
fn zero_signal_gives_zero_spectrogram() {
    let spec = dsp::stft(&AudioClip::silence(2, 5000, 8000).unwrap(), 512, 128).unwrap();
    assert_eq!(spec.bins(), 257);
    assert_eq!(spec.frames(), 5000usize.div_ceil(128));
    assert!(spec.real.data().iter().chain(spec.imag.data()).all(|&v| v == 0.0));
}

#[test]
fn stft_and_istft_gradients() {
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let x = randp(&mut r, &[2, 40]);
        let worst = fd_check(|t| dsp::stft_tensor(&t[0], 16, 4).unwrap(), &[x], seed, 1e-3);
        assert!(worst < 1e-2, "stft seed {seed}: {worst}");

        let re = randp(&mut r, &[1, 9, 10]);
        let im = randp(&mut r, &[1, 9, 10]);
        let worst = fd_check(|t| dsp::istft_tensor(&t[0], &t[1], 16, 4, 37).unwrap(), &[re, im], seed, 1e-3);
        assert!(worst < 1e-2, "istft seed {seed}: {worst}");
    }
}

#[test]
fn volume_tracks_gain() {
    let clip = random_clip(6, 2, 3 * 8000 + 17, 8000);
    let base = dsp::volume_db(&clip).unwrap();
    for alpha in [0.1f32, 0.5, 2.0] {
        let v = dsp::volume_db(&clip.scaled(alpha).unwrap()).unwrap();
        let shift = 20.0 * (alpha as f64).log10();
        for (a, b) in base.iter().zip(&v) {
            assert!((b - a - shift).abs() < 1e-6, "alpha {alpha}: {}", b - a - shift);
        }
    }
}

#[test]
fn float_wav_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let clip = random_clip(7, 2, 3001, 44_100);
    dsp::save_audio(&clip, &path).unwrap();
    let back = dsp::load_audio(&path).unwrap();
    assert_eq!(back.sample_rate(), 44_100);
    assert_eq!(back.samples().shape(), clip.samples().shape());
    for (a, b) in clip.samples().data().iter().zip(back.samples().data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

fn wav_bytes(bits: u16, format_tag: u16, channels: u16, data: &[u8]) -> Vec<u8> {
    let rate = 8000u32;
    let block = channels * bits / 8;
    let mut out = Vec::new();
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format_tag.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
    out
}

#[test]
fn pcm16_half_scale() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.wav");
    let mut data = Vec::new();
    for v in [16384i16, -32768, 0] {
        data.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, wav_bytes(16, 1, 1, &data)).unwrap();
    let clip = dsp::load_audio(&path).unwrap();
    assert_eq!(clip.channel(0), &[0.5, -1.0, 0.0]);
}

#[test]
fn pcm24_ramp_matches_byte_decoding() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.wav");
    let values: Vec<i32> = (0..64).map(|i| -8_388_608 + i * 262_143).collect();
    let mut data = Vec::new();
    for v in &values {
        data.extend_from_slice(&v.to_le_bytes()[..3]);
    }
    std::fs::write(&path, wav_bytes(24, 1, 1, &data)).unwrap();
    let clip = dsp::load_audio(&path).unwrap();
    let got = clip.channel(0);
    for (i, chunk) in data.chunks_exact(3).enumerate() {
        let raw = (chunk[0] as i32) | ((chunk[1] as i32) << 8) | ((chunk[2] as i8 as i32) << 16);
        assert_eq!(got[i], raw as f32 / 8_388_608.0);
        if i > 0 {
            assert!(got[i] > got[i - 1]);
        }
    }
}

#[test]
fn pcm_writer_rounds_and_clamps() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.wav");
    let clip = AudioClip::from_channels(vec![vec![0.5, 1.0, -1.0, 0.25]], 8000).unwrap();
    dsp::save_audio_as(&clip, &path, SampleFormat::Pcm16).unwrap();
    let back = dsp::load_audio(&path).unwrap();
    assert_eq!(back.channel(0), &[0.5, 32767.0 / 32768.0, -1.0, 0.25]);
}

#[test]
fn unsupported_codec_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u8.wav");
    std::fs::write(&path, wav_bytes(8, 1, 1, &[128, 129, 130, 131])).unwrap();
    assert!(matches!(dsp::load_audio(&path), Err(Error::Format(_))));
}

#[test]
fn truncated_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.wav");
    let clip = random_clip(8, 2, 100, 8000);
    dsp::save_audio(&clip, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 13]).unwrap();
    assert!(matches!(dsp::load_audio(&path), Err(Error::Io(_))));
    std::fs::write(&path, &bytes[..20]).unwrap();
    assert!(matches!(dsp::load_audio(&path), Err(Error::Io(_))));
}

#[test]
fn clip_invariants() {
    assert!(matches!(AudioClip::new(Tensor::zeros(&[3, 10]), 8000), Err(Error::Format(_))));
    assert!(matches!(AudioClip::new(Tensor::zeros(&[1, 10]), 0), Err(Error::Format(_))));
    let c = AudioClip::silence(2, 8000, 8000).unwrap();
    assert_eq!(c.duration_secs(), 1.0);
}
