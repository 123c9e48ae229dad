//! Hann-windowed STFT with reflect padding, and its overlap-add inverse.
//!
//! Frame `t` is centred on sample `t·hop`; a signal of `L` samples yields
//! `ceil(L / hop)` frames. Spectra are scaled by `1/sqrt(n_fft)`. Both
//! directions are differentiable tape operations.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{self, pad_source, PadMode, Tensor};

use super::AudioClip;

/// Complex spectrogram stored as real/imaginary planes `[channels, bins, frames]`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub real: Tensor,
    pub imag: Tensor,
    pub n_fft: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn channels(&self) -> usize {
        self.real.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.real.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.real.shape()[2]
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n_fft: usize,
    frames: usize,
    /// Padded signal length.
    padded: usize,
}

impl Geometry {
    fn left(&self) -> usize {
        self.n_fft / 2
    }

    fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

fn check_params(n_fft: usize, hop: usize) -> Result<()> {
    if !n_fft.is_power_of_two() || n_fft < 4 {
        return dim_err(format!("n_fft {n_fft} must be a power of two ≥ 4"));
    }
    if hop == 0 || !n_fft.is_multiple_of(hop) || hop > n_fft / 2 {
        return dim_err(format!("hop {hop} must divide n_fft {n_fft} and be at most n_fft/2"));
    }
    Ok(())
}

fn frames_geometry(frames: usize, n_fft: usize, hop: usize) -> Geometry {
    Geometry { n_fft, frames, padded: (frames - 1) * hop + n_fft }
}

fn hann(n: usize) -> Vec<f32> {
    (0..n).map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()) as f32).collect()
}

fn plans(n: usize) -> (Arc<dyn Fft<f32>>, Arc<dyn Fft<f32>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

/// Forward transform of `x[C, L]`, returning `[2, C, bins, frames]` with
/// the real plane first.
pub fn stft_tensor(x: &Tensor, n_fft: usize, hop: usize) -> Result<Tensor> {
    check_params(n_fft, hop)?;
    let &[channels, len] = x.shape() else {
        return dim_err(format!("stft input must be [channels, frames], got {:?}", x.shape()));
    };
    if len < n_fft {
        return Err(Error::Length(format!("{len} samples is shorter than n_fft {n_fft}")));
    }
    let geo = frames_geometry(len.div_ceil(hop), n_fft, hop);
    let window = Arc::new(hann(n_fft));
    let (fwd, inv) = plans(n_fft);
    let norm = 1.0 / (n_fft as f32).sqrt();
    let bins = geo.bins();
    let frames = geo.frames;
    let plane = channels * bins * frames;
    let left = geo.left();
    let src_of: Arc<Vec<usize>> =
        Arc::new((0..geo.padded).map(|p| pad_source(p, left, len, PadMode::Reflect).expect("reflect")).collect());

    let mut data = vec![0.0f32; 2 * plane];
    let columns: Vec<(usize, Vec<Complex32>)> = (0..channels * frames)
        .into_par_iter()
        .map(|ct| {
            let (c, t) = (ct / frames, ct % frames);
            let xs = &x.data()[c * len..(c + 1) * len];
            let mut buf: Vec<Complex32> =
                (0..n_fft).map(|n| Complex32::new(window[n] * xs[src_of[t * hop + n]], 0.0)).collect();
            fwd.process(&mut buf);
            buf.truncate(bins);
            (ct, buf)
        })
        .collect();
    for (ct, col) in columns {
        let (c, t) = (ct / frames, ct % frames);
        for (k, z) in col.into_iter().enumerate() {
            let at = (c * bins + k) * frames + t;
            data[at] = z.re * norm;
            data[plane + at] = z.im * norm;
        }
    }

    Tensor::from_op(
        "stft",
        vec![2, channels, bins, frames],
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let per: Vec<(usize, Vec<f32>)> = (0..channels * frames)
                .into_par_iter()
                .map(|ct| {
                    let (c, t) = (ct / frames, ct % frames);
                    let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
                    for (k, z) in buf.iter_mut().take(bins).enumerate() {
                        let at = (c * bins + k) * frames + t;
                        *z = Complex32::new(g[at], g[plane + at]);
                    }
                    inv.process(&mut buf);
                    (ct, buf.iter().zip(window.iter()).map(|(z, w)| z.re * w * norm).collect())
                })
                .collect();
            let mut dx = vec![0.0f32; channels * len];
            for (ct, seg) in per {
                let (c, t) = (ct / frames, ct % frames);
                let row = &mut dx[c * len..(c + 1) * len];
                for (n, v) in seg.into_iter().enumerate() {
                    row[src_of[t * hop + n]] += v;
                }
            }
            vec![Some(dx)]
        }),
    )
}

const WSUM_EPS: f32 = 1e-10;

/// Inverse of [`stft_tensor`] from real/imag planes `[C, bins, frames]`,
/// producing `[C, out_len]`.
pub fn istft_tensor(real: &Tensor, imag: &Tensor, n_fft: usize, hop: usize, out_len: usize) -> Result<Tensor> {
    check_params(n_fft, hop)?;
    let &[channels, bins, frames] = real.shape() else {
        return dim_err(format!("istft planes must be [channels, bins, frames], got {:?}", real.shape()));
    };
    if imag.shape() != real.shape() {
        return dim_err("istft: real and imaginary planes differ in shape");
    }
    if bins != n_fft / 2 + 1 {
        return dim_err(format!("istft: {bins} bins inconsistent with n_fft {n_fft}"));
    }
    let geo = frames_geometry(frames, n_fft, hop);
    let left = geo.left();
    if out_len == 0 || out_len + left > geo.padded {
        return dim_err(format!("istft: {frames} frames cannot produce {out_len} samples"));
    }
    let window = Arc::new(hann(n_fft));
    let (fwd, inv) = plans(n_fft);
    let norm = 1.0 / (n_fft as f32).sqrt();
    let plane = channels * bins * frames;
    let mut wsum = vec![0.0f32; geo.padded];
    for t in 0..frames {
        for n in 0..n_fft {
            wsum[t * hop + n] += window[n] * window[n];
        }
    }
    let wsum = Arc::new(wsum);

    let (re, im) = (real.data(), imag.data());
    let segments: Vec<(usize, Vec<f32>)> = (0..channels * frames)
        .into_par_iter()
        .map(|ct| {
            let (c, t) = (ct / frames, ct % frames);
            let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
            for k in 0..bins {
                let at = (c * bins + k) * frames + t;
                let imv = if k == 0 || k == n_fft / 2 { 0.0 } else { im[at] };
                buf[k] = Complex32::new(re[at], imv);
                if k > 0 && k < n_fft / 2 {
                    buf[n_fft - k] = Complex32::new(re[at], -imv);
                }
            }
            inv.process(&mut buf);
            (ct, buf.iter().zip(window.iter()).map(|(z, w)| z.re * norm * w).collect())
        })
        .collect();
    let mut padded = vec![0.0f32; channels * geo.padded];
    for (ct, seg) in segments {
        let (c, t) = (ct / frames, ct % frames);
        let row = &mut padded[c * geo.padded..(c + 1) * geo.padded];
        for (n, v) in seg.into_iter().enumerate() {
            row[t * hop + n] += v;
        }
    }
    let mut data = Vec::with_capacity(channels * out_len);
    for c in 0..channels {
        for i in 0..out_len {
            let p = i + left;
            let w = wsum[p];
            data.push(if w > WSUM_EPS { padded[c * geo.padded + p] / w } else { 0.0 });
        }
    }

    Tensor::from_op(
        "istft",
        vec![channels, out_len],
        data,
        vec![real.clone(), imag.clone()],
        Box::new(move |g, _, _| {
            let per: Vec<(usize, Vec<Complex32>)> = (0..channels * frames)
                .into_par_iter()
                .map(|ct| {
                    let (c, t) = (ct / frames, ct % frames);
                    let mut buf: Vec<Complex32> = (0..n_fft)
                        .map(|n| {
                            let p = t * hop + n;
                            let v = if p >= left && p < left + out_len && wsum[p] > WSUM_EPS {
                                g[c * out_len + p - left] / wsum[p] * window[n]
                            } else {
                                0.0
                            };
                            Complex32::new(v, 0.0)
                        })
                        .collect();
                    fwd.process(&mut buf);
                    buf.truncate(bins);
                    (ct, buf)
                })
                .collect();
            let mut dre = vec![0.0f32; plane];
            let mut dim = vec![0.0f32; plane];
            for (ct, col) in per {
                let (c, t) = (ct / frames, ct % frames);
                for (k, z) in col.into_iter().enumerate() {
                    let edge = k == 0 || k == n_fft / 2;
                    let scale = if edge { norm } else { 2.0 * norm };
                    let at = (c * bins + k) * frames + t;
                    dre[at] = z.re * scale;
                    dim[at] = if edge { 0.0 } else { z.im * scale };
                }
            }
            vec![Some(dre), Some(dim)]
        }),
    )
}

pub fn stft(clip: &AudioClip, n_fft: usize, hop: usize) -> Result<Spectrogram> {
    let both = stft_tensor(clip.samples(), n_fft, hop)?;
    let channels = clip.channels();
    let (bins, frames) = (both.shape()[2], both.shape()[3]);
    let real = numerics::narrow(&both, 0, 0, 1)?.reshape(&[channels, bins, frames])?;
    let imag = numerics::narrow(&both, 0, 1, 1)?.reshape(&[channels, bins, frames])?;
    Ok(Spectrogram { real, imag, n_fft, hop })
}

pub fn istft(spec: &Spectrogram, out_len: usize, sample_rate: u32) -> Result<AudioClip> {
    let y = istft_tensor(&spec.real, &spec.imag, spec.n_fft, spec.hop, out_len)?;
    AudioClip::new(y, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_is_ceil_of_hops() {
        let x = Tensor::zeros(&[1, 1000]);
        let s = stft_tensor(&x, 64, 16).unwrap();
        assert_eq!(s.shape(), &[2, 1, 33, 63]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_rejected() {
        let x = Tensor::zeros(&[1, 63]);
        assert!(matches!(stft_tensor(&x, 64, 16), Err(Error::Length(_))));
    }

    #[test]
    fn istft_geometry_checked() {
        let re = Tensor::zeros(&[1, 33, 10]);
        assert!(istft_tensor(&re, &re, 64, 16, 100).is_ok());
        assert!(istft_tensor(&re, &re, 64, 16, 10_000).is_err());
        assert!(istft_tensor(&re, &re, 128, 32, 100).is_err());
        let im = Tensor::zeros(&[1, 33, 9]);
        assert!(istft_tensor(&re, &im, 64, 16, 100).is_err());
    }

    #[test]
    fn zero_spectrogram_gives_silence() {
        let re = Tensor::zeros(&[2, 33, 10]);
        let y = istft_tensor(&re, &re, 64, 16, 150).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_dc_is_scaled_hann_before_normalization() {
        // A unit DC bin inverts to the constant frame 1/sqrt(N); overlap-add
        // gives that constant times the window, then divides by window².
        let n = 32;
        let mut re = vec![0.0f32; n / 2 + 1];
        re[0] = 1.0;
        let re = Tensor::new(&[1, n / 2 + 1, 1], re).unwrap();
        let im = Tensor::zeros(&[1, n / 2 + 1, 1]);
        let y = istft_tensor(&re, &im, n, n / 4, n / 2).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * PI * (i + n / 2) as f64 / n as f64).cos();
            let raw = v as f64 * w * w;
            assert!((raw - w / (n as f64).sqrt()).abs() < 1e-6, "sample {i}");
        }
    }
}
