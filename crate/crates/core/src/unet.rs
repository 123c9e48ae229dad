//! Two-branch U-Net (waveform and complex spectrogram) around the
//! cross-domain Transformer encoder.
//!
//! Both branches see the mixture reflect-padded to a multiple of
//! `stride^layers`. The spectral branch works on the STFT with the Nyquist
//! bin dropped, real and imaginary parts stacked as channels, and convolves
//! along frequency independently for every frame. Each branch normalizes its
//! input by the input's own mean and standard deviation (treated as
//! constants) and undoes it at the output, so silence maps to silence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, AudioClip};
use crate::error::{dim_err, Error, Result};
use crate::layers::{impl_params, Conv1d, ConvTranspose1d, Linear, Params};
use crate::numerics::{self as nx, PadMode, Tensor};
use crate::sparse_attention::LshConfig;
use crate::transformer::{CrossDomainEncoder, TransformerConfig};

pub const DEFAULT_SOURCES: [&str; 4] = ["drums", "bass", "other", "vocals"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sources: Vec<String>,
    pub audio_channels: usize,
    pub sample_rate: u32,
    /// Width of the first encoder layer.
    pub channels: usize,
    pub growth: usize,
    pub layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub transformer: TransformerConfig,
    pub sparse: Option<LshConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sources: DEFAULT_SOURCES.iter().map(|s| s.to_string()).collect(),
            audio_channels: 2,
            sample_rate: dsp::DEFAULT_SAMPLE_RATE,
            channels: 48,
            growth: 2,
            layers: 4,
            kernel: 8,
            stride: 4,
            n_fft: dsp::DEFAULT_N_FFT,
            hop: dsp::DEFAULT_HOP,
            transformer: TransformerConfig::default(),
            sparse: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sources.is_empty() {
            return fail("at least one source is required".into());
        }
        if !(1..=2).contains(&self.audio_channels) {
            return fail(format!("audio_channels {} must be 1 or 2", self.audio_channels));
        }
        if self.channels == 0 || self.growth == 0 || self.layers == 0 {
            return fail("channels, growth and layers must be positive".into());
        }
        if self.stride < 2 || self.kernel < self.stride || !(self.kernel - self.stride).is_multiple_of(2) {
            return fail(format!(
                "kernel {} and stride {} must satisfy kernel ≥ stride ≥ 2 with an even difference",
                self.kernel, self.stride
            ));
        }
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        if !self.n_fft.is_power_of_two()
            || self.hop == 0
            || !self.n_fft.is_multiple_of(self.hop)
            || self.hop > self.n_fft / 2
        {
            return fail(format!("n_fft {} / hop {} is not a valid STFT geometry", self.n_fft, self.hop));
        }
        if !(self.n_fft / 2).is_multiple_of(self.alignment()) {
            return fail(format!(
                "n_fft/2 = {} frequency bins must be divisible by stride^layers = {}",
                self.n_fft / 2,
                self.alignment()
            ));
        }
        let mut t = self.transformer.clone();
        t.sparse = self.sparse.or(t.sparse);
        t.validate()
    }

    /// Width of encoder layer `l`.
    pub fn width(&self, l: usize) -> usize {
        self.channels * self.growth.pow(l as u32)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width(self.layers - 1)
    }

    /// Lengths are padded to a multiple of this.
    pub fn alignment(&self) -> usize {
        self.stride.pow(self.layers as u32)
    }

    pub fn padding(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2
    }

    fn transformer_config(&self) -> TransformerConfig {
        let mut t = self.transformer.clone();
        if self.sparse.is_some() {
            t.sparse = self.sparse;
        }
        t
    }
}

/// conv(k, s) → GELU → 1×1 conv to 2C → GLU.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub conv: Conv1d,
    pub rewrite: Conv1d,
}
impl_params!(EncoderBlock { module conv, module rewrite });

impl EncoderBlock {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig, c_in: usize, c_out: usize) -> Self {
        Self {
            conv: Conv1d::new(rng, c_in, c_out, cfg.kernel, cfg.stride, cfg.padding()),
            rewrite: Conv1d::new(rng, c_out, 2 * c_out, 1, 1, 0),
        }
    }

    /// `[n, C_in, T]` → `[n, C_out, T/stride]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = nx::gelu(&self.conv.forward(x)?)?;
        nx::glu(&self.rewrite.forward(&h)?, 1)
    }
}

/// (x + skip) → conv k3 to 2C → GLU → transposed conv(k, s) → GELU unless last.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub rewrite: Conv1d,
    pub conv_tr: ConvTranspose1d,
    pub last: bool,
}
impl_params!(DecoderBlock { module rewrite, module conv_tr });

impl DecoderBlock {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig, c_in: usize, c_out: usize, last: bool) -> Self {
        Self {
            rewrite: Conv1d::new(rng, c_in, 2 * c_in, 3, 1, 1),
            conv_tr: ConvTranspose1d::new(rng, c_in, c_out, cfg.kernel, cfg.stride, cfg.padding(), !last),
            last,
        }
    }

    pub fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        if x.shape() != skip.shape() {
            return dim_err(format!("skip {:?} does not match decoder input {:?}", skip.shape(), x.shape()));
        }
        let h = nx::glu(&self.rewrite.forward(&nx::add(x, skip)?)?, 1)?;
        let y = self.conv_tr.forward(&h)?;
        if self.last {
            Ok(y)
        } else {
            nx::gelu(&y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub time_encoder: Vec<EncoderBlock>,
    pub time_decoder: Vec<DecoderBlock>,
    pub freq_encoder: Vec<EncoderBlock>,
    pub freq_decoder: Vec<DecoderBlock>,
    pub time_in: Option<Linear>,
    pub time_out: Option<Linear>,
    pub freq_in: Option<Linear>,
    pub freq_out: Option<Linear>,
    pub transformer: CrossDomainEncoder,
}
impl_params!(Model {
    modules time_encoder,
    modules time_decoder,
    modules freq_encoder,
    modules freq_decoder,
    module time_in,
    module time_out,
    module freq_in,
    module freq_out,
    module transformer,
});

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.sources.len();
    let build_branch = |rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize| {
        let enc: Vec<EncoderBlock> = (0..cfg.layers)
            .map(|l| {
                let c_in = if l == 0 { in_ch } else { cfg.width(l - 1) };
                EncoderBlock::new(rng, cfg, c_in, cfg.width(l))
            })
            .collect();
        let dec: Vec<DecoderBlock> = (0..cfg.layers)
            .rev()
            .map(|l| {
                let c_out = if l == 0 { out_ch } else { cfg.width(l - 1) };
                DecoderBlock::new(rng, cfg, cfg.width(l), c_out, l == 0)
            })
            .collect();
        (enc, dec)
    };
    let (time_encoder, time_decoder) = build_branch(&mut rng, cfg.audio_channels, s * cfg.audio_channels);
    let (freq_encoder, freq_decoder) = build_branch(&mut rng, 2 * cfg.audio_channels, 2 * s * cfg.audio_channels);
    let (c, d) = (cfg.bottleneck_width(), cfg.transformer.dim);
    let proj = |rng: &mut ChaCha8Rng, a: usize, b: usize| (c != d).then(|| Linear::new(rng, a, b));
    let time_in = proj(&mut rng, c, d);
    let time_out = proj(&mut rng, d, c);
    let freq_in = proj(&mut rng, c, d);
    let freq_out = proj(&mut rng, d, c);
    let transformer = CrossDomainEncoder::new(&mut rng, &cfg.transformer_config(), seed ^ 0x5eed_1a55)?;
    Ok(Model {
        cfg: cfg.clone(),
        time_encoder,
        time_decoder,
        freq_encoder,
        freq_decoder,
        time_in,
        time_out,
        freq_in,
        freq_out,
        transformer,
    })
}

pub fn count_params(model: &Model) -> usize {
    model.param_count()
}

/// Per-item mean and standard deviation of `x[b, ..]`.
fn item_stats(x: &Tensor) -> Vec<(f32, f32)> {
    let per = x.numel() / x.shape()[0];
    x.data()
        .chunks_exact(per)
        .map(|c| {
            let mean = c.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            let var = c.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
            (mean as f32, var.sqrt() as f32)
        })
        .collect()
}

/// Applies `(x - mean) / (eps + std)` per item, or its inverse `x·std + mean`.
fn affine_per_item(x: &Tensor, stats: &[(f32, f32)], inverse: bool) -> Result<Tensor> {
    let per = x.numel() / x.shape()[0];
    let mut scale = Vec::with_capacity(x.numel());
    let mut shift = Vec::with_capacity(x.numel());
    for &(mean, std) in stats {
        let (a, b) = if inverse { (std, mean) } else { (1.0 / (1e-5 + std), -mean / (1e-5 + std)) };
        scale.extend(std::iter::repeat_n(a, per));
        shift.extend(std::iter::repeat_n(b, per));
    }
    let scaled = nx::mul(x, &Tensor::new(x.shape(), scale)?)?;
    nx::add(&scaled, &Tensor::new(x.shape(), shift)?)
}

/// `[b, C, F, T]` → `[b·T, C, F]` so convolutions run along frequency.
fn freq_major(x: &Tensor) -> Result<Tensor> {
    let &[b, c, f, t] = x.shape() else { return dim_err("expected [b, C, F, T]") };
    nx::permute(x, &[0, 3, 1, 2])?.reshape(&[b * t, c, f])
}

fn from_freq_major(x: &Tensor, b: usize, t: usize) -> Result<Tensor> {
    let &[_, c, f] = x.shape() else { return dim_err("expected [b·T, C, F]") };
    nx::permute(&x.reshape(&[b, t, c, f])?, &[0, 2, 3, 1])
}

impl Model {
    pub fn sources(&self) -> &[String] {
        &self.cfg.sources
    }

    /// Separates a batch `[b, channels, L]` into `[b, sources, channels, L]`.
    pub fn forward(&self, mix: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        let &[b, ch, len] = mix.shape() else {
            return dim_err(format!("mixture batch must be [b, channels, frames], got {:?}", mix.shape()));
        };
        if ch != cfg.audio_channels {
            return Err(Error::Format(format!("model expects {} channels, got {ch}", cfg.audio_channels)));
        }
        let s = cfg.sources.len();
        let align = cfg.alignment();
        let padded = (len.div_ceil(align) * align).max(cfg.n_fft);
        let mode = if padded - len < len { PadMode::Reflect } else { PadMode::Zero };
        let x = if padded == len { mix.clone() } else { nx::pad(mix, 2, 0, padded - len, mode)? };

        // Spectral input: [b, 2·ch, F, T] with channels (re0, im0, re1, im1).
        let spec = dsp::stft_tensor(&x.reshape(&[b * ch, padded])?, cfg.n_fft, cfg.hop)?;
        let (bins, frames) = (spec.shape()[2], spec.shape()[3]);
        let spec = nx::permute(&spec.reshape(&[2, b, ch, bins, frames])?, &[1, 2, 0, 3, 4])?;
        let spec = nx::narrow(&spec.reshape(&[b, 2 * ch, bins, frames])?, 2, 0, cfg.freq_bins())?;

        let t_stats = item_stats(&x);
        let f_stats = item_stats(&spec);
        let mut xt = affine_per_item(&x, &t_stats, false)?;
        let mut xf = freq_major(&affine_per_item(&spec, &f_stats, false)?)?;

        let mut t_skips = Vec::with_capacity(cfg.layers);
        let mut f_skips = Vec::with_capacity(cfg.layers);
        for (te, fe) in self.time_encoder.iter().zip(&self.freq_encoder) {
            xt = te.forward(&xt)?;
            xf = fe.forward(&xf)?;
            t_skips.push(xt.clone());
            f_skips.push(xf.clone());
        }

        let (xt2, xf2) = self.bottleneck(&xt, &xf, b, frames)?;
        xt = xt2;
        xf = xf2;

        for (l, (td, fd)) in self.time_decoder.iter().zip(&self.freq_decoder).enumerate() {
            let skip = cfg.layers - 1 - l;
            xt = td.forward(&xt, &t_skips[skip])?;
            xf = fd.forward(&xf, &f_skips[skip])?;
        }

        // Temporal output: [b, s·ch, L'] → [b, s, ch, L'].
        let yt = affine_per_item(&xt, &t_stats, true)?.reshape(&[b, s, ch, padded])?;

        // Spectral output back to a waveform per source and channel.
        let yf = affine_per_item(&from_freq_major(&xf, b, frames)?, &f_stats, true)?;
        let yf = nx::pad(
            &yf.reshape(&[b, s, ch, 2, cfg.freq_bins(), frames])?,
            4,
            0,
            bins - cfg.freq_bins(),
            PadMode::Zero,
        )?;
        let yf = nx::permute(&yf, &[3, 0, 1, 2, 4, 5])?;
        let n = b * s * ch;
        let re = nx::narrow(&yf, 0, 0, 1)?.reshape(&[n, bins, frames])?;
        let im = nx::narrow(&yf, 0, 1, 1)?.reshape(&[n, bins, frames])?;
        let yf = dsp::istft_tensor(&re, &im, cfg.n_fft, cfg.hop, padded)?.reshape(&[b, s, ch, padded])?;

        let y = nx::add(&yt, &yf)?;
        if padded == len {
            Ok(y)
        } else {
            nx::narrow(&y, 3, 0, len)
        }
    }

    /// Projects both encoder outputs to tokens, runs the cross-domain
    /// encoder, and projects back.
    fn bottleneck(&self, xt: &Tensor, xf: &Tensor, b: usize, frames: usize) -> Result<(Tensor, Tensor)> {
        let c = self.cfg.bottleneck_width();
        let f4 = xf.shape()[2];
        let project = |x: Tensor, p: &Option<Linear>| match p {
            Some(l) => l.forward(&x),
            None => Ok(x),
        };
        let tokens_t = project(nx::permute(xt, &[0, 2, 1])?, &self.time_in)?;
        // [b·T, C, F] → [b, F, T, C] → tokens f·T + t.
        let tokens_f = nx::permute(&xf.reshape(&[b, frames, c, f4])?, &[0, 3, 1, 2])?.reshape(&[b, f4 * frames, c])?;
        let tokens_f = project(tokens_f, &self.freq_in)?;
        let (ot, of) = self.transformer.forward(&tokens_t, &tokens_f, f4, frames)?;
        let ot = project(ot, &self.time_out)?;
        let of = project(of, &self.freq_out)?;
        let yt = nx::permute(&ot, &[0, 2, 1])?;
        let yf = nx::permute(&of.reshape(&[b, f4, frames, c])?, &[0, 2, 3, 1])?.reshape(&[b * frames, c, f4])?;
        Ok((yt, yf))
    }
}

/// Separates one clip into `[sources, channels, frames]`.
pub fn model_forward(model: &Model, mixture: &AudioClip) -> Result<Tensor> {
    if mixture.sample_rate() != model.cfg.sample_rate {
        return Err(Error::Format(format!(
            "model runs at {} Hz, mixture is {} Hz",
            model.cfg.sample_rate,
            mixture.sample_rate()
        )));
    }
    let x = mixture.samples();
    let y = model.forward(&x.reshape(&[1, x.shape()[0], x.shape()[1]])?)?;
    let shape = y.shape()[1..].to_vec();
    y.reshape(&shape)
}
