//! Pre-norm Transformer encoder layers with Layer Scale, and the cross-domain
//! encoder that interleaves self- and cross-attention over the temporal and
//! spectral token sequences.
//!
//! Sequences are `[batch, tokens, dim]`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{constant, impl_params, LayerNorm, Linear};
use crate::numerics::{self as nx, NormAxes, Tensor};
use crate::sparse_attention::{self as sa, LshConfig};

/// How cross-attention layers read the other domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossUpdate {
    /// Both domains attend to the other's pre-layer state.
    Parallel,
    /// The temporal domain updates first; the spectral domain then attends
    /// to the updated temporal state.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Layers per domain, alternating self / cross starting with self.
    pub depth: usize,
    pub layer_scale_init: f32,
    /// Multiplier on the projected inputs before positional encodings are added.
    pub input_scale: f32,
    pub positional: bool,
    pub cross_update: CrossUpdate,
    /// LSH sparse attention in self-attention layers when set.
    pub sparse: Option<LshConfig>,
    /// Also sparsify cross-attention.
    pub sparse_cross: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            dim: 384,
            heads: 8,
            ffn_mult: 4,
            depth: 5,
            layer_scale_init: 1e-4,
            input_scale: 1.0,
            positional: true,
            cross_update: CrossUpdate::Parallel,
            sparse: None,
            sparse_cross: false,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} must be divisible by heads {}", self.dim, self.heads)));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("dim {} must be divisible by 4", self.dim)));
        }
        if self.depth == 0 {
            return Err(Error::Config("transformer depth must be at least 1".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be at least 1".into()));
        }
        if !(self.layer_scale_init > 0.0) {
            return Err(Error::Config("layer_scale_init must be positive".into()));
        }
        if let Some(lsh) = &self.sparse {
            lsh.validate()?;
        }
        Ok(())
    }

    /// Whether layer `index` (per domain) is a cross-attention layer.
    pub fn is_cross(index: usize) -> bool {
        index % 2 == 1
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/dim))`, `pe[p, 2i+1] = cos(..)`.
pub fn sinusoidal_pe_1d(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return dim_err(format!("1-D positional encoding needs an even dim, got {dim}"));
    }
    let mut data = vec![0.0f32; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = angle.sin() as f32;
            data[p * dim + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::new(&[len, dim], data)
}

/// Token `f·frames + t` gets the 1-D encoding of `f` in its first `dim/2`
/// channels and of `t` in the rest.
pub fn sinusoidal_pe_2d(freqs: usize, frames: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return dim_err(format!("2-D positional encoding needs dim divisible by 4, got {dim}"));
    }
    let half = dim / 2;
    let pf = sinusoidal_pe_1d(freqs, half)?;
    let pt = sinusoidal_pe_1d(frames, half)?;
    let mut data = Vec::with_capacity(freqs * frames * dim);
    for f in 0..freqs {
        for t in 0..frames {
            data.extend_from_slice(&pf.data()[f * half..(f + 1) * half]);
            data.extend_from_slice(&pt.data()[t * half..(t + 1) * half]);
        }
    }
    Tensor::new(&[freqs * frames, dim], data)
}

/// Splits `[b, n, dim]` into `[b·heads, n, dim/heads]`.
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let &[b, n, d] = x.shape() else { return dim_err("expected [batch, tokens, dim]") };
    let x = x.reshape(&[b, n, heads, d / heads])?;
    nx::permute(&x, &[0, 2, 1, 3])?.reshape(&[b * heads, n, d / heads])
}

fn merge_heads(x: &Tensor, batch: usize, heads: usize) -> Result<Tensor> {
    let &[_, n, dh] = x.shape() else { return dim_err("expected [batch·heads, tokens, head_dim]") };
    let x = x.reshape(&[batch, heads, n, dh])?;
    nx::permute(&x, &[0, 2, 1, 3])?.reshape(&[batch, n, heads * dh])
}

fn seq_shape(x: &Tensor, dim: usize) -> Result<(usize, usize)> {
    match *x.shape() {
        [b, n, d] if d == dim => Ok((b, n)),
        _ => dim_err(format!("sequence must be [batch, tokens, {dim}], got {:?}", x.shape())),
    }
}

/// Multi-head attention. The key projection has no bias: a per-query constant
/// added to every logit leaves the softmax unchanged.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}
impl_params!(MultiHeadAttention { module query, module key, module value, module out });

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(rng, dim, dim),
            key: Linear::without_bias(rng, dim, dim),
            value: Linear::new(rng, dim, dim),
            out: Linear::new(rng, dim, dim),
            heads,
        }
    }

    /// Attention output and the per-head weights `[b·heads, nq, nk]`.
    /// With `lsh`, each batch entry gets its own pattern, built from that
    /// entry's full projected queries and keys and shared across heads.
    pub fn forward_with_weights(
        &self,
        x: &Tensor,
        ctx: &Tensor,
        lsh: Option<(&LshConfig, u64)>,
    ) -> Result<(Tensor, Tensor)> {
        let dim = self.query.weight.shape()[0];
        let (b, nq) = seq_shape(x, dim)?;
        let (bk, nk) = seq_shape(ctx, dim)?;
        if b != bk {
            return dim_err(format!("batch {b} attends to context batch {bk}"));
        }
        let q = self.query.forward(x)?;
        let k = self.key.forward(ctx)?;
        let v = self.value.forward(ctx)?;
        let scale = 1.0 / ((dim / self.heads) as f32).sqrt();
        let (qh, kh, vh) = (split_heads(&q, self.heads)?, split_heads(&k, self.heads)?, split_heads(&v, self.heads)?);
        let weights = match lsh {
            None => sa::attention_weights(&qh, &kh, None, scale)?,
            Some((cfg, seed)) => {
                let h = self.heads;
                let mut per_item = Vec::with_capacity(b);
                for i in 0..b {
                    let (qi, ki) = nx::no_grad(|| -> Result<_> {
                        Ok((
                            nx::narrow(&q, 0, i, 1)?.reshape(&[nq, dim])?,
                            nx::narrow(&k, 0, i, 1)?.reshape(&[nk, dim])?,
                        ))
                    })?;
                    let pattern = sa::lsh_pattern(&qi, &ki, cfg, seed)?;
                    let qs = nx::narrow(&qh, 0, i * h, h)?;
                    let ks = nx::narrow(&kh, 0, i * h, h)?;
                    per_item.push(sa::attention_weights(&qs, &ks, Some(pattern.mask()), scale)?);
                }
                nx::concat(&per_item, 0)?
            }
        };
        let attended = nx::bmm(&weights, &vh, false, false)?;
        let out = self.out.forward(&merge_heads(&attended, b, self.heads)?)?;
        Ok((out, weights))
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor, lsh: Option<(&LshConfig, u64)>) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, ctx, lsh)?.0)
    }
}

/// One pre-norm encoder layer. `norm_ctx` is present on cross-attention layers.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub norm_ctx: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub scale1: Tensor,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub scale2: Tensor,
    pub norm_out: LayerNorm,
    lsh: Option<(LshConfig, u64)>,
}
impl_params!(EncoderLayer {
    module norm1,
    module norm_ctx,
    module attn,
    tensor scale1,
    module norm2,
    module ffn_in,
    module ffn_out,
    tensor scale2,
    module norm_out,
});

impl EncoderLayer {
    /// `lsh_seed` seeds this layer's hashing when `cfg` asks for sparsity.
    pub fn new(rng: &mut ChaCha8Rng, cfg: &TransformerConfig, cross: bool, lsh_seed: u64) -> Self {
        let d = cfg.dim;
        let sparse = if cross && !cfg.sparse_cross { None } else { cfg.sparse };
        Self {
            norm1: LayerNorm::new(d, NormAxes::Last),
            norm_ctx: cross.then(|| LayerNorm::new(d, NormAxes::Last)),
            attn: MultiHeadAttention::new(rng, d, cfg.heads),
            scale1: constant(&[d], cfg.layer_scale_init),
            norm2: LayerNorm::new(d, NormAxes::Last),
            ffn_in: Linear::new(rng, d, d * cfg.ffn_mult),
            ffn_out: Linear::new(rng, d * cfg.ffn_mult, d),
            scale2: constant(&[d], cfg.layer_scale_init),
            norm_out: LayerNorm::new(d, NormAxes::All),
            lsh: sparse.map(|c| (c, lsh_seed)),
        }
    }

    pub fn is_cross(&self) -> bool {
        self.norm_ctx.is_some()
    }

    /// Output before the final all-token normalization.
    pub fn residual(&self, x: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let kv = match (&self.norm_ctx, ctx) {
            (Some(norm), Some(c)) => norm.forward(c)?,
            (None, None) => h.clone(),
            (Some(_), None) => return Err(Error::Contract("cross-attention layer needs a context".into())),
            (None, Some(_)) => return Err(Error::Contract("self-attention layer given a context".into())),
        };
        let lsh = self.lsh.as_ref().map(|(c, s)| (c, *s));
        let a = self.attn.forward(&h, &kv, lsh)?;
        let x = nx::add(x, &nx::mul_trailing(&a, &self.scale1)?)?;
        let f = self.ffn_out.forward(&nx::gelu(&self.ffn_in.forward(&self.norm2.forward(&x)?)?)?)?;
        nx::add(&x, &nx::mul_trailing(&f, &self.scale2)?)
    }

    pub fn forward(&self, x: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        self.norm_out.forward(&self.residual(x, ctx)?)
    }
}

/// Interleaved encoder over a temporal and a spectral sequence.
#[derive(Debug, Clone)]
pub struct CrossDomainEncoder {
    pub cfg: TransformerConfig,
    pub temporal: Vec<EncoderLayer>,
    pub spectral: Vec<EncoderLayer>,
}
impl_params!(CrossDomainEncoder { modules temporal, modules spectral });

impl CrossDomainEncoder {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &TransformerConfig, lsh_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut temporal = Vec::with_capacity(cfg.depth);
        let mut spectral = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let cross = TransformerConfig::is_cross(l);
            temporal.push(EncoderLayer::new(rng, cfg, cross, lsh_seed.wrapping_add(2 * l as u64)));
            spectral.push(EncoderLayer::new(rng, cfg, cross, lsh_seed.wrapping_add(2 * l as u64 + 1)));
        }
        Ok(Self { cfg: cfg.clone(), temporal, spectral })
    }

    /// `temporal` is `[b, T, dim]`; `spectral` is `[b, freqs·frames, dim]`
    /// with token `f·frames + t`. Positional encodings are added here.
    pub fn forward(
        &self,
        temporal: &Tensor,
        spectral: &Tensor,
        freqs: usize,
        frames: usize,
    ) -> Result<(Tensor, Tensor)> {
        let dim = self.cfg.dim;
        let (_, nt) = seq_shape(temporal, dim)?;
        let (_, ns) = seq_shape(spectral, dim)?;
        if ns != freqs * frames {
            return dim_err(format!("spectral sequence of {ns} tokens is not {freqs}x{frames}"));
        }
        let (mut xt, mut xs) = if self.cfg.positional {
            (
                nx::add_trailing(&nx::scale(temporal, self.cfg.input_scale)?, &sinusoidal_pe_1d(nt, dim)?)?,
                nx::add_trailing(&nx::scale(spectral, self.cfg.input_scale)?, &sinusoidal_pe_2d(freqs, frames, dim)?)?,
            )
        } else {
            (temporal.clone(), spectral.clone())
        };
        for (lt, ls) in self.temporal.iter().zip(&self.spectral) {
            if !lt.is_cross() {
                xt = lt.forward(&xt, None)?;
                xs = ls.forward(&xs, None)?;
                continue;
            }
            match self.cfg.cross_update {
                CrossUpdate::Parallel => {
                    let nt = lt.forward(&xt, Some(&xs))?;
                    xs = ls.forward(&xs, Some(&xt))?;
                    xt = nt;
                }
                CrossUpdate::Sequential => {
                    xt = lt.forward(&xt, Some(&xs))?;
                    xs = ls.forward(&xs, Some(&xt))?;
                }
            }
        }
        Ok((xt, xs))
    }

    /// Kinds of layers per domain, in order.
    pub fn layout(&self) -> Vec<&'static str> {
        self.temporal.iter().map(|l| if l.is_cross() { "cross" } else { "self" }).collect()
    }
}
