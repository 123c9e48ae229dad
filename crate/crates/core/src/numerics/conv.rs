//! 1-D convolution and its transpose, both batched over a leading axis.

use rayon::prelude::*;

use crate::error::{dim_err, Result};

use super::linalg::gemm;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    kernel: usize,
    stride: usize,
    padding: usize,
}

/// `cols[c*K + k, t] = x[c, t*s + k - p]`, zero outside the signal.
fn im2col(x: &[f32], channels: usize, len: usize, out_len: usize, g: Geometry) -> Vec<f32> {
    let mut cols = vec![0.0; channels * g.kernel * out_len];
    for c in 0..channels {
        let xrow = &x[c * len..(c + 1) * len];
        for k in 0..g.kernel {
            let dst = &mut cols[(c * g.kernel + k) * out_len..(c * g.kernel + k + 1) * out_len];
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = (t * g.stride + k) as isize - g.padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    *d = xrow[pos as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f32], channels: usize, len: usize, out_len: usize, g: Geometry) -> Vec<f32> {
    let mut x = vec![0.0; channels * len];
    for c in 0..channels {
        let xrow = &mut x[c * len..(c + 1) * len];
        for k in 0..g.kernel {
            let src = &cols[(c * g.kernel + k) * out_len..(c * g.kernel + k + 1) * out_len];
            for (t, &v) in src.iter().enumerate() {
                let pos = (t * g.stride + k) as isize - g.padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    xrow[pos as usize] += v;
                }
            }
        }
    }
    x
}

fn as_batched(x: &Tensor) -> Result<(bool, usize, usize, usize)> {
    match x.shape() {
        [c, t] => Ok((false, 1, *c, *t)),
        [b, c, t] => Ok((true, *b, *c, *t)),
        s => dim_err(format!("convolution input must be [C, T] or [B, C, T], got {s:?}")),
    }
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != c_out => dim_err(format!("bias has {} entries for {c_out} channels", b.numel())),
        _ => Ok(()),
    }
}

fn sum_batches(parts: Vec<Vec<f32>>, len: usize) -> Vec<f32> {
    let mut acc = vec![0.0; len];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc
}

fn bias_grad(g: &[f32], batch: usize, c_out: usize, len: usize) -> Vec<f32> {
    let mut db = vec![0.0; c_out];
    for b in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            let off = (b * c_out + c) * len;
            *d += g[off..off + len].iter().sum::<f32>();
        }
    }
    db
}

/// Cross-correlation of `x` (`[C_in, T]` or `[B, C_in, T]`) with
/// `w[C_out, C_in, K]`; output length `floor((T + 2p - K)/s) + 1`.
pub fn conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (batched, batch, c_in, len) = as_batched(x)?;
    let [c_out, wc_in, kernel] = *w.shape() else {
        return dim_err(format!("conv1d weight must be [C_out, C_in, K], got {:?}", w.shape()));
    };
    if wc_in != c_in {
        return dim_err(format!("conv1d: input has {c_in} channels, weight expects {wc_in}"));
    }
    if kernel == 0 || stride == 0 {
        return dim_err("conv1d: kernel and stride must be positive");
    }
    check_bias(bias, c_out)?;
    let span = len + 2 * padding;
    if span < kernel {
        return dim_err(format!("conv1d: padded length {span} shorter than kernel {kernel}"));
    }
    let out_len = (span - kernel) / stride + 1;
    let g = Geometry { kernel, stride, padding };
    let ck = c_in * kernel;

    let wd = w.data();
    let bd = bias.map(|b| b.data().to_vec());
    let outs: Vec<Vec<f32>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let cols = im2col(&x.data()[b * c_in * len..(b + 1) * c_in * len], c_in, len, out_len, g);
            let mut y = gemm(wd, &cols, c_out, ck, out_len, false, false);
            if let Some(bd) = &bd {
                for (row, &bv) in y.chunks_mut(out_len).zip(bd) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
            y
        })
        .collect();
    let data = outs.concat();

    let shape = if batched { vec![batch, c_out, out_len] } else { vec![c_out, out_len] };
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Tensor::from_op(
        "conv1d",
        shape,
        data,
        parents,
        Box::new(move |grad, _, p| {
            let (xd, wd) = (p[0].data(), p[1].data());
            let per: Vec<(Option<Vec<f32>>, Option<Vec<f32>>)> = (0..batch)
                .into_par_iter()
                .map(|b| {
                    let gy = &grad[b * c_out * out_len..(b + 1) * c_out * out_len];
                    let dw = p[1].requires_grad().then(|| {
                        let cols = im2col(&xd[b * c_in * len..(b + 1) * c_in * len], c_in, len, out_len, g);
                        gemm(gy, &cols, c_out, out_len, ck, false, true)
                    });
                    let dx = p[0].requires_grad().then(|| {
                        let dcols = gemm(wd, gy, ck, c_out, out_len, true, false);
                        col2im(&dcols, c_in, len, out_len, g)
                    });
                    (dx, dw)
                })
                .collect();
            let (dxs, dws): (Vec<_>, Vec<_>) = per.into_iter().unzip();
            let dx = p[0].requires_grad().then(|| dxs.into_iter().flatten().flatten().collect());
            let dw = p[1].requires_grad().then(|| sum_batches(dws.into_iter().flatten().collect(), c_out * ck));
            let mut out = vec![dx, dw];
            if p.len() == 3 {
                out.push(Some(bias_grad(grad, batch, c_out, out_len)));
            }
            out
        }),
    )
}

/// Transposed convolution with `w[C_in, C_out, K]`; output length
/// `(T - 1)·s - 2p + K`. With the same geometry, [`conv1d`] maps that length
/// back to `T`.
pub fn conv_transpose1d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batched, batch, c_in, len) = as_batched(x)?;
    let [wc_in, c_out, kernel] = *w.shape() else {
        return dim_err(format!("conv_transpose1d weight must be [C_in, C_out, K], got {:?}", w.shape()));
    };
    if wc_in != c_in {
        return dim_err(format!("conv_transpose1d: input has {c_in} channels, weight expects {wc_in}"));
    }
    if kernel == 0 || stride == 0 {
        return dim_err("conv_transpose1d: kernel and stride must be positive");
    }
    check_bias(bias, c_out)?;
    let full = (len - 1) * stride + kernel;
    if full <= 2 * padding {
        return dim_err(format!("conv_transpose1d: padding {padding} consumes the whole output"));
    }
    let out_len = full - 2 * padding;
    let g = Geometry { kernel, stride, padding };
    let ck = c_out * kernel;

    let wd = w.data();
    let bd = bias.map(|b| b.data().to_vec());
    let outs: Vec<Vec<f32>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x.data()[b * c_in * len..(b + 1) * c_in * len];
            let cols = gemm(wd, xb, ck, c_in, len, true, false);
            let mut y = col2im(&cols, c_out, out_len, len, g);
            if let Some(bd) = &bd {
                for (row, &bv) in y.chunks_mut(out_len).zip(bd) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
            y
        })
        .collect();
    let data = outs.concat();

    let shape = if batched { vec![batch, c_out, out_len] } else { vec![c_out, out_len] };
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Tensor::from_op(
        "conv_transpose1d",
        shape,
        data,
        parents,
        Box::new(move |grad, _, p| {
            let (xd, wd) = (p[0].data(), p[1].data());
            let per: Vec<(Option<Vec<f32>>, Option<Vec<f32>>)> = (0..batch)
                .into_par_iter()
                .map(|b| {
                    let gy = &grad[b * c_out * out_len..(b + 1) * c_out * out_len];
                    let gcols = im2col(gy, c_out, out_len, len, g);
                    let dx = p[0].requires_grad().then(|| gemm(wd, &gcols, c_in, ck, len, false, false));
                    let dw = p[1]
                        .requires_grad()
                        .then(|| gemm(&xd[b * c_in * len..(b + 1) * c_in * len], &gcols, c_in, len, ck, false, true));
                    (dx, dw)
                })
                .collect();
            let (dxs, dws): (Vec<_>, Vec<_>) = per.into_iter().unzip();
            let dx = p[0].requires_grad().then(|| dxs.into_iter().flatten().flatten().collect());
            let dw = p[1].requires_grad().then(|| sum_batches(dws.into_iter().flatten().collect(), c_in * ck));
            let mut out = vec![dx, dw];
            if p.len() == 3 {
                out.push(Some(bias_grad(grad, batch, c_out, out_len)));
            }
            out
        }),
    )
}
