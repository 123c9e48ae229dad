//! Matrix products.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{dim_err, Result};

use super::tensor::Tensor;

const PAR_THRESHOLD: usize = 1 << 15;

fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().sum::<f32>() + tail
}

/// `op(a) · op(b)` for row-major buffers, where `op` optionally transposes.
/// `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
pub(crate) fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f32> {
    let a: Cow<[f32]> = if ta { Cow::Owned(transpose(a, k, m)) } else { Cow::Borrowed(a) };
    let mut c = vec![0.0f32; m * n];
    let work = m * n * k;
    if tb {
        let row = |(i, crow): (usize, &mut [f32])| {
            let arow = &a[i * k..(i + 1) * k];
            for (j, cv) in crow.iter_mut().enumerate() {
                *cv = dot(arow, &b[j * k..(j + 1) * k]);
            }
        };
        if work >= PAR_THRESHOLD {
            c.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            c.chunks_mut(n).enumerate().for_each(row);
        }
    } else {
        let row = |(i, crow): (usize, &mut [f32])| {
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        };
        if work >= PAR_THRESHOLD {
            c.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            c.chunks_mut(n).enumerate().for_each(row);
        }
    }
    c
}

/// Gradients of `c = op(a)·op(b)` given `dc`.
fn gemm_grads(
    dc: &[f32],
    a: &[f32],
    b: &[f32],
    (m, k, n): (usize, usize, usize),
    (ta, tb): (bool, bool),
    need: (bool, bool),
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let da = need.0.then(|| if ta { gemm(b, dc, k, n, m, tb, true) } else { gemm(dc, b, m, n, k, false, !tb) });
    let db = need.1.then(|| if tb { gemm(dc, a, n, m, k, true, ta) } else { gemm(a, dc, k, m, n, !ta, false) });
    (da, db)
}

/// Batched `op(a)·op(b)`: `a` is `[B, m, k]` (`[B, k, m]` if `ta`), `b` is
/// `[B, k, n]` (`[B, n, k]` if `tb`). Rank-2 inputs are treated as `B = 1`.
pub fn bmm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != bsh.len() || !(ash.len() == 2 || ash.len() == 3) {
        return dim_err(format!("bmm: ranks of {ash:?} and {bsh:?} must both be 2 or 3"));
    }
    let rank3 = ash.len() == 3;
    let (batch, ar, ac) = if rank3 { (ash[0], ash[1], ash[2]) } else { (1, ash[0], ash[1]) };
    let (bb, br, bc) = if rank3 { (bsh[0], bsh[1], bsh[2]) } else { (1, bsh[0], bsh[1]) };
    if batch != bb {
        return dim_err(format!("bmm: batch {batch} vs {bb}"));
    }
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return dim_err(format!("matmul: inner dimensions {k} and {k2} disagree ({ash:?} x {bsh:?})"));
    }
    let (asz, bsz, csz) = (m * k, k * n, m * n);
    let mut data = Vec::with_capacity(batch * csz);
    for i in 0..batch {
        data.extend(gemm(&a.data()[i * asz..(i + 1) * asz], &b.data()[i * bsz..(i + 1) * bsz], m, k, n, ta, tb));
    }
    let shape = if rank3 { vec![batch, m, n] } else { vec![m, n] };
    Tensor::from_op(
        "matmul",
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, p| {
            let need = (p[0].requires_grad(), p[1].requires_grad());
            let mut da = need.0.then(|| Vec::with_capacity(batch * asz));
            let mut db = need.1.then(|| Vec::with_capacity(batch * bsz));
            for i in 0..batch {
                let (ga, gb) = gemm_grads(
                    &g[i * csz..(i + 1) * csz],
                    &p[0].data()[i * asz..(i + 1) * asz],
                    &p[1].data()[i * bsz..(i + 1) * bsz],
                    (m, k, n),
                    (ta, tb),
                    need,
                );
                if let (Some(acc), Some(v)) = (da.as_mut(), ga) {
                    acc.extend(v);
                }
                if let (Some(acc), Some(v)) = (db.as_mut(), gb) {
                    acc.extend(v);
                }
            }
            vec![da, db]
        }),
    )
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return dim_err(format!("matmul expects matrices, got {:?} and {:?}", a.shape(), b.shape()));
    }
    bmm(a, b, false, false)
}

/// `x[.., in] · w[out, in]ᵀ + bias[out]`, applied over all leading axes.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (&d_in, lead) = x.shape().split_last().ok_or_else(|| crate::Error::Dimension("linear of a scalar".into()))?;
    if w.ndim() != 2 {
        return dim_err(format!("linear weight must be [out, in], got {:?}", w.shape()));
    }
    let rows = lead.iter().product::<usize>().max(1);
    let flat = if x.ndim() == 2 { x.clone() } else { x.reshape(&[rows, d_in])? };
    let mut y = bmm(&flat, w, false, true)?;
    if let Some(b) = bias {
        y = super::ops::add_trailing(&y, b)?;
    }
    if x.ndim() == 2 {
        return Ok(y);
    }
    let mut shape = lead.to_vec();
    shape.push(w.shape()[0]);
    y.reshape(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transpose_flags_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = gemm(&a, &b, 2, 3, 2, false, false);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        let at = transpose(&a, 2, 3);
        let bt = transpose(&b, 3, 2);
        assert_eq!(gemm(&at, &b, 2, 3, 2, true, false), c);
        assert_eq!(gemm(&a, &bt, 2, 3, 2, false, true), c);
        assert_eq!(gemm(&at, &bt, 2, 3, 2, true, true), c);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matmul(&a, &b).is_err());
    }
}
