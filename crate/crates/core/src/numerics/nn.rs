//! Softmax, normalization and activations.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};

use super::ops::{sigmoid_f32, split_axis};
use super::tensor::Tensor;

/// Row-major `[rows, cols]` keep-mask applied to the last two axes of a
/// softmax input (broadcast over any leading axes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl KeepMask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return dim_err(format!("mask of {rows}x{cols} needs {} flags, got {}", rows * cols, keep.len()));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, keep: vec![true; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.keep[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }
}

/// Numerically stable softmax along `axis`. With a mask (only valid on the
/// last axis), removed entries are exactly zero and the kept ones sum to 1.
pub fn softmax(x: &Tensor, axis: usize, mask: Option<&KeepMask>) -> Result<Tensor> {
    if axis >= x.ndim() {
        return dim_err(format!("softmax: axis {axis} out of range for {:?}", x.shape()));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    if let Some(m) = mask {
        let nd = x.ndim();
        if axis != nd - 1 || nd < 2 || m.rows != x.shape()[nd - 2] || m.cols != n {
            return dim_err(format!(
                "softmax: {}x{} mask does not cover the last two axes of {:?}",
                m.rows,
                m.cols,
                x.shape()
            ));
        }
        let mrows = m.rows;
        if let Some(r) = (0..mrows).find(|&r| !m.row(r).iter().any(|&k| k)) {
            return Err(Error::DegenerateRow { row: r });
        }
    }
    let src = x.data();
    let mut data = vec![0.0f32; src.len()];
    let row_of = |o: usize| mask.map(|m| m.row(o % m.rows));
    if inner == 1 {
        let work = |(o, out): (usize, &mut [f32])| {
            let row = &src[o * n..(o + 1) * n];
            let keep = row_of(o);
            let kept = |j: usize| keep.is_none_or(|k| k[j]);
            let mx = (0..n).filter(|&j| kept(j)).map(|j| row[j]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..n {
                if kept(j) {
                    let e = (row[j] - mx).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            let inv = 1.0 / sum;
            out.iter_mut().for_each(|v| *v *= inv);
        };
        if src.len() >= 1 << 14 {
            data.par_chunks_mut(n).enumerate().for_each(work);
        } else {
            data.chunks_mut(n).enumerate().for_each(work);
        }
    } else {
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| src[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[at(j)] /= sum;
                }
            }
        }
    }
    Tensor::from_op(
        "softmax",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, y, _| {
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dotp: f32 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dotp);
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Which elements share normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxes {
    /// Each row of the last axis on its own (per token).
    Last,
    /// The last two axes together (all tokens of a sequence jointly),
    /// separately for each leading index.
    All,
}

/// Normalizes to zero mean / unit variance over `axes`, then applies the
/// per-channel affine `gamma`, `beta` (both sized like the last axis).
pub fn layer_norm(x: &Tensor, axes: NormAxes, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| Error::Dimension("layer_norm of a scalar".into()))?;
    if gamma.numel() != d || beta.numel() != d {
        return dim_err(format!(
            "layer_norm: gamma/beta sizes {}/{} do not match last axis {d}",
            gamma.numel(),
            beta.numel()
        ));
    }
    let group = match axes {
        NormAxes::Last => d,
        NormAxes::All if x.ndim() >= 2 => d * x.shape()[x.ndim() - 2],
        NormAxes::All => d,
    };
    let src = x.data();
    let groups = src.len() / group;
    let mut xhat = vec![0.0f32; src.len()];
    let mut inv_std = vec![0.0f32; groups];
    for (gi, (chunk, out)) in src.chunks_exact(group).zip(xhat.chunks_exact_mut(group)).enumerate() {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / group as f64;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / group as f64;
        let istd = 1.0 / (var + eps as f64).sqrt();
        inv_std[gi] = istd as f32;
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = ((v as f64 - mean) * istd) as f32;
        }
    }
    let (gd, bd) = (gamma.data(), beta.data());
    let data: Vec<f32> = xhat.iter().enumerate().map(|(i, &h)| h * gd[i % d] + bd[i % d]).collect();
    Tensor::from_op(
        "layer_norm",
        x.shape().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, p| {
            let gd = p[1].data();
            let mut dgamma = vec![0.0f32; d];
            let mut dbeta = vec![0.0f32; d];
            for (i, (&gv, &h)) in g.iter().zip(&xhat).enumerate() {
                dgamma[i % d] += gv * h;
                dbeta[i % d] += gv;
            }
            let dx = p[0].requires_grad().then(|| {
                let mut dx = vec![0.0f32; g.len()];
                for gi in 0..groups {
                    let r = gi * group..(gi + 1) * group;
                    let dxhat: Vec<f32> = r.clone().map(|i| g[i] * gd[i % d]).collect();
                    let m1 = dxhat.iter().map(|&v| v as f64).sum::<f64>() / group as f64;
                    let m2 =
                        dxhat.iter().zip(&xhat[r.clone()]).map(|(&a, &b)| (a * b) as f64).sum::<f64>() / group as f64;
                    for (k, i) in r.enumerate() {
                        dx[i] = inv_std[gi] * (dxhat[k] - m1 as f32 - xhat[i] * m2 as f32);
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        }),
    )
}

/// Standard normal CDF.
pub(crate) fn phi(x: f32) -> f32 {
    0.5 * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2) as f32)
}

/// `x·Φ(x)` with the exact Gaussian CDF.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| v * phi(v)).collect();
    Tensor::from_op(
        "gelu",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|g, _, p| {
            let inv_sqrt_2pi = 1.0 / (2.0 * std::f32::consts::PI).sqrt();
            let dx = g
                .iter()
                .zip(p[0].data())
                .map(|(&g, &x)| g * (phi(x) + x * inv_sqrt_2pi * (-0.5 * x * x).exp()))
                .collect();
            vec![Some(dx)]
        }),
    )
}

/// Gated linear unit over `axis`: first half times sigmoid of second half.
pub fn glu(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return dim_err(format!("glu: axis {axis} out of range for {:?}", x.shape()));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    if n % 2 != 0 {
        return dim_err(format!("glu needs an even channel count, got {n}"));
    }
    let half = n / 2;
    let src = x.data();
    let mut data = Vec::with_capacity(src.len() / 2);
    for o in 0..outer {
        let a = &src[o * n * inner..(o * n + half) * inner];
        let b = &src[(o * n + half) * inner..(o + 1) * n * inner];
        data.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid_f32(b)));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = half;
    Tensor::from_op(
        "glu",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _, p| {
            let src = p[0].data();
            let mut dx = vec![0.0; src.len()];
            let hs = half * inner;
            for o in 0..outer {
                let base = o * n * inner;
                for k in 0..hs {
                    let (a, b) = (src[base + k], src[base + hs + k]);
                    let s = sigmoid_f32(b);
                    let gv = g[o * hs + k];
                    dx[base + k] = gv * s;
                    dx[base + hs + k] = gv * a * s * (1.0 - s);
                }
            }
            vec![Some(dx)]
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    /// Gate over the given channel axis.
    Glu {
        axis: usize,
    },
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Gelu => gelu(x),
        Activation::Glu { axis } => glu(x, axis),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_constant_is_uniform() {
        let x = Tensor::new(&[3], vec![4.2; 3]).unwrap();
        let y = softmax(&x, 0, None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_analytic_pair() {
        let x = Tensor::new(&[2], vec![0.0, 2f32.ln()]).unwrap();
        let y = softmax(&x, 0, None).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn masked_softmax_matches_dense_subset() {
        let x = Tensor::new(&[1, 3], vec![5.0, 1.0, 9.0]).unwrap();
        let mask = KeepMask::new(1, 3, vec![true, false, true]).unwrap();
        let y = softmax(&x, 1, Some(&mask)).unwrap();
        let (a, c) = (5f64.exp(), 9f64.exp());
        let expect = [a / (a + c), 0.0, c / (a + c)];
        for (v, e) in y.data().iter().zip(expect) {
            assert!((*v as f64 - e).abs() < 1e-7);
        }
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let x = Tensor::zeros(&[2, 2]);
        let mask = KeepMask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(matches!(softmax(&x, 1, Some(&mask)), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let y = softmax(&x, 0, None).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-7);
        assert!((y.data()[1] + y.data()[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_and_pair() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&Tensor::full(&[2, 4], 3.0), NormAxes::Last, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::new(&[2], vec![1.0, 3.0]).unwrap(), NormAxes::Last, &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn gelu_at_zero_and_glu_gate() {
        let y = gelu(&Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[0.0]);
        let x = Tensor::new(&[4, 1], vec![2.0, -6.0, 0.0, 0.0]).unwrap();
        let y = glu(&x, 0).unwrap();
        assert_eq!(y.data(), &[1.0, -3.0]);
        assert!(glu(&Tensor::zeros(&[3, 2]), 0).is_err());
    }
}
