//! Elementwise, reduction and shape operations.

use crate::error::{dim_err, Error, Result};

use super::tensor::{numel, Tensor};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn unary<F, D>(x: &Tensor, name: &'static str, f: F, df: D) -> Result<Tensor>
where
    F: Fn(f32) -> f32,
    D: Fn(f32, f32) -> f32 + Send + Sync + 'static,
{
    let data: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        name,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, out, p| {
            let xin = p[0].data();
            let dx = g.iter().zip(xin).zip(out).map(|((&g, &x), &y)| g * df(x, y)).collect();
            vec![Some(dx)]
        }),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::from_op(
        "sub",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, p| {
            let (a, b) = (p[0].data(), p[1].data());
            let da = g.iter().zip(b).map(|(g, b)| g * b).collect();
            let db = g.iter().zip(a).map(|(g, a)| g * a).collect();
            vec![Some(da), Some(db)]
        }),
    )
}

pub fn scale(x: &Tensor, s: f32) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v * s).collect();
    Tensor::from_op(
        "scale",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * s).collect())]),
    )
}

pub fn add_scalar(x: &Tensor, c: f32) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v + c).collect();
    Tensor::from_op("add_scalar", x.shape().to_vec(), data, vec![x.clone()], Box::new(|g, _, _| vec![Some(g.to_vec())]))
}

/// Number of elements covered by a parameter broadcast over the trailing
/// axes of `x`.
fn trailing_extent(x: &Tensor, p: &Tensor, op: &str) -> Result<usize> {
    let pn = p.numel();
    let mut acc = 1;
    for &d in x.shape().iter().rev() {
        acc *= d;
        if acc == pn {
            return Ok(pn);
        }
        if acc > pn {
            break;
        }
    }
    dim_err(format!("{op}: {:?} does not broadcast over trailing axes of {:?}", p.shape(), x.shape()))
}

/// `x + b` with `b` covering the trailing axes of `x`.
pub fn add_trailing(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = trailing_extent(x, b, "add_trailing")?;
    let bd = b.data();
    let data = x.data().chunks_exact(n).flat_map(|row| row.iter().zip(bd).map(|(x, b)| x + b)).collect();
    Tensor::from_op(
        "add_trailing",
        x.shape().to_vec(),
        data,
        vec![x.clone(), b.clone()],
        Box::new(move |g, _, _| {
            let mut db = vec![0.0; n];
            for row in g.chunks_exact(n) {
                db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
            }
            vec![Some(g.to_vec()), Some(db)]
        }),
    )
}

/// `x * s` with `s` covering the trailing axes of `x`.
pub fn mul_trailing(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let n = trailing_extent(x, s, "mul_trailing")?;
    let sd = s.data();
    let data = x.data().chunks_exact(n).flat_map(|row| row.iter().zip(sd).map(|(x, s)| x * s)).collect();
    Tensor::from_op(
        "mul_trailing",
        x.shape().to_vec(),
        data,
        vec![x.clone(), s.clone()],
        Box::new(move |g, _, p| {
            let (x, s) = (p[0].data(), p[1].data());
            let mut ds = vec![0.0; n];
            let mut dx = Vec::with_capacity(g.len());
            for (grow, xrow) in g.chunks_exact(n).zip(x.chunks_exact(n)) {
                for i in 0..n {
                    ds[i] += grow[i] * xrow[i];
                    dx.push(grow[i] * s[i]);
                }
            }
            vec![Some(dx), Some(ds)]
        }),
    )
}

pub fn abs(x: &Tensor) -> Result<Tensor> {
    unary(x, "abs", f32::abs, |x, _| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary(x, "sigmoid", sigmoid_f32, |_, y| y * (1.0 - y))
}

pub(crate) fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    let n = x.numel();
    Tensor::from_op(
        "sum_all",
        vec![1],
        vec![s as f32],
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    Tensor::from_op(
        "mean_all",
        vec![1],
        vec![(s / n as f64) as f32],
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(vec![g[0] / n as f32; n])]),
    )
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(x: &Tensor, axis: usize, op: &str) -> Result<()> {
    if axis >= x.ndim() {
        return dim_err(format!("{op}: axis {axis} out of range for {:?}", x.shape()));
    }
    Ok(())
}

/// `len` entries of `x` along `axis`, starting at `start`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis(x, axis, "narrow")?;
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    if len == 0 || start + len > extent {
        return dim_err(format!("narrow: [{start}, {}) outside extent {extent}", start + len));
    }
    let src = x.data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        data.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_op(
        "narrow",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }),
    )
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
    check_axis(first, axis, "concat")?;
    for x in xs {
        let ok = x.ndim() == first.ndim()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return dim_err(format!("concat: {:?} vs {:?} on axis {axis}", x.shape(), first.shape()));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let extents: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (x, &e) in xs.iter().zip(&extents) {
            data.extend_from_slice(&x.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::from_op(
        "concat",
        shape,
        data,
        xs.to_vec(),
        Box::new(move |g, _, _| {
            let mut grads: Vec<Vec<f32>> = extents.iter().map(|e| Vec::with_capacity(outer * e * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (dg, &e) in grads.iter_mut().zip(&extents) {
                    dg.extend_from_slice(&g[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    )
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(src: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    let last = nd - 1;
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    while out.len() < n {
        let s = step[last];
        for j in 0..out_shape[last] {
            out.push(src[base + j * s]);
        }
        // advance the odometer over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return dim_err(format!("permute: {perm:?} is not a permutation of {nd} axes"));
    }
    let (shape, data) = permute_data(x.data(), x.shape(), perm);
    let mut inverse = vec![0; nd];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let out_shape = shape.clone();
    Tensor::from_op(
        "permute",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(permute_data(g, &out_shape, &inverse).1)]),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample.
    Reflect,
}

/// Source index for position `p` of a signal of length `len` padded on the
/// left by `before`; `None` for zero padding outside the signal.
pub(crate) fn pad_source(p: usize, before: usize, len: usize, mode: PadMode) -> Option<usize> {
    let i = p as isize - before as isize;
    if i >= 0 && (i as usize) < len {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let n = len as isize;
            let r = if i < 0 { -i } else { 2 * (n - 1) - i };
            Some(r as usize)
        }
    }
}

/// Pads `x` along `axis`.
pub fn pad(x: &Tensor, axis: usize, before: usize, after: usize, mode: PadMode) -> Result<Tensor> {
    check_axis(x, axis, "pad")?;
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    if mode == PadMode::Reflect && (before >= extent || after >= extent) {
        return dim_err(format!("pad: reflect padding ({before}, {after}) needs more than {extent} samples"));
    }
    let out_extent = extent + before + after;
    let map: Vec<Option<usize>> = (0..out_extent).map(|p| pad_source(p, before, extent, mode)).collect();
    let src = x.data();
    let mut data = vec![0.0; outer * out_extent * inner];
    for o in 0..outer {
        for (p, m) in map.iter().enumerate() {
            if let Some(s) = m {
                let dst = (o * out_extent + p) * inner;
                let from = (o * extent + s) * inner;
                data[dst..dst + inner].copy_from_slice(&src[from..from + inner]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = out_extent;
    Tensor::from_op(
        "pad",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                for (p, m) in map.iter().enumerate() {
                    if let Some(s) = m {
                        let from = (o * out_extent + p) * inner;
                        let dst = (o * extent + s) * inner;
                        for k in 0..inner {
                            dx[dst + k] += g[from + k];
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}
