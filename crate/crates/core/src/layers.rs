//! Parameterized building blocks and named-parameter traversal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{self as nx, NormAxes, Tensor};

/// Named traversal over trainable tensors. Names are dot-separated paths.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

impl<T: Params> Params for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Params`] for a struct by listing its tensor fields,
/// optional tensor fields, child modules and vectors of child modules.
macro_rules! impl_params {
    ($ty:ty { $($kind:ident $field:ident),* $(,)? }) => {
        impl $crate::layers::Params for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::numerics::Tensor)) {
                $( impl_params!(@visit $kind self.$field, prefix, stringify!($field), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::numerics::Tensor)) {
                $( impl_params!(@visit_mut $kind self.$field, prefix, stringify!($field), f); )*
            }
        }
    };
    (@visit tensor $e:expr, $p:expr, $n:expr, $f:expr) => { $f($crate::layers::join($p, $n), &$e) };
    (@visit opt $e:expr, $p:expr, $n:expr, $f:expr) => {
        if let Some(t) = &$e { $f($crate::layers::join($p, $n), t) }
    };
    (@visit module $e:expr, $p:expr, $n:expr, $f:expr) => { $e.visit(&$crate::layers::join($p, $n), $f) };
    (@visit modules $e:expr, $p:expr, $n:expr, $f:expr) => {
        for (i, m) in $e.iter().enumerate() { m.visit(&$crate::layers::join($p, &format!("{}.{i}", $n)), $f) }
    };
    (@visit_mut tensor $e:expr, $p:expr, $n:expr, $f:expr) => { $f($crate::layers::join($p, $n), &mut $e) };
    (@visit_mut opt $e:expr, $p:expr, $n:expr, $f:expr) => {
        if let Some(t) = &mut $e { $f($crate::layers::join($p, $n), t) }
    };
    (@visit_mut module $e:expr, $p:expr, $n:expr, $f:expr) => { $e.visit_mut(&$crate::layers::join($p, $n), $f) };
    (@visit_mut modules $e:expr, $p:expr, $n:expr, $f:expr) => {
        for (i, m) in $e.iter_mut().enumerate() { m.visit_mut(&$crate::layers::join($p, &format!("{}.{i}", $n)), $f) }
    };
}
pub(crate) use impl_params;

/// Uniform `[-bound, bound]` parameter.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::param(shape, data).expect("non-empty parameter shape")
}

pub(crate) fn constant(shape: &[usize], value: f32) -> Tensor {
    Tensor::full(shape, value).with_requires_grad(true)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}
impl_params!(Linear { tensor weight, opt bias });

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Self { weight: uniform(rng, &[d_out, d_in], bound), bias: Some(uniform(rng, &[d_out], bound)) }
    }

    pub fn without_bias(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Self { weight: uniform(rng, &[d_out, d_in], bound), bias: None }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nx::linear(x, &self.weight, self.bias.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub axes: NormAxes,
}
impl_params!(LayerNorm { tensor gamma, tensor beta });

impl LayerNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(dim: usize, axes: NormAxes) -> Self {
        Self { gamma: constant(&[dim], 1.0), beta: constant(&[dim], 0.0), axes }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nx::layer_norm(x, self.axes, &self.gamma, &self.beta, Self::EPS)
    }
}

/// 1-D convolution with weight `[out, in, kernel]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}
impl_params!(Conv1d { tensor weight, opt bias });

impl Conv1d {
    /// He-uniform weights (variance `2 / fan_in`).
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let fan_in = (c_in * kernel) as f32;
        Self {
            weight: uniform(rng, &[c_out, c_in, kernel], (6.0 / fan_in).sqrt()),
            bias: Some(uniform(rng, &[c_out], 1.0 / fan_in.sqrt())),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nx::conv1d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

/// Transposed 1-D convolution with weight `[in, out, kernel]`; each output
/// sample sees `in·kernel/stride` weights, which sets the He-uniform bound.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}
impl_params!(ConvTranspose1d { tensor weight, opt bias });

impl ConvTranspose1d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (c_in * kernel / stride).max(1) as f32;
        Self {
            weight: uniform(rng, &[c_in, c_out, kernel], (6.0 / fan_in).sqrt()),
            bias: bias.then(|| uniform(rng, &[c_out], 1.0 / fan_in.sqrt())),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nx::conv_transpose1d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}
