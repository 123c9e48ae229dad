#![allow(dead_code)]

use htdemucs::layers::Params;
use htdemucs::numerics::{self, Tensor};
use htdemucs::unet::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn randp(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape).with_requires_grad(true)
}

/// `Σ out ⊙ probe` as an f64, the scalar used by finite differences.
pub fn probe_value(out: &Tensor, probe: &[f32]) -> f64 {
    out.data().iter().zip(probe).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Max-norm relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}

/// Checks the tape gradient of `f` against central differences for every
/// element of every input. Returns the worst per-input relative error.
pub fn fd_check<F>(f: F, inputs: &[Tensor], probe_seed: u64, h: f32) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    fd_errors(f, inputs, probe_seed, h).into_iter().fold(0.0, f64::max)
}

/// Per-input relative errors of [`fd_check`]; inputs without gradients report 0.
pub fn fd_errors<F>(f: F, inputs: &[Tensor], probe_seed: u64, h: f32) -> Vec<f64>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    for x in inputs {
        x.zero_grad();
    }
    let out = f(inputs);
    let mut r = rng(probe_seed);
    let probe: Vec<f32> = (0..out.numel()).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    let probe_t = Tensor::new(out.shape(), probe.clone()).unwrap();
    let loss = numerics::sum_all(&numerics::mul(&out, &probe_t).unwrap()).unwrap();
    loss.backward().unwrap();

    let mut errors = vec![0.0f64; inputs.len()];
    for (i, x) in inputs.iter().enumerate() {
        if !x.requires_grad() {
            continue;
        }
        let analytic: Vec<f64> = x.grad().expect("gradient reached input").iter().map(|&v| v as f64).collect();
        let mut numeric = vec![0.0f64; x.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f32| {
                let mut shifted: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
                let mut xd = x.detach();
                xd.data_mut()[j] += delta;
                shifted[i] = xd;
                numerics::no_grad(|| probe_value(&f(&shifted), &probe))
            };
            *slot = (eval(h) - eval(-h)) / (2.0 * h as f64);
        }
        errors[i] = rel_err(&analytic, &numeric, 1e-2);
    }
    errors
}

/// Derivative resolution of a mean loss over an f32 forward pass at
/// `h = 1e-3`; relative errors use it as the denominator floor.
pub const MODEL_FD_FLOOR: f64 = 4e-5;

#[derive(Debug, Clone)]
pub struct FdSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdSample {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(MODEL_FD_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Mean L1 loss of `model(x)` against a target offset by ±0.5 from the
/// initial prediction, differentiated on the tape and by central differences
/// at `samples` scalars drawn uniformly over tensors, then elements.
pub fn model_l1_fd(model: &Model, x: &Tensor, samples: usize, seed: u64, h: f32) -> Vec<FdSample> {
    let mut r = rng(seed);
    let pred0 = numerics::no_grad(|| model.forward(x).unwrap());
    let target: Vec<f32> = pred0.data().iter().map(|p| p + if r.gen_bool(0.5) { 0.5 } else { -0.5 }).collect();
    let target_t = Tensor::new(pred0.shape(), target.clone()).unwrap();

    let model = model.clone();
    let params = model.named_params();
    for (_, p) in &params {
        p.zero_grad();
    }
    let diff = numerics::sub(&model.forward(x).unwrap(), &target_t).unwrap();
    numerics::mean_all(&numerics::abs(&diff).unwrap()).unwrap().backward().unwrap();

    let loss_at = |pi: usize, j: usize, delta: f32| {
        let mut m = model.clone();
        let mut idx = 0;
        m.visit_mut("", &mut |_, t| {
            if idx == pi {
                let mut u = t.detach();
                u.data_mut()[j] += delta;
                *t = u;
            }
            idx += 1;
        });
        numerics::no_grad(|| {
            let y = m.forward(x).unwrap();
            y.data().iter().zip(&target).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / y.numel() as f64
        })
    };

    (0..samples)
        .map(|_| {
            let pi = r.gen_range(0..params.len());
            let (name, p) = &params[pi];
            let j = r.gen_range(0..p.numel());
            let analytic = p.grad().expect("parameter gradient")[j] as f64;
            let numeric = (loss_at(pi, j, h) - loss_at(pi, j, -h)) / (2.0 * h as f64);
            FdSample { name: name.clone(), index: j, analytic, numeric }
        })
        .collect()
}
