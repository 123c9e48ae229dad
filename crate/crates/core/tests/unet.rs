mod common;

use common::{model_l1_fd, randn, rng};
use htdemucs::dsp::AudioClip;
use htdemucs::layers::Params;
use htdemucs::numerics::{self as nx, Tensor};
use htdemucs::transformer::TransformerConfig;
use htdemucs::unet::{build_model, count_params, model_forward, ModelConfig};
use htdemucs::Error;

fn toy(depth: usize) -> ModelConfig {
    ModelConfig {
        channels: 4,
        sample_rate: 8000,
        n_fft: 512,
        hop: 128,
        transformer: TransformerConfig { dim: 16, heads: 2, depth, layer_scale_init: 0.5, ..Default::default() },
        ..Default::default()
    }
}

fn encoder_block(c_in: usize, c: usize) -> usize {
    c_in * c * 8 + c + 2 * c * c + 2 * c
}

fn decoder_block(c: usize, c_out: usize, bias: bool) -> usize {
    6 * c * c + 2 * c + c * c_out * 8 + if bias { c_out } else { 0 }
}

fn branch(c_in: usize, c_out: usize) -> usize {
    let widths = [4, 8, 16, 32];
    let mut n = 0;
    for l in 0..4 {
        let prev = if l == 0 { c_in } else { widths[l - 1] };
        n += encoder_block(prev, widths[l]);
        let out = if l == 0 { c_out } else { widths[l - 1] };
        n += decoder_block(widths[l], out, l != 0);
    }
    n
}

#[test]
fn toy_param_count_matches_closed_form() {
    let d = 16;
    let projections = 2 * (32 * d + d) + 2 * (d * 32 + 32);
    let self_layer = 12 * d * d + 16 * d;
    let cross_layer = self_layer + 2 * d;
    let depth1 = branch(2, 8) + branch(4, 16) + projections + 2 * self_layer;
    assert_eq!(count_params(&build_model(&toy(1), 0).unwrap()), depth1);
    let depth2 = depth1 + 2 * cross_layer;
    assert_eq!(count_params(&build_model(&toy(2), 0).unwrap()), depth2);
}

#[test]
fn full_size_anchors_within_tolerance() {
    for (depth, dim, target) in [(5, 384, 26.9e6), (7, 384, 34.0e6), (5, 512, 41.4e6)] {
        let cfg =
            ModelConfig { transformer: TransformerConfig { depth, dim, ..Default::default() }, ..Default::default() };
        let n = count_params(&build_model(&cfg, 0).unwrap()) as f64;
        assert!((n / target - 1.0).abs() <= 0.15, "depth {depth} dim {dim}: {n}");
    }
}

#[test]
fn output_shape_and_length_fidelity() {
    let model = build_model(&toy(2), 3).unwrap();
    let mut r = rng(4);
    for len in [100, 257, 4000, 8000, 8191, 20_000, 97_600] {
        let x = randn(&mut r, &[1, 2, len]);
        let y = nx::no_grad(|| model.forward(&x).unwrap());
        assert_eq!(y.shape(), &[1, 4, 2, len]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
    let x = randn(&mut r, &[3, 2, 1000]);
    assert_eq!(nx::no_grad(|| model.forward(&x).unwrap()).shape(), &[3, 4, 2, 1000]);
}

#[test]
fn batch_items_are_independent() {
    let model = build_model(&toy(2), 5).unwrap();
    let mut r = rng(6);
    let a = randn(&mut r, &[1, 2, 3000]);
    let b = randn(&mut r, &[1, 2, 3000]);
    let both = nx::concat(&[a.clone(), b.clone()], 0).unwrap();
    let y = nx::no_grad(|| model.forward(&both).unwrap());
    let ya = nx::no_grad(|| model.forward(&a).unwrap());
    let yb = nx::no_grad(|| model.forward(&b).unwrap());
    let half = ya.numel();
    for (u, v) in y.data()[..half].iter().zip(ya.data()).chain(y.data()[half..].iter().zip(yb.data())) {
        assert!((u - v).abs() < 1e-4, "{u} vs {v}");
    }
}

#[test]
fn silence_maps_to_silence() {
    let model = build_model(&toy(2), 7).unwrap();
    let clip = AudioClip::silence(2, 8000, 8000).unwrap();
    let y = nx::no_grad(|| model_forward(&model, &clip).unwrap());
    assert_eq!(y.shape(), &[4, 2, 8000]);
    assert!(y.data().iter().all(|v| v.abs() < 1e-2));
}

#[test]
fn output_scales_with_input_gain() {
    let model = build_model(&toy(2), 8).unwrap();
    let mut r = rng(9);
    let x = randn(&mut r, &[1, 2, 4000]);
    let y1 = nx::no_grad(|| model.forward(&x).unwrap());
    let y2 = nx::no_grad(|| model.forward(&nx::scale(&x, 2.0).unwrap()).unwrap());
    for (a, b) in y1.data().iter().zip(y2.data()) {
        assert!((2.0 * a - b).abs() < 1e-3 * (1.0 + b.abs()), "{a} {b}");
    }
}

#[test]
fn sample_rate_mismatch_is_format_error() {
    let model = build_model(&toy(1), 0).unwrap();
    let clip = AudioClip::silence(2, 1000, 44_100).unwrap();
    assert!(matches!(model_forward(&model, &clip), Err(Error::Format(_))));
    let mono = Tensor::zeros(&[1, 1, 1000]);
    assert!(matches!(model.forward(&mono), Err(Error::Format(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { sources: vec![], ..toy(1) },
        ModelConfig { audio_channels: 3, ..toy(1) },
        ModelConfig { kernel: 7, ..toy(1) },
        ModelConfig { n_fft: 500, ..toy(1) },
        ModelConfig { n_fft: 256, ..toy(1) },
        ModelConfig { transformer: TransformerConfig { dim: 18, heads: 4, ..Default::default() }, ..toy(1) },
    ];
    for cfg in bad {
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn gradient_reaches_both_branch_inputs() {
    let model = build_model(&toy(2), 10).unwrap();
    let mut r = rng(11);
    let x = randn(&mut r, &[1, 2, 4000]);
    let y = model.forward(&x).unwrap();
    nx::mean_all(&nx::abs(&y).unwrap()).unwrap().backward().unwrap();
    for name in ["time_encoder.0.conv.weight", "freq_encoder.0.conv.weight", "transformer.spectral.0.attn.value.weight"]
    {
        let (_, p) = model.named_params().into_iter().find(|(n, _)| n == name).unwrap();
        let g = p.grad().unwrap();
        assert!(g.iter().any(|v| *v != 0.0), "{name} got no gradient");
    }
}

#[test]
fn seeded_builds_are_identical() {
    let a = build_model(&toy(2), 12).unwrap();
    let b = build_model(&toy(2), 12).unwrap();
    let c = build_model(&toy(2), 13).unwrap();
    let flat = |m: &htdemucs::unet::Model| -> Vec<f32> {
        m.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn l1_gradient_matches_finite_differences_on_one_percent() {
    let model = build_model(&toy(2), 1).unwrap();
    let mut r = rng(14);
    let x = nx::scale(&randn(&mut r, &[1, 2, 8000]), 0.5).unwrap();
    let n = count_params(&model).div_ceil(100);
    let samples = model_l1_fd(&model, &x, n, 15, 1e-3);
    assert!(samples.len() >= 20);
    let worst = samples.iter().max_by(|a, b| a.rel_err().total_cmp(&b.rel_err())).unwrap();
    assert!(worst.rel_err() < 2e-2, "{worst:?}");
}
