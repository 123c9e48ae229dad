mod common;

use common::{randn, rng};
use htdemucs::curation::SongStems;
use htdemucs::dsp::AudioClip;
use htdemucs::layers::Params;
use htdemucs::numerics::Tensor;
use htdemucs::trainer::{
    adam_step, adam_step_model, decode_optimizer, ema_update, encode_optimizer, evaluate_l1, finetune, l1_loss,
    mix_down, remix_batch, source_l1_loss, train, AdamConfig, AdamState, Ema, FinetuneConfig, MetricRecord, RunOutputs,
    StemDataset, TrainConfig,
};
use htdemucs::transformer::TransformerConfig;
use htdemucs::unet::{build_model, Model, ModelConfig};
use htdemucs::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn l1_matches_an_elementwise_loop() {
    let a = randn(&mut rng(1), &[2, 4, 2, 50]);
    let b = randn(&mut rng(2), &[2, 4, 2, 50]);
    assert_eq!(l1_loss(&a, &a).unwrap().item(), 0.0);
    let shifted = Tensor::new(a.shape(), a.data().iter().map(|v| v - 0.25).collect()).unwrap();
    assert!((l1_loss(&a, &shifted).unwrap().item() - 0.25).abs() < 1e-6);
    let mut naive = 0.0f64;
    for i in 0..a.numel() {
        naive += (a.data()[i] as f64 - b.data()[i] as f64).abs();
    }
    naive /= a.numel() as f64;
    assert!((l1_loss(&a, &b).unwrap().item() as f64 - naive).abs() < 1e-6);
    let c = randn(&mut rng(3), &[2, 4, 2, 49]);
    assert!(matches!(l1_loss(&a, &c), Err(Error::Dimension(_))));
}

#[test]
fn source_loss_reads_only_its_slice() {
    let pred = randn(&mut rng(4), &[3, 4, 2, 20]).with_requires_grad(true);
    let target = randn(&mut rng(5), &[3, 4, 2, 20]);
    let idx = 2;
    let item = 2 * 20;
    let mut naive = 0.0f64;
    for b in 0..3 {
        let at = (b * 4 + idx) * item;
        for k in at..at + item {
            naive += (pred.data()[k] as f64 - target.data()[k] as f64).abs();
        }
    }
    naive /= (3 * item) as f64;
    let loss = source_l1_loss(&pred, &target, idx).unwrap();
    assert!((loss.item() as f64 - naive).abs() < 1e-6);
    loss.backward().unwrap();
    let g = pred.grad().unwrap();
    for (k, &gk) in g.iter().enumerate() {
        let source = (k / item) % 4;
        if source == idx {
            assert!(gk != 0.0);
        } else {
            assert_eq!(gk, 0.0);
        }
    }
    assert!(matches!(source_l1_loss(&pred, &target, 4), Err(Error::Dimension(_))));
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let cfg = AdamConfig::default();
    let mut params = vec![vec![0.5f32, -2.0]];
    let mut state = AdamState::default();
    adam_step(&mut params, &[vec![1.0, -3.0]], &mut state, &cfg).unwrap();
    assert_eq!(state.t, 1);
    assert!((params[0][0] - (0.5 - 3e-4)).abs() < 1e-7);
    assert!((params[0][1] - (-2.0 + 3e-4)).abs() < 1e-7);
}

#[test]
fn adam_follows_a_hand_recurrence() {
    let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
    let grads = [0.3f64, -1.2, 0.7, 0.05];
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut params = vec![vec![1.0f32]];
    let mut state = AdamState::default();
    for (t, &g) in grads.iter().enumerate() {
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t as i32 + 1));
        let v_hat = v / (1.0 - 0.999f64.powi(t as i32 + 1));
        theta -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        adam_step(&mut params, &[vec![g as f32]], &mut state, &cfg).unwrap();
        assert!((params[0][0] as f64 - theta).abs() < 1e-6, "step {t}");
    }
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut params = vec![vec![0.1f32, -7.5, 3.25], vec![1e-3]];
    let before = params.clone();
    let mut state = AdamState::default();
    for _ in 0..3 {
        adam_step(&mut params, &[vec![0.0; 3], vec![0.0]], &mut state, &AdamConfig::default()).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn clipping_scales_the_gradient_before_the_moments() {
    let cfg = AdamConfig { grad_clip: Some(5.0), ..AdamConfig::default() };
    let mut params = vec![vec![0.0f32, 0.0]];
    let mut state = AdamState::default();
    let norm = adam_step(&mut params, &[vec![6.0, 8.0]], &mut state, &cfg).unwrap();
    assert!((norm - 10.0).abs() < 1e-12);
    assert!((state.m[0][0] - 0.3).abs() < 1e-6 && (state.m[0][1] - 0.4).abs() < 1e-6);
    assert!((state.v[0][0] - 0.009).abs() < 1e-6 && (state.v[0][1] - 0.016).abs() < 1e-6);
    let mut small = AdamState::default();
    adam_step(&mut [vec![0.0f32, 0.0]], &[vec![0.6, 0.8]], &mut small, &cfg).unwrap();
    assert!((small.m[0][1] - 0.08).abs() < 1e-7);
}

#[test]
fn weight_decay_is_decoupled() {
    let cfg = AdamConfig { lr: 1e-4, weight_decay: 0.05, ..AdamConfig::default() };
    let mut params = vec![vec![2.0f32]];
    adam_step(&mut params, &[vec![0.0]], &mut AdamState::default(), &cfg).unwrap();
    assert!((params[0][0] - 2.0 * (1.0 - 1e-4 * 0.05)).abs() < 1e-7);
}

#[test]
fn invalid_optimizer_settings_are_rejected() {
    for cfg in [
        AdamConfig { lr: -1.0, ..AdamConfig::default() },
        AdamConfig { beta1: 1.0, ..AdamConfig::default() },
        AdamConfig { beta2: -0.1, ..AdamConfig::default() },
        AdamConfig { grad_clip: Some(0.0), ..AdamConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
    let repitch = TrainConfig { repitch: true, ..TrainConfig::default() };
    assert!(matches!(repitch.validate(), Err(Error::Config(_))));
}

#[test]
fn ema_limits_and_recurrence() {
    let mut s = vec![1.0f32, -1.0];
    ema_update(&mut s, &[5.0, 5.0], 1.0);
    assert_eq!(s, vec![1.0, -1.0]);
    ema_update(&mut s, &[5.0, 6.0], 0.0);
    assert_eq!(s, vec![5.0, 6.0]);
    let mut shadow = vec![0.0f32];
    let mut hand = 0.0f64;
    for p in [1.0, 3.0, -2.0] {
        ema_update(&mut shadow, &[p as f32], 0.5);
        hand = 0.5 * hand + 0.5 * p;
    }
    assert_eq!(shadow[0] as f64, hand);
}

proptest! {
    #[test]
    fn ema_gap_shrinks_geometrically(start in -10.0f32..10.0, target in -10.0f32..10.0, decay in 0.0f32..0.999, n in 1usize..50) {
        let mut s = vec![start];
        for _ in 0..n {
            ema_update(&mut s, &[target], decay);
        }
        let bound = (decay as f64).powi(n as i32) * (start - target).abs() as f64;
        prop_assert!(((s[0] - target).abs() as f64) <= bound + 1e-5);
    }
}

#[test]
fn model_ema_tracks_the_parameters() {
    let model = build_model(&toy(), 3).unwrap();
    let mut ema = Ema::new(&model, 0.0);
    let mut moved = model.clone();
    moved.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += 1.0));
    ema.update(&moved);
    let copy = ema.apply(&model);
    for ((_, a), (_, b)) in copy.named_params().iter().zip(moved.named_params()) {
        assert_eq!(a.data(), b.data());
    }
}

/// Rand's slice shuffle: swap `i` with a uniform index in `0..=i`, from the end.
fn fisher_yates(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..(i + 1) as u32) as usize;
        p.swap(i, j);
    }
    p
}

#[test]
fn remix_follows_a_seeded_shuffle() {
    let (b, s, c, t) = (5, 4, 2, 6);
    let stems = randn(&mut rng(7), &[b, s, c, t]);
    let (mix, targets) = remix_batch(&stems, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(99);
    let perms: Vec<Vec<usize>> = (0..s).map(|_| fisher_yates(b, &mut oracle_rng)).collect();
    let item = c * t;
    for bi in 0..b {
        for si in 0..s {
            let got = &targets.data()[(bi * s + si) * item..][..item];
            let want = &stems.data()[(perms[si][bi] * s + si) * item..][..item];
            assert_eq!(got, want);
        }
        for k in 0..item {
            let sum = (0..s).fold(0.0f32, |acc, si| acc + targets.data()[(bi * s + si) * item + k]);
            assert_eq!(mix.data()[bi * item + k].to_bits(), sum.to_bits());
        }
    }
}

#[test]
fn remix_of_identical_items_is_the_identity() {
    let one = randn(&mut rng(8), &[1, 4, 2, 10]);
    let stems = Tensor::new(&[3, 4, 2, 10], one.data().repeat(3)).unwrap();
    let (_, targets) = remix_batch(&stems, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(targets.data(), stems.data());
}

#[test]
fn single_item_batches_pass_through() {
    let stems = randn(&mut rng(9), &[1, 4, 2, 10]);
    let (mix, targets) = remix_batch(&stems, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(targets.data(), stems.data());
    assert_eq!(mix.data(), mix_down(&stems).unwrap().data());
    assert!(matches!(remix_batch(&randn(&mut rng(9), &[4, 2, 10]), &mut rng(1)), Err(Error::Dimension(_))));
}

proptest! {
    #[test]
    fn remix_conserves_each_sources_multiset(b in 2usize..7, seed in 0u64..1000) {
        let (s, item) = (4, 3);
        let stems = randn(&mut rng(seed), &[b, s, 1, item]);
        let (_, targets) = remix_batch(&stems, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for si in 0..s {
            let key = |x: &Tensor| {
                let mut rows: Vec<Vec<u32>> =
                    (0..b).map(|bi| x.data()[(bi * s + si) * item..][..item].iter().map(|v| v.to_bits()).collect()).collect();
                rows.sort();
                rows
            };
            prop_assert_eq!(key(&targets), key(&stems));
        }
    }
}

#[test]
fn optimizer_state_round_trips() {
    let state = AdamState { t: 17, m: vec![vec![0.5, -1.0], vec![3.0]], v: vec![vec![0.25, 1.0], vec![9.0]] };
    let bytes = encode_optimizer(&state);
    assert_eq!(decode_optimizer(&bytes).unwrap(), state);
    assert!(matches!(decode_optimizer(&bytes[..bytes.len() - 4]), Err(Error::Corruption(_))));
    assert!(matches!(decode_optimizer(b"nonsense"), Err(Error::Corruption(_))));
}

fn toy() -> ModelConfig {
    ModelConfig {
        channels: 4,
        sample_rate: 8000,
        n_fft: 256,
        hop: 64,
        layers: 3,
        transformer: TransformerConfig { dim: 16, heads: 2, depth: 2, ..Default::default() },
        ..Default::default()
    }
}

/// One song whose stems are sines at 60, 220, 1000 and 3000 Hz.
fn sine_song(frames: usize, rate: u32) -> SongStems {
    let stems = [3000.0, 60.0, 1000.0, 220.0]
        .iter()
        .map(|&f: &f64| {
            let x: Vec<f32> = (0..frames)
                .map(|i| (0.3 * (2.0 * std::f64::consts::PI * f * i as f64 / rate as f64).sin()) as f32)
                .collect();
            AudioClip::from_channels(vec![x.clone(), x], rate).unwrap()
        })
        .collect();
    SongStems::new("sines".into(), toy().sources, stems).unwrap()
}

fn fixed_item_run(lr: f32, steps: usize, seed: u64) -> (Model, Model, Vec<MetricRecord>) {
    let data = StemDataset::new(&[sine_song(8000, 8000)], 8000).unwrap();
    let model = build_model(&toy(), 5).unwrap();
    let cfg = TrainConfig {
        adam: AdamConfig { lr, ..AdamConfig::default() },
        batch_size: 1,
        epochs: 1,
        batches_per_epoch: steps,
        ema_decays: vec![],
        remix: false,
        rescale: None,
        seed,
        ..TrainConfig::default()
    };
    let out = train(model.clone(), &data, &data, &cfg, &RunOutputs::default()).unwrap();
    (model, out.model, out.metrics)
}

#[test]
fn overfits_one_fixed_item() {
    let (_, _, metrics) = fixed_item_run(3e-3, 200, 0);
    let first = metrics[0].train_l1;
    let last = metrics.last().unwrap().valid_l1;
    assert!(first / last >= 10.0, "L1 {first} -> {last}");
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let (before, after, _) = fixed_item_run(0.0, 3, 0);
    for ((_, a), (_, b)) in before.named_params().iter().zip(after.named_params()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(&b));
    }
}

fn synth_sets() -> (StemDataset, StemDataset) {
    use htdemucs::synthdata::{generate_song, SynthSpec};
    let song = |s| generate_song(&SynthSpec { sample_rate: 12_000, ..SynthSpec::new(s, 2.0) }).unwrap();
    let seg = 3000;
    (StemDataset::new(&[song(1), song(2), song(3)], seg).unwrap(), StemDataset::new(&[song(9)], seg).unwrap())
}

fn synth_model() -> Model {
    build_model(&ModelConfig { sample_rate: 12_000, ..toy() }, 6).unwrap()
}

#[test]
fn identical_seeds_give_identical_curves_and_logs() {
    let (tr, va) = synth_sets();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { batch_size: 3, epochs: 2, batches_per_epoch: 3, seed: 11, ..TrainConfig::default() };
    let outs =
        RunOutputs { metrics_path: Some(dir.path().join("m.jsonl")), checkpoint_dir: Some(dir.path().join("ckpt")) };
    let a = train(synth_model(), &tr, &va, &cfg, &outs).unwrap();
    let b = train(synth_model(), &tr, &va, &cfg, &RunOutputs::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    let c = train(synth_model(), &tr, &va, &TrainConfig { seed: 12, ..cfg.clone() }, &RunOutputs::default()).unwrap();
    assert_ne!(a.metrics, c.metrics);

    let log = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    let parsed: Vec<MetricRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, a.metrics);
    assert_eq!(parsed.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 3, 6]);
    for name in ["last.weights", "last.optim", "best.weights"] {
        assert!(dir.path().join("ckpt").join(name).exists(), "{name}");
    }
    let optim = decode_optimizer(&std::fs::read(dir.path().join("ckpt/last.optim")).unwrap()).unwrap();
    assert_eq!(optim, a.optimizer);
    assert_eq!(optim.t, 6);
    let best = evaluate_l1(&a.best, &va.fixed_batches(3).unwrap(), None).unwrap();
    assert!((best - a.best_valid_l1).abs() < 1e-9, "{}", a.best_label);
}

#[test]
fn finetune_scores_only_the_target_source() {
    let (tr, va) = synth_sets();
    let defaults = FinetuneConfig::new("bass");
    assert_eq!((defaults.lr, defaults.epochs, defaults.grad_clip, defaults.weight_decay), (1e-4, 50, 5.0, 0.05));
    let cfg = FinetuneConfig { batch_size: 2, epochs: 1, batches_per_epoch: 2, ..defaults };
    let tc = cfg.train_config();
    assert!(!tc.remix && tc.rescale.is_none() && !tc.repitch);
    let out = finetune(synth_model(), &tr, &va, &cfg, &RunOutputs::default()).unwrap();
    let batches = va.fixed_batches(2).unwrap();
    let mut naive = (0.0f64, 0usize);
    for stems in &batches {
        let pred = htdemucs::numerics::no_grad(|| out.model.forward(&mix_down(stems).unwrap())).unwrap();
        let l = source_l1_loss(&pred, stems, 1).unwrap().item() as f64;
        naive = (naive.0 + l * stems.shape()[0] as f64, naive.1 + stems.shape()[0]);
    }
    let last = out.metrics.last().unwrap();
    assert!((last.valid_l1 - naive.0 / naive.1 as f64).abs() < 1e-9);
    assert!(out.metrics.iter().all(|r| r.valid_l1.is_finite() && r.lr == 1e-4));
    let wrong = FinetuneConfig::new("kazoo");
    assert!(matches!(finetune(synth_model(), &tr, &va, &wrong, &RunOutputs::default()), Err(Error::Config(_))));
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let (tr, va) = synth_sets();
    let cfg = TrainConfig {
        adam: AdamConfig { lr: 1e30, ..AdamConfig::default() },
        batch_size: 2,
        epochs: 1,
        batches_per_epoch: 5,
        ..TrainConfig::default()
    };
    match train(synth_model(), &tr, &va, &cfg, &RunOutputs::default()) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("diverged"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training did not diverge"),
    }
}

#[test]
fn manual_steps_match_the_training_loop_update() {
    let mut model = build_model(&toy(), 8).unwrap();
    let x = randn(&mut rng(10), &[1, 2, 2000]);
    let loss = l1_loss(&model.forward(&x).unwrap(), &Tensor::zeros(&[1, 4, 2, 2000])).unwrap();
    loss.backward().unwrap();
    drop(loss);
    let mut state = AdamState::default();
    let norm = adam_step_model(&mut model, &mut state, &AdamConfig::default()).unwrap();
    assert!(norm > 0.0 && state.t == 1);
    model.visit("", &mut |name, t| assert!(t.grad().is_none(), "{name} kept its gradient"));
}
