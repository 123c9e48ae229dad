//! Waveform L1 training with Adam, EMA shadows, within-batch remixing and
//! single-source fine-tuning.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::SongStems;
use crate::error::{Error, Result};
use crate::layers::Params;
use crate::numerics::{self as nx, no_grad, Tensor};
use crate::separator::save_weights;
use crate::unet::Model;

/// Mean absolute error over all elements.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!("l1 between {:?} and {:?}", pred.shape(), target.shape())));
    }
    nx::mean_all(&nx::abs(&nx::sub(pred, target)?)?)
}

/// L1 restricted to source `index` of `[batch, sources, ..]` tensors.
pub fn source_l1_loss(pred: &Tensor, target: &Tensor, index: usize) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!("l1 between {:?} and {:?}", pred.shape(), target.shape())));
    }
    if pred.ndim() < 2 || index >= pred.shape()[1] {
        return Err(Error::Dimension(format!("source {index} outside {:?}", pred.shape())));
    }
    l1_loss(&nx::narrow(pred, 1, index, 1)?, &nx::narrow(target, 1, index, 1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay: `θ ← θ − lr·wd·θ` before the moment step.
    pub weight_decay: f32,
    /// Global L2 bound on the gradient, applied before the moment updates.
    pub grad_clip: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, grad_clip: None }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("eps and grad_clip must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moments per tensor plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    fn ensure(&mut self, sizes: impl Iterator<Item = usize>) {
        if self.m.is_empty() {
            for n in sizes {
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
    }
}

/// Global L2 norm over a set of gradients.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

fn clip_factor(norm: f64, cfg: &AdamConfig) -> f32 {
    match cfg.grad_clip {
        Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
        _ => 1.0,
    }
}

/// Bias-corrected update of one tensor at step `t` (already incremented).
fn update_one(theta: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, clip: f32, cfg: &AdamConfig) {
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t as i32);
    for i in 0..theta.len() {
        let gi = g[i] * clip;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = m[i] as f64 / bc1;
        let v_hat = v[i] as f64 / bc2;
        let decayed = theta[i] - cfg.lr * cfg.weight_decay * theta[i];
        theta[i] = (decayed as f64 - cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
    }
}

/// One Adam step over flat parameter buffers. Returns the gradient norm
/// before clipping.
pub fn adam_step(params: &mut [Vec<f32>], grads: &[Vec<f32>], state: &mut AdamState, cfg: &AdamConfig) -> Result<f64> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Dimension("parameter and gradient layouts differ".into()));
    }
    state.ensure(params.iter().map(Vec::len));
    let norm = global_norm(grads);
    let clip = clip_factor(norm, cfg);
    state.t += 1;
    for (i, theta) in params.iter_mut().enumerate() {
        update_one(theta, &grads[i], &mut state.m[i], &mut state.v[i], state.t, clip, cfg);
    }
    Ok(norm)
}

/// Gradients of every parameter, zeros where none arrived.
pub fn collect_grads(model: &impl Params) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t| out.push(t.grad().unwrap_or_else(|| vec![0.0; t.numel()])));
    out
}

pub fn zero_grads(model: &impl Params) {
    model.visit("", &mut |_, t| t.zero_grad());
}

/// Applies one Adam step to `model` from its accumulated gradients and
/// clears them. Returns the gradient norm before clipping.
pub fn adam_step_model(model: &mut impl Params, state: &mut AdamState, cfg: &AdamConfig) -> Result<f64> {
    let grads = collect_grads(model);
    state.ensure(grads.iter().map(Vec::len));
    if state.m.len() != grads.len() {
        return Err(Error::Dimension("optimizer state does not match the model".into()));
    }
    let norm = global_norm(&grads);
    let clip = clip_factor(norm, cfg);
    state.t += 1;
    let t = state.t;
    let mut i = 0;
    model.visit_mut("", &mut |_, p| {
        update_one(p.data_mut(), &grads[i], &mut state.m[i], &mut state.v[i], t, clip, cfg);
        p.zero_grad();
        i += 1;
    });
    Ok(norm)
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(shadow: &mut [f32], params: &[f32], decay: f32) {
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}

/// Exponential moving average of a model's parameters.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f32,
    pub shadow: Vec<Vec<f32>>,
}

impl Ema {
    pub fn new(model: &impl Params, decay: f32) -> Self {
        let mut shadow = Vec::new();
        model.visit("", &mut |_, t| shadow.push(t.to_vec()));
        Self { decay, shadow }
    }

    pub fn update(&mut self, model: &impl Params) {
        let mut i = 0;
        model.visit("", &mut |_, t| {
            ema_update(&mut self.shadow[i], t.data(), self.decay);
            i += 1;
        });
    }

    /// Copy of `model` carrying the shadow values.
    pub fn apply<M: Params + Clone>(&self, model: &M) -> M {
        let mut out = model.clone();
        let mut i = 0;
        out.visit_mut("", &mut |_, t| {
            t.data_mut().copy_from_slice(&self.shadow[i]);
            i += 1;
        });
        out
    }
}

/// Builds mixtures from `stems[batch, sources, channels, frames]`, drawing
/// source `s` of item `b` from item `π_s(b)` with an independent shuffle per
/// source. Returns `(mixtures[batch, channels, frames], targets)`.
pub fn remix_batch(stems: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let &[b, s, c, t] = stems.shape() else {
        return Err(Error::Dimension(format!(
            "remix expects [batch, sources, channels, frames], got {:?}",
            stems.shape()
        )));
    };
    if b < 2 {
        warn!("remix needs a batch of at least 2, passing {b} item(s) through");
        return Ok((mix_down(stems)?, stems.clone()));
    }
    let item = c * t;
    let perms: Vec<Vec<usize>> = (0..s)
        .map(|_| {
            let mut p: Vec<usize> = (0..b).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    let src = stems.data();
    let mut out = Vec::with_capacity(stems.numel());
    for bi in 0..b {
        for (si, perm) in perms.iter().enumerate() {
            let from = (perm[bi] * s + si) * item;
            out.extend_from_slice(&src[from..from + item]);
        }
    }
    let targets = Tensor::new(stems.shape(), out)?;
    Ok((mix_down(&targets)?, targets))
}

/// Sum over the source axis of `[batch, sources, channels, frames]`.
pub fn mix_down(stems: &Tensor) -> Result<Tensor> {
    let &[b, s, c, t] = stems.shape() else {
        return Err(Error::Dimension(format!("expected [batch, sources, channels, frames], got {:?}", stems.shape())));
    };
    let item = c * t;
    let src = stems.data();
    let mut out = vec![0.0f32; b * item];
    for bi in 0..b {
        let dst = &mut out[bi * item..(bi + 1) * item];
        for si in 0..s {
            let from = (bi * s + si) * item;
            dst.iter_mut().zip(&src[from..from + item]).for_each(|(d, &v)| *d += v);
        }
    }
    Tensor::new(&[b, c, t], out)
}

/// Songs held as `[sources, channels, frames]` tensors, sampled as
/// fixed-length excerpts.
#[derive(Debug, Clone)]
pub struct StemDataset {
    pub sources: Vec<String>,
    pub sample_rate: u32,
    pub segment_frames: usize,
    songs: Vec<Tensor>,
}

impl StemDataset {
    pub fn new(songs: &[SongStems], segment_frames: usize) -> Result<Self> {
        let first = songs.first().ok_or_else(|| Error::Data("dataset has no songs".into()))?;
        if segment_frames == 0 {
            return Err(Error::Config("segment length must be positive".into()));
        }
        let mut tensors = Vec::with_capacity(songs.len());
        for song in songs {
            if song.sources != first.sources || song.sample_rate() != first.sample_rate() {
                return Err(Error::Data(format!("{}: sources or rate differ from {}", song.song_id, first.song_id)));
            }
            if song.frames() < segment_frames {
                return Err(Error::Data(format!(
                    "{}: {} frames, segment needs {segment_frames}",
                    song.song_id,
                    song.frames()
                )));
            }
            let data: Vec<f32> = song.stems.iter().flat_map(|s| s.samples().data().iter().copied()).collect();
            tensors.push(Tensor::new(&[song.sources.len(), song.stems[0].channels(), song.frames()], data)?);
        }
        Ok(Self { sources: first.sources.clone(), sample_rate: first.sample_rate(), segment_frames, songs: tensors })
    }

    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    fn excerpt(&self, song: usize, start: usize) -> Vec<f32> {
        let x = &self.songs[song];
        let (s, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Vec::with_capacity(s * c * self.segment_frames);
        for row in 0..s * c {
            out.extend_from_slice(&x.data()[row * t + start..row * t + start + self.segment_frames]);
        }
        out
    }

    fn item_shape(&self, batch: usize) -> [usize; 4] {
        let x = &self.songs[0];
        [batch, x.shape()[0], x.shape()[1], self.segment_frames]
    }

    /// Random excerpts `[batch, sources, channels, segment]`.
    pub fn sample_batch(&self, batch: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let mut data = Vec::new();
        for _ in 0..batch {
            let song = rng.gen_range(0..self.songs.len());
            let start = rng.gen_range(0..=self.songs[song].shape()[2] - self.segment_frames);
            data.extend(self.excerpt(song, start));
        }
        Tensor::new(&self.item_shape(batch), data)
    }

    /// Every non-overlapping excerpt of every song, in batches.
    pub fn fixed_batches(&self, batch: usize) -> Result<Vec<Tensor>> {
        let mut items = Vec::new();
        for (song, x) in self.songs.iter().enumerate() {
            for k in 0..x.shape()[2] / self.segment_frames {
                items.push(self.excerpt(song, k * self.segment_frames));
            }
        }
        items.chunks(batch.max(1)).map(|group| Tensor::new(&self.item_shape(group.len()), group.concat())).collect()
    }
}

/// Per-stem gain applied before remixing.
fn rescale(stems: &Tensor, (lo, hi): (f32, f32), rng: &mut impl Rng) -> Result<Tensor> {
    let shape = stems.shape();
    let item = shape[2] * shape[3];
    let mut data = stems.to_vec();
    for chunk in data.chunks_exact_mut(item) {
        let g = rng.gen_range(lo..=hi);
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub ema_decays: Vec<f32>,
    pub remix: bool,
    /// Uniform per-stem gain range, `None` to disable.
    pub rescale: Option<(f32, f32)>,
    /// Pitch/tempo augmentation is not implemented; enabling it is a config error.
    pub repitch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 1200,
            batches_per_epoch: 800,
            ema_decays: vec![0.999],
            remix: true,
            rescale: Some((0.25, 1.25)),
            repitch: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("batch_size, epochs and batches_per_epoch must be positive".into()));
        }
        if self.ema_decays.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::Config("EMA decays must lie in [0, 1]".into()));
        }
        if self.rescale.is_some_and(|(lo, hi)| !(lo > 0.0 && lo <= hi)) {
            return Err(Error::Config("rescale range must satisfy 0 < lo ≤ hi".into()));
        }
        if self.repitch {
            return Err(Error::Config("repitch augmentation is not supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub target_source: String,
    pub lr: f32,
    pub epochs: usize,
    pub grad_clip: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub ema_decays: Vec<f32>,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(target_source: impl Into<String>) -> Self {
        Self {
            target_source: target_source.into(),
            lr: 1e-4,
            epochs: 50,
            grad_clip: 5.0,
            weight_decay: 0.05,
            batch_size: 32,
            batches_per_epoch: 800,
            ema_decays: vec![0.999],
            seed: 0,
        }
    }

    /// Equivalent training schedule: clipped, decayed, no augmentation.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                grad_clip: Some(self.grad_clip),
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            batches_per_epoch: self.batches_per_epoch,
            ema_decays: self.ema_decays.clone(),
            remix: false,
            rescale: None,
            repitch: false,
            seed: self.seed,
        }
    }
}

/// One line of the metrics log. `train_l1` is the mean over the epoch's
/// steps (the single step's loss on the step-1 record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_l1: f64,
    pub valid_l1: f64,
    pub lr: f32,
    pub grad_norm: f64,
    /// Validation L1 of each EMA shadow, in `ema_decays` order.
    pub ema_valid_l1: Vec<f64>,
}

/// Where a run writes its metrics log and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Lowest-validation snapshot among the raw weights and EMA shadows.
    pub best: Model,
    pub best_valid_l1: f64,
    pub best_label: String,
    pub metrics: Vec<MetricRecord>,
    pub optimizer: AdamState,
}

fn loss_for(pred: &Tensor, target: &Tensor, source: Option<usize>) -> Result<Tensor> {
    match source {
        Some(i) => source_l1_loss(pred, target, i),
        None => l1_loss(pred, target),
    }
}

/// Mean loss over the fixed validation batches, weighted by item count.
pub fn evaluate_l1(model: &Model, batches: &[Tensor], source: Option<usize>) -> Result<f64> {
    no_grad(|| {
        let (mut sum, mut count) = (0.0f64, 0usize);
        for stems in batches {
            let pred = model.forward(&mix_down(stems)?)?;
            let n = stems.shape()[0];
            sum += loss_for(&pred, stems, source)?.item() as f64 * n as f64;
            count += n;
        }
        Ok(sum / count.max(1) as f64)
    })
}

/// Pre-training on all sources.
pub fn train(
    model: Model,
    train_set: &StemDataset,
    valid_set: &StemDataset,
    cfg: &TrainConfig,
    out: &RunOutputs,
) -> Result<TrainOutcome> {
    run(model, train_set, valid_set, cfg, None, out)
}

/// Fine-tuning on one source, with the loss restricted to its slice.
pub fn finetune(
    model: Model,
    train_set: &StemDataset,
    valid_set: &StemDataset,
    cfg: &FinetuneConfig,
    out: &RunOutputs,
) -> Result<TrainOutcome> {
    let index = model.sources().iter().position(|s| *s == cfg.target_source).ok_or_else(|| {
        Error::Config(format!("target source `{}` is not one of {:?}", cfg.target_source, model.sources()))
    })?;
    run(model, train_set, valid_set, &cfg.train_config(), Some(index), out)
}

fn run(
    mut model: Model,
    train_set: &StemDataset,
    valid_set: &StemDataset,
    cfg: &TrainConfig,
    source: Option<usize>,
    out: &RunOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for set in [train_set, valid_set] {
        if set.sources != model.cfg.sources || set.sample_rate != model.cfg.sample_rate {
            return Err(Error::Data("dataset sources or sample rate do not match the model".into()));
        }
    }
    let mut log = match &out.metrics_path {
        Some(p) => Some(fs::File::create(p)?),
        None => None,
    };
    if let Some(dir) = &out.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let valid = valid_set.fixed_batches(cfg.batch_size)?;
    let mut state = AdamState::default();
    let mut emas: Vec<Ema> = cfg.ema_decays.iter().map(|&d| Ema::new(&model, d)).collect();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, String, Model)> = None;

    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut norm) = (0.0f64, 0.0f64);
        for _ in 0..cfg.batches_per_epoch {
            let mut stems = train_set.sample_batch(cfg.batch_size, &mut rng)?;
            if let Some(range) = cfg.rescale {
                stems = rescale(&stems, range, &mut rng)?;
            }
            let (mix, targets) = if cfg.remix { remix_batch(&stems, &mut rng)? } else { (mix_down(&stems)?, stems) };
            let loss = loss_for(&model.forward(&mix)?, &targets, source)
                .map_err(|e| diverged(epoch, step + 1, &e.to_string()))?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(diverged(epoch, step + 1, &format!("loss {value}")));
            }
            loss.backward()?;
            drop(loss);
            norm = adam_step_model(&mut model, &mut state, &cfg.adam)?;
            if !norm.is_finite() {
                return Err(diverged(epoch, step + 1, &format!("gradient norm {norm}")));
            }
            emas.iter_mut().for_each(|e| e.update(&model));
            step += 1;
            loss_sum += value;
            if step == 1 {
                let rec = record(&model, &emas, &valid, source, epoch, step, value, norm, cfg)?;
                consider(&mut best, &rec, &model, &emas);
                emit(&mut log, &rec)?;
                metrics.push(rec);
            }
        }
        let rec =
            record(&model, &emas, &valid, source, epoch + 1, step, loss_sum / cfg.batches_per_epoch as f64, norm, cfg)?;
        info!("epoch {} step {step}: train {:.5} valid {:.5}", epoch + 1, rec.train_l1, rec.valid_l1);
        consider(&mut best, &rec, &model, &emas);
        emit(&mut log, &rec)?;
        metrics.push(rec);
        if let Some(dir) = &out.checkpoint_dir {
            save_checkpoint(dir, "last", &model, &state)?;
            if let Some((_, _, m)) = &best {
                save_weights(m, dir.join("best.weights"))?;
            }
        }
    }
    let (best_valid_l1, best_label, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best, best_valid_l1, best_label, metrics, optimizer: state })
}

fn diverged(epoch: usize, step: u64, what: &str) -> Error {
    Error::NonFinite(format!("training diverged at epoch {} step {step}: {what}", epoch + 1))
}

#[allow(clippy::too_many_arguments)]
fn record(
    model: &Model,
    emas: &[Ema],
    valid: &[Tensor],
    source: Option<usize>,
    epoch: usize,
    step: u64,
    train_l1: f64,
    grad_norm: f64,
    cfg: &TrainConfig,
) -> Result<MetricRecord> {
    let scored = |m: &Model| {
        evaluate_l1(m, valid, source).map_err(|e| match e {
            Error::NonFinite(what) => diverged(epoch.saturating_sub(1), step, &format!("validation: {what}")),
            other => other,
        })
    };
    let valid_l1 = scored(model)?;
    let ema_valid_l1 = emas.iter().map(|e| scored(&e.apply(model))).collect::<Result<Vec<_>>>()?;
    if !valid_l1.is_finite() {
        return Err(diverged(epoch.saturating_sub(1), step, &format!("validation loss {valid_l1}")));
    }
    Ok(MetricRecord { epoch, step, train_l1, valid_l1, lr: cfg.adam.lr, grad_norm, ema_valid_l1 })
}

fn consider(best: &mut Option<(f64, String, Model)>, rec: &MetricRecord, model: &Model, emas: &[Ema]) {
    let mut candidates = vec![(rec.valid_l1, "raw".to_string(), None)];
    for (i, (&v, e)) in rec.ema_valid_l1.iter().zip(emas).enumerate() {
        candidates.push((v, format!("ema{}", e.decay), Some(i)));
    }
    for (v, label, ema) in candidates {
        if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
            let snapshot = match ema {
                Some(i) => emas[i].apply(model),
                None => model.clone(),
            };
            *best = Some((v, format!("{label} step {}", rec.step), snapshot));
        }
    }
}

fn emit(log: &mut Option<fs::File>, rec: &MetricRecord) -> Result<()> {
    if let Some(f) = log {
        let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

const OPTIM_MAGIC: &str = "htdemucs-optim";

/// Writes `<dir>/<name>.weights` and the optimizer sidecar `<dir>/<name>.optim`.
pub fn save_checkpoint(dir: &Path, name: &str, model: &Model, state: &AdamState) -> Result<()> {
    save_weights(model, dir.join(format!("{name}.weights")))?;
    fs::write(dir.join(format!("{name}.optim")), encode_optimizer(state))?;
    Ok(())
}

/// Text header (`htdemucs-optim`, `version 1`, `t`, one `sizes` line) then
/// little-endian `f32` first moments followed by second moments.
pub fn encode_optimizer(state: &AdamState) -> Vec<u8> {
    let sizes: Vec<String> = state.m.iter().map(|m| m.len().to_string()).collect();
    let mut out = format!("{OPTIM_MAGIC}\nversion 1\nt {}\nsizes {}\nend\n", state.t, sizes.join(" ")).into_bytes();
    for v in state.m.iter().chain(&state.v).flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_optimizer(bytes: &[u8]) -> Result<AdamState> {
    let bad = |m: &str| Error::Corruption(format!("optimizer state: {m}"));
    let end = bytes.windows(5).position(|w| w == b"\nend\n").ok_or_else(|| bad("missing header end"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not text"))?;
    let lines: Vec<&str> = header.lines().collect();
    if lines.len() != 4 || lines[0] != OPTIM_MAGIC {
        return Err(bad("bad header"));
    }
    if lines[1] != "version 1" {
        return Err(Error::Format(format!("optimizer state {}", lines[1])));
    }
    let t = lines[2].strip_prefix("t ").and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad step line"))?;
    let sizes: Vec<usize> = lines[3]
        .strip_prefix("sizes")
        .ok_or_else(|| bad("bad sizes line"))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| bad("bad size")))
        .collect::<Result<_>>()?;
    let blob = &bytes[end + 5..];
    let total: usize = sizes.iter().sum();
    if blob.len() != 8 * total {
        return Err(bad("blob length does not match sizes"));
    }
    let mut values = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = || sizes.iter().map(|&n| values.by_ref().take(n).collect()).collect::<Vec<Vec<f32>>>();
    let m = take();
    let v = take();
    Ok(AdamState { t, m, v })
}
