//! Chunked inference with linear crossfades, and the weight container.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::layers::Params;
use crate::numerics::{self as nx, Tensor};
use crate::unet::{build_model, model_forward, Model, ModelConfig};

pub const DEFAULT_OVERLAP: f64 = 0.25;

/// Anything that maps a mixture chunk `[channels, frames]` to
/// `[sources, channels, frames]`.
pub trait SourceModel: Sync {
    fn sources(&self) -> &[String];
    fn sample_rate(&self) -> u32;
    fn separate_chunk(&self, chunk: &AudioClip) -> Result<Tensor>;
}

impl SourceModel for Model {
    fn sources(&self) -> &[String] {
        &self.cfg.sources
    }

    fn sample_rate(&self) -> u32 {
        self.cfg.sample_rate
    }

    fn separate_chunk(&self, chunk: &AudioClip) -> Result<Tensor> {
        nx::no_grad(|| model_forward(self, chunk))
    }
}

/// Chunk offsets and per-chunk crossfade gains over a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPlan {
    pub total_frames: usize,
    pub chunk_frames: usize,
    pub overlap: f64,
    pub starts: Vec<usize>,
    /// `weights[c][i]` is the gain of frame `starts[c] + i` from chunk `c`.
    pub weights: Vec<Vec<f64>>,
}

impl ChunkPlan {
    pub fn hop(&self) -> usize {
        hop_of(self.chunk_frames, self.overlap)
    }

    /// Length of chunk `c`.
    pub fn len_of(&self, c: usize) -> usize {
        self.weights[c].len()
    }

    /// Sum of gains at every frame.
    pub fn frame_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.total_frames];
        for (start, w) in self.starts.iter().zip(&self.weights) {
            for (s, g) in sums[*start..].iter_mut().zip(w) {
                *s += g;
            }
        }
        sums
    }
}

fn hop_of(chunk: usize, overlap: f64) -> usize {
    ((chunk as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Plans chunks of `chunk_frames` with `overlap` fraction shared between
/// neighbours. The last chunk is shifted left to end at the clip end; gains
/// ramp linearly over the overlap and are renormalized to sum to one.
pub fn plan_chunks(total_frames: usize, chunk_frames: usize, overlap: f64) -> Result<ChunkPlan> {
    if chunk_frames < 2 {
        return Err(Error::Contract(format!("chunk_frames {chunk_frames} must be at least 2")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Contract(format!("overlap {overlap} must lie in [0, 1)")));
    }
    if total_frames == 0 {
        return Err(Error::Contract("cannot plan chunks over an empty clip".into()));
    }
    if total_frames <= chunk_frames {
        return Ok(ChunkPlan {
            total_frames,
            chunk_frames,
            overlap,
            starts: vec![0],
            weights: vec![vec![1.0; total_frames]],
        });
    }

    let hop = hop_of(chunk_frames, overlap);
    let mut starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|&s| s + chunk_frames < total_frames).collect();
    starts.push(total_frames - chunk_frames);
    starts.dedup();

    let ramp = (overlap * chunk_frames as f64).round() as usize;
    let last = starts.len() - 1;
    let mut weights: Vec<Vec<f64>> = (0..starts.len())
        .map(|c| {
            (0..chunk_frames)
                .map(|i| {
                    let rise = if c > 0 && i < ramp { (i + 1) as f64 / (ramp + 1) as f64 } else { 1.0 };
                    let fall = if c < last && i >= chunk_frames - ramp {
                        (chunk_frames - i) as f64 / (ramp + 1) as f64
                    } else {
                        1.0
                    };
                    rise.min(fall)
                })
                .collect()
        })
        .collect();

    let mut sums = vec![0.0; total_frames];
    for (start, w) in starts.iter().zip(&weights) {
        for (s, g) in sums[*start..].iter_mut().zip(w) {
            *s += g;
        }
    }
    for (start, w) in starts.iter().zip(weights.iter_mut()) {
        for (g, s) in w.iter_mut().zip(&sums[*start..]) {
            *g /= s;
        }
    }
    Ok(ChunkPlan { total_frames, chunk_frames, overlap, starts, weights })
}

/// Chunk length near `seconds` rounded to a multiple of four times the
/// model's stride grid, so chunk starts at 25% overlap stay on the grid.
pub fn aligned_chunk_frames(cfg: &ModelConfig, seconds: f64) -> usize {
    let unit = 4 * cfg.alignment();
    let want = (seconds * cfg.sample_rate as f64).round() as usize;
    (want.div_ceil(unit) * unit).max(unit)
}

/// One separated source.
#[derive(Debug, Clone)]
pub struct Stem {
    pub source: String,
    pub clip: AudioClip,
}

/// Separates `clip` chunk by chunk and crossfades the results. Chunks run
/// in parallel; accumulation order is fixed.
pub fn separate<M: SourceModel + ?Sized>(model: &M, clip: &AudioClip, plan: &ChunkPlan) -> Result<Vec<Stem>> {
    if clip.sample_rate() != model.sample_rate() {
        return Err(Error::Format(format!(
            "model runs at {} Hz, clip is {} Hz",
            model.sample_rate(),
            clip.sample_rate()
        )));
    }
    let (channels, frames) = (clip.channels(), clip.frames());
    if plan.total_frames != frames {
        return Err(Error::Contract(format!("plan covers {} frames, clip has {frames}", plan.total_frames)));
    }
    let n_sources = model.sources().len();

    let outputs: Vec<Tensor> = plan
        .starts
        .par_iter()
        .enumerate()
        .map(|(c, &start)| {
            let chunk = clip.slice(start, plan.len_of(c))?;
            let out = model.separate_chunk(&chunk)?;
            let expected = [n_sources, channels, plan.len_of(c)];
            if out.shape() != expected {
                return Err(Error::Dimension(format!("model returned {:?}, expected {expected:?}", out.shape())));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut acc = vec![0.0f64; n_sources * channels * frames];
    for ((&start, w), out) in plan.starts.iter().zip(&plan.weights).zip(&outputs) {
        let len = w.len();
        for (row, src) in acc.chunks_exact_mut(frames).zip(out.data().chunks_exact(len)) {
            for ((a, &y), g) in row[start..start + len].iter_mut().zip(src).zip(w) {
                *a += g * y as f64;
            }
        }
    }

    model
        .sources()
        .iter()
        .zip(acc.chunks_exact(channels * frames))
        .map(|(source, data)| {
            let samples = Tensor::new(&[channels, frames], data.iter().map(|&v| v as f32).collect())?;
            Ok(Stem { source: source.clone(), clip: AudioClip::new(samples, clip.sample_rate())? })
        })
        .collect()
}

const MAGIC: &str = "htdemucs-weights";
pub const FORMAT_VERSION: u32 = 1;

/// One tensor entry of a weight manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob region.
    pub offset: usize,
}

/// Parsed weight container.
#[derive(Debug, Clone)]
pub struct WeightFile {
    pub version: u32,
    pub config: ModelConfig,
    pub entries: Vec<ManifestEntry>,
    pub blob: Vec<u8>,
}

impl WeightFile {
    /// Values of entry `i`.
    pub fn values(&self, i: usize) -> Vec<f32> {
        let e = &self.entries[i];
        let n: usize = e.shape.iter().product();
        self.blob[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Serializes parameters as a text manifest followed by little-endian f32
/// blobs. The manifest records a SHA-256 of the blob region.
pub fn encode_weights(model: &Model) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut lines = Vec::new();
    for (name, t) in model.named_params() {
        lines.push(format!("param {name} {} {}", shape_text(t.shape()), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let config = serde_json::to_string(&model.cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(blob.len() + 4096);
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "version {FORMAT_VERSION}")?;
    writeln!(out, "config {config}")?;
    writeln!(out, "blob_bytes {}", blob.len())?;
    writeln!(out, "sha256 {}", hex_digest(&blob))?;
    for l in lines {
        writeln!(out, "{l}")?;
    }
    writeln!(out, "end")?;
    out.extend_from_slice(&blob);
    Ok(out)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(model)?)?;
    Ok(())
}

/// Parses a container and verifies its checksum.
pub fn decode_weights(bytes: &[u8]) -> Result<WeightFile> {
    let bad = |m: String| Error::Corruption(m);
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated manifest".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8".into()))
    };
    if next_line()? != MAGIC {
        return Err(bad("missing header".into()));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = next_line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
    };
    let version: u32 = field("version")?.parse().map_err(|_| bad("bad version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("weight format version {version}, expected {FORMAT_VERSION}")));
    }
    let config: ModelConfig =
        serde_json::from_str(&field("config")?).map_err(|e| Error::Config(format!("manifest config: {e}")))?;
    let blob_bytes: usize = field("blob_bytes")?.parse().map_err(|_| bad("bad blob_bytes".into()))?;
    let digest = field("sha256")?;

    let mut entries = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let ["param", name, shape, offset] = parts[..] else {
            return Err(bad(format!("bad manifest line `{line}`")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| bad(format!("bad shape in `{line}`")))?;
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
        let n: usize = shape.iter().product();
        if offset + 4 * n > blob_bytes {
            return Err(bad(format!("`{name}` runs past the blob region")));
        }
        entries.push(ManifestEntry { name: name.to_string(), shape, offset });
    }

    let blob = &bytes[pos..];
    if blob.len() != blob_bytes {
        return Err(bad(format!("blob region is {} bytes, manifest says {blob_bytes}", blob.len())));
    }
    if hex_digest(blob) != digest {
        return Err(bad("checksum mismatch".into()));
    }
    Ok(WeightFile { version, config, entries, blob: blob.to_vec() })
}

/// Builds the manifest's model and fills its parameters.
pub fn model_from_weights(file: &WeightFile) -> Result<Model> {
    let mut model = build_model(&file.config, 0)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let listed: Vec<&str> = file.entries.iter().map(|e| e.name.as_str()).collect();
    if names.iter().map(String::as_str).ne(listed.iter().copied()) {
        let extra: Vec<&&str> = listed.iter().filter(|n| !names.iter().any(|m| m == **n)).collect();
        let missing: Vec<&String> = names.iter().filter(|n| !listed.contains(&n.as_str())).collect();
        return Err(Error::Config(format!(
            "parameter names do not match the config (unexpected {extra:?}, missing {missing:?})"
        )));
    }
    let mut failure = None;
    let mut i = 0;
    model.visit_mut("", &mut |name, t| {
        let e = &file.entries[i];
        if e.shape != t.shape() {
            failure.get_or_insert(Error::Config(format!(
                "{name}: stored shape {:?}, model has {:?}",
                e.shape,
                t.shape()
            )));
        } else {
            match Tensor::param(t.shape(), file.values(i)) {
                Ok(p) => *t = p,
                Err(err) => {
                    failure.get_or_insert(err);
                }
            }
        }
        i += 1;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

/// Loads a model using the config stored in the file.
pub fn load_weights(path: impl AsRef<Path>) -> Result<Model> {
    model_from_weights(&decode_weights(&fs::read(path)?)?)
}

/// Loads a model, requiring the stored config to equal `expected`.
pub fn load_weights_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    let file = decode_weights(&fs::read(path)?)?;
    if &file.config != expected {
        return Err(Error::Config("stored config differs from the requested config".into()));
    }
    model_from_weights(&file)
}
