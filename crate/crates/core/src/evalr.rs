//! Chunked SDR with median-of-medians aggregation, and the real-time-factor
//! benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{load_audio, AudioClip};
use crate::error::{Error, Result};

pub const SDR_EPS: f64 = 1e-10;
/// SDR values are clamped to `[-SDR_CLAMP, SDR_CLAMP]` dB.
pub const SDR_CLAMP: f64 = 100.0;
pub const RTF_INPUT_SECONDS: f64 = 40.0;
pub const RTF_RUNS: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdrOptions {
    /// Drop chunks whose reference energy is at most [`SDR_EPS`] instead of
    /// scoring them.
    pub skip_silent: bool,
}

/// SDR of every full, non-overlapping 1 s chunk, summing over samples and
/// channels. A trailing partial chunk is not scored.
pub fn sdr_chunks(reference: &AudioClip, estimate: &AudioClip, opts: SdrOptions) -> Result<Vec<f64>> {
    if reference.samples().shape() != estimate.samples().shape() {
        return Err(Error::Dimension(format!(
            "reference {:?} and estimate {:?} differ",
            reference.samples().shape(),
            estimate.samples().shape()
        )));
    }
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::Format(format!("rates {} and {} differ", reference.sample_rate(), estimate.sample_rate())));
    }
    let chunk = reference.sample_rate() as usize;
    let n = reference.frames() / chunk;
    if n == 0 {
        return Err(Error::Length(format!("{} frames is shorter than one second", reference.frames())));
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (mut sig, mut err) = (0.0f64, 0.0f64);
        for c in 0..reference.channels() {
            let r = &reference.channel(c)[k * chunk..(k + 1) * chunk];
            let e = &estimate.channel(c)[k * chunk..(k + 1) * chunk];
            for (&a, &b) in r.iter().zip(e) {
                sig += (a as f64) * (a as f64);
                err += (a as f64 - b as f64).powi(2);
            }
        }
        if opts.skip_silent && sig <= SDR_EPS {
            continue;
        }
        out.push((10.0 * ((sig + SDR_EPS) / (err + SDR_EPS)).log10()).clamp(-SDR_CLAMP, SDR_CLAMP));
    }
    Ok(out)
}

/// Median with the even-count convention of averaging the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("median of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Chunk SDRs of one song, per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongScores {
    pub song: String,
    pub chunks: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrResult {
    /// Median chunk SDR per song and source.
    pub per_song: BTreeMap<String, BTreeMap<String, f64>>,
    /// Median over songs of the per-song medians.
    pub per_source: BTreeMap<String, f64>,
    /// Mean of the per-source medians.
    pub all: f64,
}

pub fn aggregate(results: &[SongScores]) -> Result<SdrResult> {
    if results.is_empty() {
        return Err(Error::Contract("no songs to aggregate".into()));
    }
    let mut per_song = BTreeMap::new();
    let mut by_source: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for song in results {
        if song.chunks.is_empty() {
            return Err(Error::Contract(format!("{}: no sources scored", song.song)));
        }
        let mut medians = BTreeMap::new();
        for (source, chunks) in &song.chunks {
            let m = median(chunks).map_err(|_| Error::Contract(format!("{}/{source}: no chunks scored", song.song)))?;
            medians.insert(source.clone(), m);
            by_source.entry(source.clone()).or_default().push(m);
        }
        per_song.insert(song.song.clone(), medians);
    }
    let per_source: BTreeMap<String, f64> =
        by_source.iter().map(|(s, v)| Ok((s.clone(), median(v)?))).collect::<Result<_>>()?;
    let all = per_source.values().sum::<f64>() / per_source.len() as f64;
    Ok(SdrResult { per_song, per_source, all })
}

/// Estimate file for `song`/`source`: `<est>/<song>/<source>.wav` or
/// `<est>/<song>.<source>.wav`.
fn estimate_path(est_root: &Path, song: &str, source: &str) -> Result<std::path::PathBuf> {
    let nested = est_root.join(song).join(format!("{source}.wav"));
    let flat = est_root.join(format!("{song}.{source}.wav"));
    [nested, flat]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| Error::Data(format!("no estimate for {song}/{source} under {}", est_root.display())))
}

/// Scores every song directory `<ref>/<song>/<source>.wav` against its
/// estimates, in parallel, sorted by song id.
pub fn evaluate_dirs(
    ref_root: &Path,
    est_root: &Path,
    sources: &[String],
    opts: SdrOptions,
) -> Result<Vec<SongScores>> {
    let mut songs: Vec<_> =
        std::fs::read_dir(ref_root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    songs.sort();
    songs
        .par_iter()
        .map(|dir| {
            let song = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let mut chunks = BTreeMap::new();
            for source in sources {
                let reference = load_audio(dir.join(format!("{source}.wav")))?;
                let estimate = load_audio(estimate_path(est_root, &song, source)?)?;
                chunks.insert(source.clone(), sdr_chunks(&reference, &estimate, opts)?);
            }
            Ok(SongScores { song, chunks })
        })
        .collect()
}

/// Plain-text table: one row per song, then the per-source medians and All.
pub fn render_report(result: &SdrResult) -> String {
    let sources: Vec<&String> = result.per_source.keys().collect();
    let mut out = format!("{:<24}", "song");
    for s in &sources {
        let _ = write!(out, "{s:>10}");
    }
    out.push('\n');
    for (song, medians) in &result.per_song {
        let _ = write!(out, "{song:<24}");
        for s in &sources {
            match medians.get(*s) {
                Some(v) => {
                    let _ = write!(out, "{v:>10.2}");
                }
                None => {
                    let _ = write!(out, "{:>10}", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<24}", "median");
    for s in &sources {
        let _ = write!(out, "{:>10.2}", result.per_source[*s]);
    }
    let _ = writeln!(out, "\nAll {:.2} dB", result.all);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub input_seconds: f64,
    /// Wall-clock seconds of each run divided by the input duration.
    pub runs: Vec<f64>,
    pub median: f64,
}

/// Stereo Gaussian noise of `seconds` at `sample_rate`.
pub fn gaussian_noise(seconds: f64, sample_rate: u32, seed: u64) -> Result<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sample_rate as f64).round() as usize;
    let channels = (0..2).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    AudioClip::from_channels(channels, sample_rate)
}

/// Times `pipeline` on Gaussian noise inside a one-thread pool and reports
/// seconds of compute per second of audio, median of `runs`.
pub fn rtf_bench<F>(mut pipeline: F, sample_rate: u32, input_seconds: f64, runs: usize, seed: u64) -> Result<RtfReport>
where
    F: FnMut(&AudioClip) -> Result<()> + Send,
{
    if runs == 0 || !(input_seconds > 0.0) {
        return Err(Error::Contract("benchmark needs at least one run on a positive duration".into()));
    }
    let input = gaussian_noise(input_seconds, sample_rate, seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a single-thread pool: {e}")))?;
    let runs = pool.install(|| {
        (0..runs)
            .map(|_| {
                let start = Instant::now();
                pipeline(&input)?;
                Ok(start.elapsed().as_secs_f64() / input_seconds)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let median = median(&runs)?;
    Ok(RtfReport { input_seconds, runs, median })
}
