//! Command-line entry point. Settings resolve as flag, then `--config`
//! file, then built-in default.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ini::Ini;
use log::{info, warn};
use rayon::prelude::*;

use crate::curation::{
    apply_override, leakage_matrix, load_song_dir, parse_overrides, KeywordTable, LeakageReport, SongStems,
};
use crate::dsp::{load_audio, save_audio, AudioClip};
use crate::error::{Error, Result};
use crate::evalr::{aggregate, evaluate_dirs, render_report, rtf_bench, SdrOptions, RTF_INPUT_SECONDS, RTF_RUNS};
use crate::layers::Params;
use crate::separator::{aligned_chunk_frames, decode_weights, load_weights, plan_chunks, separate, DEFAULT_OVERLAP};
use crate::sparse_attention::LshConfig;
use crate::synthdata::{generate_song, write_song, SynthSpec};
use crate::trainer::{finetune, train, FinetuneConfig, RunOutputs, StemDataset, TrainConfig, TrainOutcome};
use crate::transformer::TransformerConfig;
use crate::unet::{build_model, ModelConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const DEFAULT_CHUNK_SECONDS: f64 = 8.0;
const DEFAULT_SEGMENT_SECONDS: f64 = 4.0;

#[derive(Debug, Parser)]
#[command(name = "htdemucs", version, about = "Music source separation with a hybrid transformer U-Net")]
struct Cli {
    /// Sectioned key=value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split mixtures into `<name>.<source>.wav` stems.
    Separate(SeparateArgs),
    /// Train a model from stem directories.
    Train(TrainArgs),
    /// Fine-tune a trained model on one source.
    Finetune(FinetuneArgs),
    /// Score songs for stem leakage and accept or reject them.
    Curate(CurateArgs),
    /// Median-of-medians SDR of estimates against references.
    Evaluate(EvaluateArgs),
    /// Real-time factor of a model on Gaussian noise.
    BenchRtf(BenchArgs),
    /// Write synthetic stem directories.
    Synth(SynthArgs),
    /// Print a weight file's config and tensor manifest.
    InspectWeights(InspectArgs),
}

#[derive(Debug, Args)]
struct SeparateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    chunk_seconds: Option<f64>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Directory of `<song>/<stem>.wav` trees.
    #[arg(long)]
    dataset: PathBuf,
    /// Validation songs; defaults to holding out the last dataset song.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Receives `model.weights`, `metrics.jsonl` and `checkpoints/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    segment_seconds: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Start from these weights instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    no_remix: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    source: String,
}

#[derive(Debug, Args)]
struct CurateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Separator weights used to measure leakage.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    model: Option<PathBuf>,
    /// Use an ideal separator that routes each stem to its own source.
    #[arg(long)]
    oracle: bool,
    /// Lines of `song_id accept|reject`.
    #[arg(long)]
    overrides: Option<PathBuf>,
    /// Write one JSON record per song here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    est: PathBuf,
    /// Comma-separated source names.
    #[arg(long, default_value = "drums,bass,other,vocals")]
    sources: String,
    #[arg(long)]
    skip_silent: bool,
    /// Also write the result as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = RTF_INPUT_SECONDS)]
    seconds: f64,
    #[arg(long, default_value_t = RTF_RUNS)]
    runs: usize,
    #[arg(long)]
    chunk_seconds: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    songs: u64,
    #[arg(long, default_value_t = 8.0)]
    duration: f64,
    #[arg(long, default_value_t = 44_100)]
    sample_rate: u32,
}

#[derive(Debug, Args)]
struct InspectArgs {
    weights: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Settings file lookups.
struct Settings(Option<Ini>);

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self(None)),
            Some(p) => Ini::load_from_file(p)
                .map(|ini| Self(Some(ini)))
                .map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        }
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.0.as_ref()?.section(Some(section))?.get(key)
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.raw(section, key)
            .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("[{section}] {key} = {v} does not parse"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, flag: Option<T>, section: &str, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(section, key)?.unwrap_or(default),
        })
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(section, key)
            .map(|v| {
                v.split(',')
                    .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("[{section}] {key}: bad entry `{x}`"))))
                    .collect()
            })
            .transpose()
    }

    /// `[model]` keys over the default architecture.
    fn model_config(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let t = TransformerConfig::default();
        let s = "model";
        let sparse = self.get::<bool>(s, "sparse")?.unwrap_or(false).then(|| -> Result<LshConfig> {
            let l = LshConfig::default();
            Ok(LshConfig {
                rounds: self.or(None, s, "lsh_rounds", l.rounds)?,
                buckets_per_round: self.or(None, s, "lsh_buckets", l.buckets_per_round)?,
                target_sparsity: self.or(None, s, "sparsity", l.target_sparsity)?,
            })
        });
        Ok(ModelConfig {
            sources: self.list(s, "sources")?.unwrap_or(d.sources),
            audio_channels: self.or(None, s, "audio_channels", d.audio_channels)?,
            sample_rate: self.or(None, s, "sample_rate", d.sample_rate)?,
            channels: self.or(None, s, "channels", d.channels)?,
            growth: self.or(None, s, "growth", d.growth)?,
            layers: self.or(None, s, "layers", d.layers)?,
            kernel: self.or(None, s, "kernel", d.kernel)?,
            stride: self.or(None, s, "stride", d.stride)?,
            n_fft: self.or(None, s, "n_fft", d.n_fft)?,
            hop: self.or(None, s, "hop", d.hop)?,
            transformer: TransformerConfig {
                dim: self.or(None, s, "dim", t.dim)?,
                heads: self.or(None, s, "heads", t.heads)?,
                ffn_mult: self.or(None, s, "ffn_mult", t.ffn_mult)?,
                depth: self.or(None, s, "depth", t.depth)?,
                layer_scale_init: self.or(None, s, "layer_scale", t.layer_scale_init)?,
                positional: self.or(None, s, "positional", t.positional)?,
                ..t
            },
            sparse: sparse.transpose()?,
        })
    }

    fn keywords(&self) -> Result<KeywordTable> {
        let Some(section) = self.0.as_ref().and_then(|i| i.section(Some("keywords"))) else {
            return Ok(KeywordTable::default());
        };
        let entries: Vec<(String, Vec<String>)> = section
            .iter()
            .map(|(k, v)| {
                (k.to_string(), v.split(',').map(|w| w.trim().to_string()).filter(|w| !w.is_empty()).collect())
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::Config("[keywords] is empty".into()));
        }
        Ok(KeywordTable { entries })
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).try_init();
    let outcome = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(&cli))),
        None => dispatch(&cli),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract(_) => EXIT_USAGE,
        Error::NonFinite(_) | Error::DegenerateRow { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.or(cli.seed, "run", "seed", 0)?;
    match &cli.command {
        Command::Separate(a) => cmd_separate(a, &settings),
        Command::Train(a) => cmd_train(a, &settings, seed),
        Command::Finetune(a) => cmd_finetune(a, &settings, seed),
        Command::Curate(a) => cmd_curate(a, &settings),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::BenchRtf(a) => cmd_bench(a, &settings, seed),
        Command::Synth(a) => cmd_synth(a, seed),
        Command::InspectWeights(a) => cmd_inspect(a),
    }
}

fn cmd_separate(a: &SeparateArgs, settings: &Settings) -> Result<()> {
    let model = load_weights(&a.model)?;
    let seconds = settings.or(a.chunk_seconds, "separate", "chunk_seconds", DEFAULT_CHUNK_SECONDS)?;
    let overlap = settings.or(a.overlap, "separate", "overlap", DEFAULT_OVERLAP)?;
    if !(seconds > 0.0) {
        return Err(Error::Config(format!("chunk length {seconds} s must be positive")));
    }
    fs::create_dir_all(&a.out_dir)?;
    let chunk = aligned_chunk_frames(&model.cfg, seconds);
    for input in &a.inputs {
        let clip = load_audio(input)?;
        let plan = plan_chunks(clip.frames(), chunk, overlap)?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
        for out in separate(&model, &clip, &plan)? {
            let path = a.out_dir.join(format!("{stem}.{}.wav", out.source));
            save_audio(&out.clip, &path)?;
            info!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Reorders a song's stems to `sources`.
fn in_order(song: SongStems, sources: &[String]) -> Result<SongStems> {
    let stems = sources
        .iter()
        .map(|s| song.stem(s).cloned().ok_or_else(|| Error::Data(format!("{}: no `{s}` stem", song.song_id))))
        .collect::<Result<Vec<_>>>()?;
    let mut out = SongStems::new(song.song_id.clone(), sources.to_vec(), stems)?;
    out.raw_names = song.raw_names;
    out.unmatched = song.unmatched;
    Ok(out)
}

fn load_songs(root: &Path, table: &KeywordTable, sources: &[String]) -> Result<Vec<SongStems>> {
    let mut dirs: Vec<_> =
        fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no song directories under {}", root.display())));
    }
    dirs.iter().map(|d| in_order(load_song_dir(d, table)?, sources)).collect()
}

/// Loads the training and validation sets; without `--valid` the last song
/// is held out.
fn datasets(
    a: &ScheduleArgs,
    settings: &Settings,
    section: &str,
    cfg: &ModelConfig,
) -> Result<(StemDataset, StemDataset)> {
    let table = settings.keywords()?;
    let fallback = settings.or(None, "train", "segment_seconds", DEFAULT_SEGMENT_SECONDS)?;
    let seconds = settings.or(a.segment_seconds, section, "segment_seconds", fallback)?;
    let segment = (seconds * cfg.sample_rate as f64).round() as usize;
    let mut songs = load_songs(&a.dataset, &table, &cfg.sources)?;
    let valid = match &a.valid {
        Some(v) => load_songs(v, &table, &cfg.sources)?,
        None if songs.len() >= 2 => vec![songs.pop().expect("two songs")],
        None => {
            return Err(Error::Data("one song cannot be split into training and validation sets; pass --valid".into()))
        }
    };
    Ok((StemDataset::new(&songs, segment)?, StemDataset::new(&valid, segment)?))
}

fn finish(outcome: TrainOutcome, out: &Path) -> Result<()> {
    crate::separator::save_weights(&outcome.best, out.join("model.weights"))?;
    let last = outcome.metrics.last().expect("one record per epoch");
    println!(
        "steps {} train_l1 {:.6} valid_l1 {:.6} best {:.6} ({})",
        last.step, last.train_l1, last.valid_l1, outcome.best_valid_l1, outcome.best_label
    );
    Ok(())
}

fn outputs(out: &Path) -> Result<RunOutputs> {
    fs::create_dir_all(out)?;
    Ok(RunOutputs { metrics_path: Some(out.join("metrics.jsonl")), checkpoint_dir: Some(out.join("checkpoints")) })
}

fn cmd_train(a: &TrainArgs, settings: &Settings, seed: u64) -> Result<()> {
    let model = match &a.init {
        Some(p) => load_weights(p)?,
        None => build_model(&settings.model_config()?, seed)?,
    };
    let s = &a.schedule;
    let d = TrainConfig::default();
    let sec = "train";
    let rescale = match (settings.get::<f32>(sec, "rescale_min")?, settings.get::<f32>(sec, "rescale_max")?) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => d.rescale.filter(|_| settings.get::<bool>(sec, "rescale").ok().flatten().unwrap_or(true)),
        _ => return Err(Error::Config("set both rescale_min and rescale_max".into())),
    };
    let cfg = TrainConfig {
        adam: crate::trainer::AdamConfig {
            lr: settings.or(s.lr, sec, "lr", d.adam.lr)?,
            weight_decay: settings.or(None, sec, "weight_decay", d.adam.weight_decay)?,
            grad_clip: settings.get(sec, "grad_clip")?,
            ..d.adam
        },
        batch_size: settings.or(s.batch_size, sec, "batch_size", d.batch_size)?,
        epochs: settings.or(s.epochs, sec, "epochs", d.epochs)?,
        batches_per_epoch: settings.or(s.batches_per_epoch, sec, "batches_per_epoch", d.batches_per_epoch)?,
        ema_decays: settings.list(sec, "ema")?.unwrap_or(d.ema_decays),
        remix: !a.no_remix && settings.or(None, sec, "remix", d.remix)?,
        rescale,
        repitch: settings.or(None, sec, "repitch", false)?,
        seed,
    };
    let (tr, va) = datasets(s, settings, sec, &model.cfg)?;
    info!("training {} parameters on {} songs, validating on {}", model.param_count(), tr.len(), va.len());
    finish(train(model, &tr, &va, &cfg, &outputs(&s.out)?)?, &s.out)
}

fn cmd_finetune(a: &FinetuneArgs, settings: &Settings, seed: u64) -> Result<()> {
    let model = load_weights(&a.model)?;
    if !model.cfg.sources.contains(&a.source) {
        return Err(Error::Config(format!("unknown source `{}`; the model has {:?}", a.source, model.cfg.sources)));
    }
    let s = &a.schedule;
    let d = FinetuneConfig::new(a.source.clone());
    let sec = "finetune";
    let cfg = FinetuneConfig {
        lr: settings.or(s.lr, sec, "lr", d.lr)?,
        epochs: settings.or(s.epochs, sec, "epochs", d.epochs)?,
        grad_clip: settings.or(None, sec, "grad_clip", d.grad_clip)?,
        weight_decay: settings.or(None, sec, "weight_decay", d.weight_decay)?,
        batch_size: settings.or(s.batch_size, sec, "batch_size", d.batch_size)?,
        batches_per_epoch: settings.or(s.batches_per_epoch, sec, "batches_per_epoch", d.batches_per_epoch)?,
        ema_decays: settings.list(sec, "ema")?.unwrap_or(d.ema_decays.clone()),
        seed,
        ..d
    };
    let (tr, va) = datasets(s, settings, sec, &model.cfg)?;
    finish(finetune(model, &tr, &va, &cfg, &outputs(&s.out)?)?, &s.out)
}

/// Ideal separator for one song: the isolated stem goes to its own source
/// and every other output is silent.
fn oracle_separator(song: &SongStems) -> impl Fn(&AudioClip) -> Result<Vec<AudioClip>> + '_ {
    move |x| {
        let own = song.stems.iter().position(|s| s.samples().data() == x.samples().data());
        song.stems
            .iter()
            .enumerate()
            .map(|(j, _)| {
                if Some(j) == own {
                    Ok(x.clone())
                } else {
                    AudioClip::silence(x.channels(), x.frames(), x.sample_rate())
                }
            })
            .collect()
    }
}

fn cmd_curate(a: &CurateArgs, settings: &Settings) -> Result<()> {
    let table = settings.keywords()?;
    let overrides = match &a.overrides {
        Some(p) => parse_overrides(&fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let model = a.model.as_ref().map(load_weights).transpose()?;
    let chunk_seconds = settings.or(None, "separate", "chunk_seconds", DEFAULT_CHUNK_SECONDS)?;
    let mut dirs: Vec<_> =
        fs::read_dir(&a.dataset)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let reports: Vec<LeakageReport> = dirs
        .par_iter()
        .map(|dir| {
            let song = load_song_dir(dir, &table)?;
            if !song.unmatched.is_empty() {
                warn!("{}: unmatched stems {:?}", song.song_id, song.unmatched);
            }
            let mut report = match &model {
                None => leakage_matrix(&song, oracle_separator(&song))?,
                Some(m) => {
                    let song = in_order(song, &m.cfg.sources)?;
                    let chunk = aligned_chunk_frames(&m.cfg, chunk_seconds);
                    leakage_matrix(&song, |x: &AudioClip| {
                        let plan = plan_chunks(x.frames(), chunk, DEFAULT_OVERLAP)?;
                        Ok(separate(m, x, &plan)?.into_iter().map(|s| s.clip).collect())
                    })?
                }
            };
            apply_override(&mut report, &overrides);
            Ok(report)
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        text.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    let accepted = reports.iter().filter(|r| r.accepted).count();
    eprintln!("accepted {accepted} of {} songs", reports.len());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let sources: Vec<String> = a.sources.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    let scores = evaluate_dirs(&a.reference, &a.est, &sources, SdrOptions { skip_silent: a.skip_silent })?;
    let result = aggregate(&scores)?;
    print!("{}", render_report(&result));
    if let Some(p) = &a.json {
        let json = serde_json::to_string_pretty(&result).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(p, json)?;
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, settings: &Settings, seed: u64) -> Result<()> {
    let model = load_weights(&a.model)?;
    let seconds = settings.or(a.chunk_seconds, "separate", "chunk_seconds", DEFAULT_CHUNK_SECONDS)?;
    let chunk = aligned_chunk_frames(&model.cfg, seconds);
    let report = rtf_bench(
        |x| {
            separate(&model, x, &plan_chunks(x.frames(), chunk, DEFAULT_OVERLAP)?)?;
            Ok(())
        },
        model.cfg.sample_rate,
        a.seconds,
        a.runs,
        seed,
    )?;
    let runs: Vec<String> = report.runs.iter().map(|r| format!("{r:.3}")).collect();
    println!("rtf {:.3} (runs {}; {} s input, 1 thread)", report.median, runs.join(" "), report.input_seconds);
    Ok(())
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    for k in 0..a.songs {
        let spec = SynthSpec { sample_rate: a.sample_rate, ..SynthSpec::new(seed + k, a.duration) };
        let song = generate_song(&spec)?;
        write_song(&song, &a.out)?;
        info!("wrote {}", song.song_id);
    }
    println!("wrote {} songs to {}", a.songs, a.out.display());
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let file = decode_weights(&fs::read(&a.weights)?)?;
    let count: usize = file.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let mut out = std::io::stdout().lock();
    if a.json {
        let entries: Vec<_> =
            file.entries.iter().map(|e| serde_json::json!({ "name": e.name, "shape": e.shape })).collect();
        let doc = serde_json::json!({
            "version": file.version,
            "parameters": count,
            "config": file.config,
            "tensors": entries,
        });
        writeln!(out, "{doc:#}")?;
        return Ok(());
    }
    writeln!(out, "version {}", file.version)?;
    writeln!(out, "parameters {count} ({:.2}M)", count as f64 / 1e6)?;
    writeln!(out, "config {}", serde_json::to_string(&file.config).map_err(|e| Error::Data(e.to_string()))?)?;
    for e in &file.entries {
        let shape: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "{:<60} {}", e.name, shape.join("x"))?;
    }
    Ok(())
}
