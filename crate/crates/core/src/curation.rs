//! Stem labeling, silence gating, leakage matrices and song selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{load_audio, volume_db, AudioClip};
use crate::error::{Error, Result};

/// A segment is silent below this loudness.
pub const SILENCE_DB: f64 = -40.0;
/// Output-minus-input loudness above which a segment counts as leaking.
pub const LEAK_DB: f64 = -10.0;
pub const MIN_ACTIVITY: f64 = 0.30;
pub const MIN_DIAGONAL: f64 = 0.70;
pub const MAX_OFF_DIAGONAL: f64 = 0.30;

/// File name skipped when reading stem directories.
pub const MIXTURE_NAME: &str = "mixture";

/// One song's stems after name mapping, in `sources` order.
#[derive(Debug, Clone)]
pub struct SongStems {
    pub song_id: String,
    pub sources: Vec<String>,
    pub stems: Vec<AudioClip>,
    /// Producer labels merged into each source.
    pub raw_names: BTreeMap<String, Vec<String>>,
    /// Labels that matched no source.
    pub unmatched: Vec<String>,
}

impl SongStems {
    pub fn new(song_id: String, sources: Vec<String>, stems: Vec<AudioClip>) -> Result<Self> {
        if sources.len() != stems.len() || stems.is_empty() {
            return Err(Error::Data(format!("{song_id}: {} sources for {} stems", sources.len(), stems.len())));
        }
        let first = &stems[0];
        if stems
            .iter()
            .any(|s| s.sample_rate() != first.sample_rate() || s.samples().shape() != first.samples().shape())
        {
            return Err(Error::Data(format!("{song_id}: stems differ in rate or shape")));
        }
        let raw_names = sources.iter().map(|s| (s.clone(), vec![s.clone()])).collect();
        Ok(Self { song_id, sources, stems, raw_names, unmatched: Vec::new() })
    }

    pub fn sample_rate(&self) -> u32 {
        self.stems[0].sample_rate()
    }

    pub fn frames(&self) -> usize {
        self.stems[0].frames()
    }

    pub fn stem(&self, source: &str) -> Option<&AudioClip> {
        self.sources.iter().position(|s| s == source).map(|i| &self.stems[i])
    }

    /// Sum of the stems in source order.
    pub fn mixture(&self) -> Result<AudioClip> {
        self.stems[1..].iter().try_fold(self.stems[0].clone(), |acc, s| acc.mix(s))
    }
}

/// Case-insensitive substring keywords per source, tried in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordTable {
    pub entries: Vec<(String, Vec<String>)>,
}

impl Default for KeywordTable {
    fn default() -> Self {
        let row = |s: &str, k: &[&str]| (s.to_string(), k.iter().map(|w| w.to_string()).collect());
        Self {
            entries: vec![
                row("vocals", &["vocal", "vox", "lead"]),
                row("drums", &["drum", "kick", "snare", "perc"]),
                row("bass", &["bass", "sub"]),
                row("other", &["other", "fx", "synth", "gtr", "guitar", "keys", "piano"]),
            ],
        }
    }
}

impl KeywordTable {
    pub fn sources(&self) -> Vec<String> {
        self.entries.iter().map(|(s, _)| s.clone()).collect()
    }
}

/// Source for a producer's stem label, or `None` when nothing matches.
pub fn map_stem_name(raw: &str, table: &KeywordTable) -> Option<String> {
    let lower = raw.to_lowercase();
    table
        .entries
        .iter()
        .find(|(_, words)| words.iter().any(|w| lower.contains(&w.to_lowercase())))
        .map(|(s, _)| s.clone())
}

/// Fraction of 1 s segments at or above [`SILENCE_DB`].
pub fn activity_fraction(stem: &AudioClip) -> Result<f64> {
    let v = volume_db(stem)?;
    Ok(v.iter().filter(|&&db| db >= SILENCE_DB).count() as f64 / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub song_id: String,
    pub sources: Vec<String>,
    pub activity: Vec<f64>,
    /// `p[i][j]`: fraction of active segments of stem `i` whose separated
    /// output `j` is within [`LEAK_DB`] of the stem's loudness.
    pub p: Vec<Vec<f64>>,
    /// Rows with no active segment are undefined and read as zeros.
    pub defined: Vec<bool>,
    pub accepted: bool,
    pub reasons: Vec<String>,
}

/// Runs `separator` on each isolated stem and measures where its energy
/// lands. `separator` returns one clip per source, in `stems.sources` order.
pub fn leakage_matrix<F>(stems: &SongStems, separator: F) -> Result<LeakageReport>
where
    F: Fn(&AudioClip) -> Result<Vec<AudioClip>>,
{
    let n = stems.sources.len();
    let mut activity = Vec::with_capacity(n);
    let mut p = vec![vec![0.0; n]; n];
    let mut defined = vec![false; n];
    for (i, x) in stems.stems.iter().enumerate() {
        let vx = volume_db(x)?;
        activity.push(vx.iter().filter(|&&db| db >= SILENCE_DB).count() as f64 / vx.len() as f64);
        let active: Vec<usize> = (0..vx.len()).filter(|&s| vx[s] >= SILENCE_DB).collect();
        if active.is_empty() {
            continue;
        }
        defined[i] = true;
        let outputs = separator(x)?;
        if outputs.len() != n {
            return Err(Error::Contract(format!("separator returned {} outputs for {n} sources", outputs.len())));
        }
        for (j, y) in outputs.iter().enumerate() {
            let vy = volume_db(y)?;
            if vy.len() != vx.len() {
                return Err(Error::Dimension(format!("output {j} has {} segments, stem has {}", vy.len(), vx.len())));
            }
            let leaking = active.iter().filter(|&&s| vy[s] - vx[s] > LEAK_DB).count();
            p[i][j] = leaking as f64 / active.len() as f64;
        }
    }
    let mut report = LeakageReport {
        song_id: stems.song_id.clone(),
        sources: stems.sources.clone(),
        activity,
        p,
        defined,
        accepted: false,
        reasons: Vec::new(),
    };
    let (accepted, reasons) = select_song(&report);
    report.accepted = accepted;
    report.reasons = reasons;
    Ok(report)
}

/// Accepts a song when every source is active often enough, every
/// diagonal entry exceeds [`MIN_DIAGONAL`] and every off-diagonal entry is
/// below [`MAX_OFF_DIAGONAL`]. Reasons list every violated predicate.
pub fn select_song(report: &LeakageReport) -> (bool, Vec<String>) {
    let mut reasons = Vec::new();
    for (i, name) in report.sources.iter().enumerate() {
        if report.activity[i] < MIN_ACTIVITY {
            reasons.push(format!("{name} activity {:.2} < {MIN_ACTIVITY}", report.activity[i]));
        }
        if !report.defined[i] {
            reasons.push(format!("{name} leakage row undefined (no active segment)"));
            continue;
        }
        for (j, other) in report.sources.iter().enumerate() {
            let v = report.p[i][j];
            if i == j && v <= MIN_DIAGONAL {
                reasons.push(format!("P[{name},{name}] {v:.2} <= {MIN_DIAGONAL}"));
            }
            if i != j && v >= MAX_OFF_DIAGONAL {
                reasons.push(format!("P[{name},{other}] {v:.2} >= {MAX_OFF_DIAGONAL}"));
            }
        }
    }
    (reasons.is_empty(), reasons)
}

/// Reads `dir/<stem>.wav`, maps names through `table` and sums stems that
/// share a source. Sources without a stem become silence.
pub fn load_song_dir(dir: impl AsRef<Path>, table: &KeywordTable) -> Result<SongStems> {
    let dir = dir.as_ref();
    let song_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();

    let sources = table.sources();
    let mut sums: Vec<Option<AudioClip>> = vec![None; sources.len()];
    let mut raw_names: BTreeMap<String, Vec<String>> = sources.iter().map(|s| (s.clone(), Vec::new())).collect();
    let mut unmatched = Vec::new();
    for path in files {
        let stem_name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if stem_name.eq_ignore_ascii_case(MIXTURE_NAME) {
            continue;
        }
        let Some(source) = map_stem_name(&stem_name, table) else {
            unmatched.push(stem_name);
            continue;
        };
        let clip = load_audio(&path)?;
        let i = sources.iter().position(|s| *s == source).expect("table source");
        sums[i] = Some(match sums[i].take() {
            None => clip,
            Some(acc) => {
                acc.mix(&clip).map_err(|_| Error::Data(format!("{song_id}: {stem_name} differs in geometry")))?
            }
        });
        raw_names.get_mut(&source).expect("table source").push(stem_name);
    }
    let template =
        sums.iter().flatten().next().cloned().ok_or_else(|| Error::Data(format!("{song_id}: no usable stems")))?;
    let stems = sums
        .into_iter()
        .map(|s| {
            s.map_or_else(|| AudioClip::silence(template.channels(), template.frames(), template.sample_rate()), Ok)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut song = SongStems::new(song_id, sources, stems)?;
    song.raw_names = raw_names;
    song.unmatched = unmatched;
    Ok(song)
}

/// Song ids with a forced decision, one `song_id accept|reject` per line;
/// `#` starts a comment.
pub fn parse_overrides(text: &str) -> Result<BTreeMap<String, bool>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(decision), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Data(format!("override line {}: expected `song_id accept|reject`", n + 1)));
        };
        let accept = match decision {
            "accept" => true,
            "reject" => false,
            other => return Err(Error::Data(format!("override line {}: unknown decision `{other}`", n + 1))),
        };
        out.insert(id.to_string(), accept);
    }
    Ok(out)
}

/// Replaces the computed decision for songs listed in `overrides`.
pub fn apply_override(report: &mut LeakageReport, overrides: &BTreeMap<String, bool>) {
    if let Some(&accept) = overrides.get(&report.song_id) {
        report.accepted = accept;
        report.reasons.push(format!("manual override: {}", if accept { "accept" } else { "reject" }));
    }
}

/// Curates every song directory under `root` in parallel, sorted by id.
pub fn curate_dir<F>(root: impl AsRef<Path>, table: &KeywordTable, separator: F) -> Result<Vec<LeakageReport>>
where
    F: Fn(&AudioClip) -> Result<Vec<AudioClip>> + Sync,
{
    let mut dirs: Vec<_> =
        fs::read_dir(root.as_ref())?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs.par_iter().map(|d| leakage_matrix(&load_song_dir(d, table)?, &separator)).collect()
}
