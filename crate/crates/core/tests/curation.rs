use htdemucs::curation::{
    activity_fraction, apply_override, curate_dir, leakage_matrix, load_song_dir, map_stem_name, parse_overrides,
    select_song, KeywordTable, LeakageReport, SongStems,
};
use htdemucs::dsp::{save_audio, AudioClip};
use htdemucs::synthdata::{generate_song, write_song, SynthSpec};
use htdemucs::{Error, Result};
use proptest::prelude::*;

fn sources() -> Vec<String> {
    ["drums", "bass", "other", "vocals"].map(String::from).to_vec()
}

fn index_of(song: &SongStems, x: &AudioClip) -> usize {
    song.stems.iter().position(|s| s.samples().data() == x.samples().data()).expect("isolated stem")
}

/// Output `j` of stem `i` is `x_i · gain(i, j)`.
fn gain_stub<'a>(
    song: &'a SongStems,
    gain: impl Fn(usize, usize) -> f32 + 'a,
) -> impl Fn(&AudioClip) -> Result<Vec<AudioClip>> + 'a {
    move |x| {
        let i = index_of(song, x);
        (0..song.stems.len()).map(|j| x.scaled(gain(i, j))).collect()
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

#[test]
fn stem_names_map_by_keyword() {
    let t = KeywordTable::default();
    let cases = [
        ("vocals2", Some("vocals")),
        ("SUB", Some("bass")),
        ("xyzzy", None),
        ("Kick_In", Some("drums")),
        ("fx", Some("other")),
        ("Lead Vox", Some("vocals")),
        ("Bass Drum", Some("drums")),
        ("e-gtr", Some("other")),
    ];
    for (raw, want) in cases {
        assert_eq!(map_stem_name(raw, &t).as_deref(), want, "{raw}");
    }
}

#[test]
fn activity_fraction_cases() {
    let rate = 1000;
    let silence = AudioClip::silence(2, 3 * rate, rate as u32).unwrap();
    assert_eq!(activity_fraction(&silence).unwrap(), 0.0);
    let loud = AudioClip::from_channels(vec![vec![0.1; 3 * rate]; 2], rate as u32).unwrap();
    assert_eq!(activity_fraction(&loud).unwrap(), 1.0);
    let half: Vec<f32> = (0..4 * rate).map(|i| if i < 2 * rate { 0.1 } else { 0.0 }).collect();
    let half = AudioClip::from_channels(vec![half], rate as u32).unwrap();
    assert_eq!(activity_fraction(&half).unwrap(), 0.5);
    let short = AudioClip::silence(1, rate - 1, rate as u32).unwrap();
    assert!(matches!(activity_fraction(&short), Err(Error::Length(_))));
}

#[test]
fn perfect_separator_gives_identity_and_accepts() {
    let song = generate_song(&SynthSpec::new(11, 4.0)).unwrap();
    let report = leakage_matrix(&song, gain_stub(&song, |i, j| f32::from(u8::from(i == j)))).unwrap();
    assert_eq!(report.p, identity(4));
    assert!(report.accepted, "{:?}", report.reasons);
    assert!(report.activity.iter().all(|&a| a >= 0.3));
}

#[test]
fn pass_through_gives_all_ones_and_rejects() {
    let song = generate_song(&SynthSpec::new(12, 3.0)).unwrap();
    let report = leakage_matrix(&song, gain_stub(&song, |_, _| 1.0)).unwrap();
    assert!(report.p.iter().flatten().all(|&v| v == 1.0));
    assert!(!report.accepted);
    assert_eq!(report.reasons.len(), 12);
}

#[test]
fn leakage_below_and_above_the_gate() {
    let song = generate_song(&SynthSpec::new(13, 3.0)).unwrap();
    let db = |d: f32| 10f32.powf(d / 20.0);
    let quiet = leakage_matrix(&song, gain_stub(&song, |i, j| if i == j { 1.0 } else { db(-12.0) })).unwrap();
    assert_eq!(quiet.p, identity(4));
    assert!(quiet.accepted);
    let loud = leakage_matrix(&song, gain_stub(&song, |i, j| if i == j { 1.0 } else { db(-8.0) })).unwrap();
    assert!(loud.p.iter().flatten().all(|&v| v == 1.0));
}

#[test]
fn leakage_is_invariant_to_uniform_gain() {
    let song = generate_song(&SynthSpec::new(14, 3.0)).unwrap();
    let leak = |i: usize, j: usize| if i == j { 0.9 } else { 0.3 + 0.05 * j as f32 };
    let base = leakage_matrix(&song, gain_stub(&song, leak)).unwrap();
    for alpha in [0.5f32, 2.0] {
        let scaled = SongStems::new(
            song.song_id.clone(),
            song.sources.clone(),
            song.stems.iter().map(|s| s.scaled(alpha).unwrap()).collect(),
        )
        .unwrap();
        let report = leakage_matrix(&scaled, gain_stub(&scaled, leak)).unwrap();
        assert_eq!(report.p, base.p, "alpha {alpha}");
    }
}

#[test]
fn silent_stem_leaves_its_row_undefined() {
    let mut song = generate_song(&SynthSpec::new(15, 2.0)).unwrap();
    song.stems[2] = AudioClip::silence(2, song.frames(), song.sample_rate()).unwrap();
    let report = leakage_matrix(&song, |x: &AudioClip| Ok(vec![x.clone(); 4])).unwrap();
    assert!(!report.defined[2]);
    assert!(!report.accepted);
    assert!(report.reasons.iter().any(|r| r.contains("other") && r.contains("undefined")));
}

fn report(p: Vec<Vec<f64>>, activity: Vec<f64>) -> LeakageReport {
    LeakageReport {
        song_id: "s".into(),
        sources: sources(),
        activity,
        p,
        defined: vec![true; 4],
        accepted: false,
        reasons: vec![],
    }
}

#[test]
fn selection_thresholds_are_strict() {
    assert!(select_song(&report(identity(4), vec![1.0; 4])).0);
    let mut p = identity(4);
    p[1][1] = 0.70;
    let (ok, reasons) = select_song(&report(p, vec![1.0; 4]));
    assert!(!ok);
    assert_eq!(reasons.len(), 1);
    let mut p = identity(4);
    p[0][3] = 0.30;
    assert!(!select_song(&report(p, vec![1.0; 4])).0);
    let (ok, reasons) = select_song(&report(identity(4), vec![1.0, 1.0, 1.0, 0.2]));
    assert!(!ok);
    assert!(reasons[0].starts_with("vocals activity"), "{reasons:?}");
}

proptest! {
    #[test]
    fn selection_is_monotone(
        vals in proptest::collection::vec(0.0f64..1.0, 16),
        act in proptest::collection::vec(0.0f64..1.0, 4),
        cell in 0usize..16,
        delta in 0.0f64..1.0,
    ) {
        let p: Vec<Vec<f64>> = vals.chunks(4).map(|c| c.to_vec()).collect();
        let before = select_song(&report(p.clone(), act.clone())).0;
        let mut q = p;
        let (i, j) = (cell / 4, cell % 4);
        q[i][j] = if i == j { (q[i][j] + delta).min(1.0) } else { (q[i][j] - delta).max(0.0) };
        let after = select_song(&report(q, act)).0;
        prop_assert!(!before || after);
    }
}

#[test]
fn song_dirs_merge_and_report_labels() {
    let dir = tempfile::tempdir().unwrap();
    let song_dir = dir.path().join("song-a");
    std::fs::create_dir(&song_dir).unwrap();
    let rate = 1000u32;
    let tone = |v: f32| AudioClip::from_channels(vec![vec![v; 2000]; 2], rate).unwrap();
    for (name, v) in [
        ("Lead Vox", 0.1),
        ("kick", 0.2),
        ("snare", 0.3),
        ("SUB", 0.4),
        ("gtr", 0.05),
        ("xyzzy", 0.9),
        ("mixture", 1.0),
    ] {
        save_audio(&tone(v), song_dir.join(format!("{name}.wav"))).unwrap();
    }
    let song = load_song_dir(&song_dir, &KeywordTable::default()).unwrap();
    assert_eq!(song.song_id, "song-a");
    assert_eq!(song.sources, vec!["vocals", "drums", "bass", "other"]);
    let first = |s: &str| song.stem(s).unwrap().samples().data()[0];
    assert!((first("drums") - 0.5).abs() < 1e-6);
    assert!((first("vocals") - 0.1).abs() < 1e-6);
    assert_eq!(song.unmatched, vec!["xyzzy"]);
    assert_eq!(song.raw_names["drums"], vec!["kick", "snare"]);
}

#[test]
fn overrides_force_decisions() {
    let o = parse_overrides("# reviewed\nsong-a accept\nsong-b reject # noisy\n\n").unwrap();
    let mut r = report(identity(4), vec![0.0; 4]);
    r.song_id = "song-a".into();
    apply_override(&mut r, &o);
    assert!(r.accepted);
    assert!(matches!(parse_overrides("song-a maybe"), Err(Error::Data(_))));
    assert!(matches!(parse_overrides("song-a"), Err(Error::Data(_))));
}

#[test]
fn synthetic_tree_is_accepted_by_a_perfect_separator() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        write_song(&generate_song(&SynthSpec::new(seed, 3.0)).unwrap(), dir.path()).unwrap();
    }
    let table = KeywordTable::default();
    let originals: Vec<SongStems> =
        (0..3).map(|s| load_song_dir(dir.path().join(format!("synth-{s:04}")), &table).unwrap()).collect();
    let reports = curate_dir(dir.path(), &table, |x: &AudioClip| {
        let song = originals.iter().find(|s| s.stems.iter().any(|c| c.samples().data() == x.samples().data())).unwrap();
        let i = index_of(song, x);
        (0..4).map(|j| x.scaled(f32::from(u8::from(i == j)))).collect()
    })
    .unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r.accepted && r.p == identity(4)));
    let json = serde_json::to_string(&reports[0]).unwrap();
    assert!(json.contains("\"accepted\":true"));
}
