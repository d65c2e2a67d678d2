use super::*;
use crate::audio::{hz_to_mel, log_mel, mel_to_hz};
use std::time::Instant;

fn tone(kind: EventKind, freq: f64) -> SoundEvent {
    SoundEvent {
        kind,
        freq_hz: Some(freq),
        freq_end_hz: None,
        mod_hz: None,
        onset_s: 0.0,
        duration_s: 2.0,
        amplitude: 0.5,
    }
}

// mel bin whose triangle peaks closest to `freq`, from the textbook spacing
fn expected_bin(freq: f64, cfg: &MelConfig) -> usize {
    let lo = 2595.0 * (1.0 + cfg.fmin_hz / 700.0).log10();
    let hi = 2595.0 * (1.0 + cfg.fmax_hz / 700.0).log10();
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let target = 2595.0 * (1.0 + freq / 700.0).log10();
    (0..cfg.n_mels)
        .min_by(|&a, &b| {
            let ca = lo + step * (a + 1) as f64;
            let cb = lo + step * (b + 1) as f64;
            (ca - target).abs().total_cmp(&(cb - target).abs())
        })
        .unwrap()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0
}

fn small_cfg(seed: u64) -> CorpusConfig {
    CorpusConfig {
        seed,
        train: 60,
        val: 12,
        test: 24,
        ..Default::default()
    }
}

#[test]
fn sine_440_peaks_in_expected_bin() {
    let cfg = MelConfig::default();
    let w = synthesize(&tone(EventKind::SineLow, 440.0), 1, 44_100, 2.0).unwrap();
    let m = log_mel(&w, &cfg).unwrap();
    assert_eq!(argmax(&m.mean_over_time()), expected_bin(440.0, &cfg));
    assert!((mel_to_hz(hz_to_mel(440.0)) - 440.0).abs() < 1e-9);
}

#[test]
fn zero_amplitude_is_silence() {
    let mut e = tone(EventKind::SquareWave, 300.0);
    e.amplitude = 0.0;
    let w = synthesize(&e, 3, 44_100, 3.0).unwrap();
    assert!(w.samples().iter().all(|&s| s == 0.0));
}

#[test]
fn synthesis_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in EventKind::ALL {
        let e = SoundEvent::random(kind, 1.0, 7.0, 7.0, &mut rng);
        e.validate().unwrap();
        let a = synthesize(&e, 42, 44_100, 7.0).unwrap();
        let b = synthesize(&e, 42, 44_100, 7.0).unwrap();
        assert_eq!(a.samples(), b.samples(), "{}", kind.name());
        assert!(a.samples().iter().any(|&s| s != 0.0));
        assert!(a.samples().iter().all(|s| s.abs() <= 1.0));
    }
}

#[test]
fn invalid_frequency_is_config_error() {
    let e = tone(EventKind::SineHigh, 9000.0);
    assert!(matches!(synthesize(&e, 0, 44_100, 2.0), Err(Error::Config(_))));
    let e = tone(EventKind::SineLow, 20.0);
    assert!(matches!(synthesize(&e, 0, 44_100, 2.0), Err(Error::Config(_))));
}

#[test]
fn default_corpus_counts_and_disjoint_splits() {
    let m = generate_corpus(&CorpusConfig::default(), &MelConfig::default()).unwrap();
    assert_eq!(m.entries.len(), 2600);
    let s = m.split();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2000, 200, 400));
    let mut all: HashSet<&String> = HashSet::new();
    for id in s.train.iter().chain(&s.val).chain(&s.test) {
        assert!(all.insert(id));
    }
    assert_eq!(m.header.classes.len(), 6);
}

#[test]
fn captions_contain_canonical_nouns() {
    let m = generate_corpus(&CorpusConfig::default(), &MelConfig::default()).unwrap();
    for e in &m.entries {
        assert!(e.captions.len() >= 1);
        for c in &e.captions {
            let words = crate::text::normalize_words(c);
            for l in &e.labels {
                assert!(words.contains(l), "`{c}` lacks `{l}`");
            }
        }
    }
}

#[test]
fn at_least_three_templates_per_class() {
    let m = generate_corpus(&CorpusConfig::default(), &MelConfig::default()).unwrap();
    for class in &m.header.classes {
        let shapes: HashSet<String> = m
            .entries
            .iter()
            .filter(|e| e.labels == [class.clone()])
            .flat_map(|e| e.captions.iter())
            .map(|c| {
                let adjs = EventKind::from_label(class).unwrap().adjectives();
                crate::text::normalize_words(c)
                    .into_iter()
                    .map(|w| if adjs.contains(&w.as_str()) { "ADJ".to_string() } else { w })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        assert!(shapes.len() >= 3, "{class}: {shapes:?}");
    }
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let mel = MelConfig::default();
    let a = generate_corpus(&small_cfg(1), &mel).unwrap();
    let b = generate_corpus(&small_cfg(1), &mel).unwrap();
    let c = generate_corpus(&small_cfg(2), &mel).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn mixtures_contain_both_components() {
    let mel = MelConfig::default();
    let m = generate_corpus(&small_cfg(5), &mel).unwrap();
    let extractor = MelExtractor::new(&mel).unwrap();
    let mut checked = 0;
    for e in m.entries.iter().filter(|e| !e.is_single_event()).take(6) {
        let AudioSource::Synth { events, seed } = &e.source else {
            panic!("synthetic entry expected")
        };
        assert_eq!(events.len(), 2);
        let mix = extractor
            .log_mel(&synthesize_mix(events, *seed, 44_100, 7.0).unwrap())
            .unwrap();
        for (ev, label) in events.iter().zip(&e.labels) {
            assert_eq!(ev.kind.noun(), label);
            let solo = extractor
                .log_mel(&synthesize_mix(std::slice::from_ref(ev), *seed, 44_100, 7.0).unwrap())
                .unwrap();
            let peak = argmax(&active_mean(
                &AudioFeatures::from_spectrogram(&solo),
                mel.log_epsilon.ln(),
            ));
            // where the component sounds, its strongest band stays prominent in the mix
            let frames: Vec<usize> = (0..solo.n_frames())
                .filter(|&t| solo.get(peak, t) > -5.0)
                .collect();
            assert!(!frames.is_empty());
            let mean = |s: &MelSpectrogram| {
                frames.iter().map(|&t| s.get(peak, t)).sum::<f64>() / frames.len() as f64
            };
            let (m, s) = (mean(&mix), mean(&solo));
            assert!(m > s - 3.0, "{}: {m} vs {s}", e.id);
        }
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    let m = generate_corpus(&small_cfg(3), &MelConfig::default()).unwrap();
    m.write(&path).unwrap();
    assert_eq!(Manifest::load(&path).unwrap(), m);
}

fn write_lines(lines: &[String]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, lines.join("\n")).unwrap();
    (dir, path)
}

fn manifest_lines() -> Vec<String> {
    let m = generate_corpus(&small_cfg(3), &MelConfig::default()).unwrap();
    std::iter::once(serde_json::to_string(&m.header).unwrap())
        .chain(m.entries.iter().take(4).map(|e| serde_json::to_string(e).unwrap()))
        .collect()
}

#[test]
fn missing_captions_error_names_id() {
    let mut lines = manifest_lines();
    let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    v["captions"] = serde_json::json!([]);
    lines[2] = v.to_string();
    let (_d, p) = write_lines(&lines);
    match Manifest::load(&p) {
        Err(Error::Validation(msg)) => assert!(msg.contains("train-00001"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unknown_field_reports_line_number() {
    let mut lines = manifest_lines();
    let mut v: serde_json::Value = serde_json::from_str(&lines[3]).unwrap();
    v["colour"] = serde_json::json!("red");
    lines[3] = v.to_string();
    let (_d, p) = write_lines(&lines);
    match Manifest::load(&p) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 4);
            assert!(message.contains("colour"));
        }
        other => panic!("unexpected {other:?}"),
    }
    let mut lines = manifest_lines();
    lines[1] = "{not json".into();
    let (_d, p) = write_lines(&lines);
    assert!(matches!(Manifest::load(&p), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn id_in_two_splits_is_rejected() {
    let mut lines = manifest_lines();
    let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    v["split"] = serde_json::json!("test");
    lines.push(v.to_string());
    let (_d, p) = write_lines(&lines);
    assert!(matches!(Manifest::load(&p), Err(Error::Validation(_))));
}

#[test]
fn missing_manifest_names_producer() {
    let err = Manifest::load(Path::new("/nonexistent/manifest.jsonl")).unwrap_err();
    assert!(err.to_string().contains("synth-data"), "{err}");
}

#[test]
fn ten_thousand_entries_load_quickly() {
    let cfg = CorpusConfig {
        train: 9000,
        val: 500,
        test: 500,
        ..Default::default()
    };
    let m = generate_corpus(&cfg, &MelConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    m.write(&path).unwrap();
    let start = Instant::now();
    let loaded = Manifest::load(&path).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(loaded.entries.len(), 10_000);
    assert!(elapsed < 1.0, "took {elapsed} s");
}

#[test]
fn too_few_classes_rejected() {
    let cfg = CorpusConfig {
        classes: vec![EventKind::SineLow],
        ..Default::default()
    };
    assert!(matches!(
        generate_corpus(&cfg, &MelConfig::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn classes_are_separable_by_nearest_centroid() {
    let mel = MelConfig::default();
    let m = generate_corpus(&small_cfg(11), &mel).unwrap();
    let f = extract_features(&m, &mel, Path::new("."), 0).unwrap();
    assert_eq!(f[0].n_frames, 962);
    let acc = nearest_centroid_accuracy(&m, &f, mel.log_epsilon.ln()).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn wav_sources_are_read_and_padded() {
    let dir = tempfile::tempdir().unwrap();
    let w = synthesize(&tone(EventKind::SineLow, 200.0), 0, 44_100, 2.0).unwrap();
    crate::audio::write_wav(&dir.path().join("a.wav"), &w, crate::audio::WavEncoding::Float32)
        .unwrap();
    let header = ManifestHeader {
        schema_version: SCHEMA_VERSION,
        sample_rate_hz: 44_100,
        clip_seconds: 7.0,
        classes: vec!["hum".into(), "hiss".into()],
    };
    let entry = ManifestEntry {
        id: "x".into(),
        split: Split::Test,
        source: AudioSource::Wav { path: "a.wav".into() },
        captions: vec!["a hum".into()],
        labels: vec!["hum".into()],
        tasks: vec![],
    };
    let out = entry_waveform(&entry, &header, dir.path(), 0).unwrap();
    assert_eq!(out.len(), 7 * 44_100);
}

