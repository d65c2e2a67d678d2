//! Deterministic synthetic audio-text corpus and its line-delimited manifest.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, truncate_or_pad, MelConfig, MelExtractor, MelSpectrogram, Waveform};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MIN_FREQ_HZ: f64 = 50.0;
pub const MAX_FREQ_HZ: f64 = 8000.0;
/// Amplitude at or above which an event is described as loud.
pub const LOUD_AMPLITUDE: f64 = 0.55;
/// Duration at or above which an event is described as long.
pub const LONG_SECONDS: f64 = 4.0;
const RAMP_SECONDS: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SineLow,
    SineHigh,
    ChirpUp,
    ChirpDown,
    WhiteNoise,
    ClickTrain,
    AmTone,
    SquareWave,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::SineLow,
        EventKind::SineHigh,
        EventKind::ChirpUp,
        EventKind::ChirpDown,
        EventKind::WhiteNoise,
        EventKind::ClickTrain,
        EventKind::AmTone,
        EventKind::SquareWave,
    ];

    /// Canonical noun; also used as the class label.
    pub fn noun(self) -> &'static str {
        match self {
            EventKind::SineLow => "hum",
            EventKind::SineHigh => "whistle",
            EventKind::ChirpUp => "sweep",
            EventKind::ChirpDown => "drop",
            EventKind::WhiteNoise => "hiss",
            EventKind::ClickTrain => "ticking",
            EventKind::AmTone => "warble",
            EventKind::SquareWave => "buzz",
        }
    }

    pub fn adjectives(self) -> &'static [&'static str] {
        match self {
            EventKind::SineLow => &["low", "deep", "steady", "droning"],
            EventKind::SineHigh => &["high", "shrill", "piercing", "thin"],
            EventKind::ChirpUp => &["rising", "upward", "ascending"],
            EventKind::ChirpDown => &["falling", "downward", "descending"],
            EventKind::WhiteNoise => &["noisy", "static", "rushing"],
            EventKind::ClickTrain => &["rhythmic", "clicking", "rapid"],
            EventKind::AmTone => &["wobbling", "pulsing", "wavering"],
            EventKind::SquareWave => &["harsh", "raspy", "electric"],
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.noun() == label)
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::SineLow => "sine_low",
            EventKind::SineHigh => "sine_high",
            EventKind::ChirpUp => "chirp_up",
            EventKind::ChirpDown => "chirp_down",
            EventKind::WhiteNoise => "white_noise",
            EventKind::ClickTrain => "click_train",
            EventKind::AmTone => "am_tone",
            EventKind::SquareWave => "square_wave",
        }
    }

    /// Whether the event's pitch is described as high.
    pub fn is_high_pitched(self) -> bool {
        matches!(
            self,
            EventKind::SineHigh | EventKind::WhiteNoise | EventKind::ClickTrain
        )
    }
}

/// One synthetic sound. `freq_hz` is the carrier (or start frequency for chirps),
/// `freq_end_hz` the chirp end frequency and `mod_hz` the AM rate or click rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoundEvent {
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_end_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mod_hz: Option<f64>,
    pub onset_s: f64,
    pub duration_s: f64,
    pub amplitude: f64,
}

impl SoundEvent {
    pub fn validate(&self) -> Result<()> {
        for f in [self.freq_hz, self.freq_end_hz].into_iter().flatten() {
            if !(MIN_FREQ_HZ..=MAX_FREQ_HZ).contains(&f) {
                return Err(Error::Config(format!(
                    "{} frequency {f} Hz outside [{MIN_FREQ_HZ}, {MAX_FREQ_HZ}]",
                    self.kind.name()
                )));
            }
        }
        let needs_freq = !matches!(self.kind, EventKind::WhiteNoise);
        if needs_freq && self.freq_hz.is_none() {
            return Err(Error::Config(format!("{} needs freq_hz", self.kind.name())));
        }
        let needs_end = matches!(self.kind, EventKind::ChirpUp | EventKind::ChirpDown);
        if needs_end && self.freq_end_hz.is_none() {
            return Err(Error::Config(format!("{} needs freq_end_hz", self.kind.name())));
        }
        let needs_mod = matches!(self.kind, EventKind::AmTone | EventKind::ClickTrain);
        if needs_mod && !self.mod_hz.is_some_and(|m| m > 0.0) {
            return Err(Error::Config(format!("{} needs positive mod_hz", self.kind.name())));
        }
        if !(1.0..=7.0).contains(&self.duration_s) {
            return Err(Error::Config(format!(
                "event duration {} s outside [1, 7]",
                self.duration_s
            )));
        }
        if !(self.onset_s >= 0.0) || !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::Config(
                "event onset must be >= 0 and amplitude in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn is_loud(&self) -> bool {
        self.amplitude >= LOUD_AMPLITUDE
    }

    pub fn is_long(&self) -> bool {
        self.duration_s >= LONG_SECONDS
    }

    /// Samples the event's parameters for `kind`, fitting it inside `clip_seconds`.
    pub fn random(
        kind: EventKind,
        min_duration_s: f64,
        max_duration_s: f64,
        clip_seconds: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let max_d = max_duration_s.min(clip_seconds);
        let duration_s = if max_d > min_duration_s {
            rng.random_range(min_duration_s..max_d)
        } else {
            min_duration_s
        };
        let onset_s = rng.random_range(0.0..=(clip_seconds - duration_s).max(0.0));
        let amplitude = rng.random_range(0.2..0.9);
        let (freq_hz, freq_end_hz, mod_hz) = match kind {
            EventKind::SineLow => (Some(rng.random_range(100.0..300.0)), None, None),
            EventKind::SineHigh => (Some(rng.random_range(3000.0..5000.0)), None, None),
            EventKind::ChirpUp => (
                Some(rng.random_range(300.0..400.0)),
                Some(rng.random_range(1800.0..2200.0)),
                None,
            ),
            EventKind::ChirpDown => (
                Some(rng.random_range(1800.0..2200.0)),
                Some(rng.random_range(300.0..400.0)),
                None,
            ),
            EventKind::WhiteNoise => (None, None, None),
            EventKind::ClickTrain => (
                Some(rng.random_range(5500.0..7000.0)),
                None,
                Some(rng.random_range(5.0..15.0)),
            ),
            EventKind::AmTone => (
                Some(rng.random_range(600.0..1000.0)),
                None,
                Some(rng.random_range(4.0..8.0)),
            ),
            EventKind::SquareWave => (Some(rng.random_range(150.0..600.0)), None, None),
        };
        Self {
            kind,
            freq_hz,
            freq_end_hz,
            mod_hz,
            onset_s,
            duration_s,
            amplitude,
        }
    }
}

fn event_sample(e: &SoundEvent, t: f64, phase: f64, rng: &mut ChaCha8Rng) -> f64 {
    let f = e.freq_hz.unwrap_or(0.0);
    match e.kind {
        EventKind::SineLow | EventKind::SineHigh => (2.0 * PI * f * t + phase).sin(),
        EventKind::ChirpUp | EventKind::ChirpDown => {
            let f1 = e.freq_end_hz.unwrap_or(f);
            let sweep = (f1 - f) / (2.0 * e.duration_s);
            (2.0 * PI * (f * t + sweep * t * t) + phase).sin()
        }
        EventKind::WhiteNoise => rng.random_range(-1.0..1.0),
        EventKind::ClickTrain => {
            let period = 1.0 / e.mod_hz.unwrap_or(1.0);
            let local = t % period;
            (-local / 0.002).exp() * (2.0 * PI * f * local).sin()
        }
        EventKind::AmTone => {
            let m = e.mod_hz.unwrap_or(0.0);
            let env = (1.0 + 0.9 * (2.0 * PI * m * t).sin()) / 1.9;
            env * (2.0 * PI * f * t + phase).sin()
        }
        EventKind::SquareWave => {
            let mut acc = 0.0;
            let mut k = 1.0;
            while k * f < MAX_FREQ_HZ {
                acc += (2.0 * PI * k * f * t + k * phase).sin() / k;
                k += 2.0;
            }
            acc * 4.0 / PI * 0.8
        }
    }
}

/// Renders one event into a clip of `clip_seconds`.
pub fn synthesize(
    event: &SoundEvent,
    seed: u64,
    sample_rate: u32,
    clip_seconds: f64,
) -> Result<Waveform> {
    synthesize_mix(std::slice::from_ref(event), seed, sample_rate, clip_seconds)
}

/// Sums events into one clip, clipping the mix to [-1, 1].
pub fn synthesize_mix(
    events: &[SoundEvent],
    seed: u64,
    sample_rate: u32,
    clip_seconds: f64,
) -> Result<Waveform> {
    if sample_rate == 0 || !(clip_seconds > 0.0) {
        return Err(Error::Config("sample rate and clip length must be positive".into()));
    }
    let sr = sample_rate as f64;
    let len = (clip_seconds * sr).round() as usize;
    let mut out = vec![0.0; len];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in events {
        e.validate()?;
        if e.freq_hz.is_some_and(|f| f >= sr / 2.0) {
            return Err(Error::Config(format!(
                "event frequency above Nyquist for {sample_rate} Hz"
            )));
        }
        let phase = rng.random_range(0.0..2.0 * PI);
        let start = (e.onset_s * sr).round() as usize;
        let n = (e.duration_s * sr).round() as usize;
        let ramp = (RAMP_SECONDS * sr).max(1.0);
        for i in 0..n {
            let Some(slot) = out.get_mut(start + i) else {
                break;
            };
            let gain = ((i as f64 + 1.0) / ramp).min((n - i) as f64 / ramp).min(1.0);
            *slot += e.amplitude * gain * event_sample(e, i as f64 / sr, phase, &mut rng);
        }
    }
    for s in &mut out {
        *s = s.clamp(-1.0, 1.0);
    }
    Waveform::new(out, sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Classification,
    Multilabel,
    Captioning,
    Qa,
    Attributes,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AudioSource {
    Synth { events: Vec<SoundEvent>, seed: u64 },
    Wav { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub source: AudioSource,
    pub captions: Vec<String>,
    pub labels: Vec<String>,
    #[serde(default)]
    pub tasks: Vec<TaskTag>,
}

impl ManifestEntry {
    pub fn events(&self) -> &[SoundEvent] {
        match &self.source {
            AudioSource::Synth { events, .. } => events,
            AudioSource::Wav { .. } => &[],
        }
    }

    pub fn is_single_event(&self) -> bool {
        self.labels.len() == 1
    }

    pub fn label_set(&self) -> BTreeSet<&str> {
        self.labels.iter().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub sample_rate_hz: u32,
    pub clip_seconds: f64,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn split(&self) -> CorpusSplit {
        let mut s = CorpusSplit::default();
        for e in &self.entries {
            match e.split {
                Split::Train => s.train.push(e.id.clone()),
                Split::Val => s.val.push(e.id.clone()),
                Split::Test => s.test.push(e.id.clone()),
            }
        }
        s
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.header.classes.iter().position(|c| c == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "manifest schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.header.schema_version
            )));
        }
        if self.header.classes.len() < 2 {
            return Err(Error::Validation("manifest declares fewer than 2 classes".into()));
        }
        let classes: HashSet<&str> = self.header.classes.iter().map(String::as_str).collect();
        let mut seen: HashSet<&str> = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(Error::Validation(format!(
                    "entry id `{}` appears more than once",
                    e.id
                )));
            }
            if e.captions.is_empty() || e.captions.iter().any(|c| c.trim().is_empty()) {
                return Err(Error::Validation(format!("entry `{}` has no captions", e.id)));
            }
            if e.labels.is_empty() {
                return Err(Error::Validation(format!("entry `{}` has no labels", e.id)));
            }
            if let Some(l) = e.labels.iter().find(|l| !classes.contains(l.as_str())) {
                return Err(Error::Validation(format!(
                    "entry `{}` has label `{l}` outside the declared classes",
                    e.id
                )));
            }
            for ev in e.events() {
                ev.validate()
                    .map_err(|err| Error::Validation(format!("entry `{}`: {err}", e.id)))?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
        line(serde_json::to_string(&self.header).expect("header serializes"))?;
        for e in &self.entries {
            line(serde_json::to_string(e).expect("entry serializes"))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `clapdesk synth-data` to generate a corpus".into(),
            });
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            };
            if header.is_none() {
                header = Some(serde_json::from_str::<ManifestHeader>(&line).map_err(parse_err)?);
            } else {
                entries.push(serde_json::from_str::<ManifestEntry>(&line).map_err(parse_err)?);
            }
        }
        let header = header.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing manifest header".into(),
        })?;
        let m = Manifest { header, entries };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub classes: Vec<EventKind>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of each split made of two-event mixtures.
    pub mixture_fraction: f64,
    pub captions_per_entry: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: vec![
                EventKind::SineLow,
                EventKind::SineHigh,
                EventKind::ChirpUp,
                EventKind::WhiteNoise,
                EventKind::ClickTrain,
                EventKind::AmTone,
            ],
            train: 2000,
            val: 200,
            test: 400,
            mixture_fraction: 0.25,
            captions_per_entry: 3,
            min_duration_s: 1.0,
            max_duration_s: 7.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let unique: HashSet<_> = self.classes.iter().collect();
        if self.classes.len() < 2 || unique.len() != self.classes.len() {
            return Err(Error::Config(
                "corpus.classes needs at least 2 distinct classes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mixture_fraction) {
            return Err(Error::Config("corpus.mixture_fraction must be in [0, 1]".into()));
        }
        if self.captions_per_entry == 0 {
            return Err(Error::Config("corpus.captions_per_entry must be >= 1".into()));
        }
        if !(1.0 <= self.min_duration_s && self.min_duration_s <= self.max_duration_s)
            || self.max_duration_s > 7.0
        {
            return Err(Error::Config(
                "corpus durations must satisfy 1 <= min <= max <= 7".into(),
            ));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::Config("corpus.train and corpus.test must be non-zero".into()));
        }
        Ok(())
    }
}

fn duration_word(e: &SoundEvent) -> &'static str {
    if e.is_long() {
        "long"
    } else {
        "short"
    }
}

fn loudness_word(e: &SoundEvent) -> &'static str {
    if e.is_loud() {
        "loud"
    } else {
        "quiet"
    }
}

/// Renders a caption for a single event with one of several templates.
pub fn render_single_caption(e: &SoundEvent, template: usize, rng: &mut impl Rng) -> String {
    let noun = e.kind.noun();
    let adj = e.kind.adjectives().choose(rng).copied().unwrap_or("");
    match template % 8 {
        0 => noun.to_string(),
        1 => format!("a {adj} {noun}"),
        2 => format!("the sound of a {noun}"),
        3 => format!("a {} {noun} can be heard", duration_word(e)),
        4 => format!("a {} {adj} {noun}", loudness_word(e)),
        5 => format!("someone hears a {adj} {noun}"),
        6 => format!("the sound of a {} {noun}", duration_word(e)),
        _ => format!("there is a {noun} in the recording"),
    }
}

pub fn render_mixture_caption(a: &SoundEvent, b: &SoundEvent, template: usize, rng: &mut impl Rng) -> String {
    let (na, nb) = (a.kind.noun(), b.kind.noun());
    let adj_a = a.kind.adjectives().choose(rng).copied().unwrap_or("");
    let adj_b = b.kind.adjectives().choose(rng).copied().unwrap_or("");
    match template % 5 {
        0 => format!("{na} and {nb}"),
        1 => format!("a {na} and a {nb}"),
        2 => format!("a {adj_a} {na} with a {nb}"),
        3 => format!("the sound of a {na} and a {adj_b} {nb}"),
        _ => format!("a {nb} mixed with a {adj_a} {na}"),
    }
}

fn render_captions(events: &[SoundEvent], count: usize, rng: &mut impl Rng) -> Vec<String> {
    let n_templates = if events.len() == 1 { 8 } else { 5 };
    let mut order: Vec<usize> = (0..n_templates).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    order
        .into_iter()
        .cycle()
        .take(count)
        .map(|t| match events {
            [e] => render_single_caption(e, t, rng),
            [a, b, ..] => render_mixture_caption(a, b, t, rng),
            [] => String::new(),
        })
        .collect()
}

fn split_counts(n: usize, mixture_fraction: f64) -> (usize, usize) {
    let mixtures = (n as f64 * mixture_fraction).round() as usize;
    (n - mixtures, mixtures)
}

/// Generates the manifest. Entry `i` draws from a dedicated random stream so the
/// result is a pure function of the configuration.
pub fn generate_corpus(cfg: &CorpusConfig, mel: &MelConfig) -> Result<Manifest> {
    cfg.validate()?;
    mel.validate()?;
    let c = cfg.classes.len();
    let pairs: Vec<(usize, usize)> = (0..c)
        .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
        .collect();
    let mut entries = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    let mut stream = 0u64;
    for (split, n) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        let (singles, _) = split_counts(n, cfg.mixture_fraction);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            stream += 1;
            let kinds: Vec<EventKind> = if i < singles {
                vec![cfg.classes[i % c]]
            } else {
                let (a, b) = pairs[(i - singles) % pairs.len()];
                vec![cfg.classes[a], cfg.classes[b]]
            };
            let mut events: Vec<SoundEvent> = kinds
                .iter()
                .map(|&k| {
                    SoundEvent::random(
                        k,
                        cfg.min_duration_s,
                        cfg.max_duration_s,
                        mel.clip_seconds,
                        &mut rng,
                    )
                })
                .collect();
            if events.len() > 1 {
                for e in &mut events {
                    e.amplitude = e.amplitude.min(0.5);
                }
            }
            let captions = render_captions(&events, cfg.captions_per_entry, &mut rng);
            let labels = kinds.iter().map(|k| k.noun().to_string()).collect();
            let tasks = if events.len() == 1 {
                vec![
                    TaskTag::Classification,
                    TaskTag::Captioning,
                    TaskTag::Qa,
                    TaskTag::Attributes,
                    TaskTag::Retrieval,
                ]
            } else {
                vec![TaskTag::Multilabel, TaskTag::Captioning, TaskTag::Qa, TaskTag::Retrieval]
            };
            entries.push(ManifestEntry {
                id: format!("{}-{i:05}", split.name()),
                split,
                source: AudioSource::Synth {
                    events,
                    seed: rng.random(),
                },
                captions,
                labels,
                tasks,
            });
        }
    }
    let manifest = Manifest {
        header: ManifestHeader {
            schema_version: SCHEMA_VERSION,
            sample_rate_hz: mel.sample_rate_hz,
            clip_seconds: mel.clip_seconds,
            classes: cfg.classes.iter().map(|k| k.noun().to_string()).collect(),
        },
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Renders an entry's waveform, already cut to the configured clip length.
pub fn entry_waveform(
    entry: &ManifestEntry,
    header: &ManifestHeader,
    base_dir: &Path,
    entry_seed: u64,
) -> Result<Waveform> {
    let w = match &entry.source {
        AudioSource::Synth { events, seed } => {
            synthesize_mix(events, *seed, header.sample_rate_hz, header.clip_seconds)?
        }
        AudioSource::Wav { path } => {
            let p = if path.is_absolute() {
                path.clone()
            } else {
                base_dir.join(path)
            };
            read_wav(&p)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(entry_seed);
    truncate_or_pad(&w, header.clip_seconds, &mut rng)
}

/// Log-mel features stored in single precision to halve corpus memory.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f32>,
}

impl AudioFeatures {
    pub fn from_spectrogram(s: &MelSpectrogram) -> Self {
        Self {
            n_mels: s.n_mels(),
            n_frames: s.n_frames(),
            values: s.values().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_spectrogram(&self) -> MelSpectrogram {
        let values = self.values.iter().map(|&v| v as f64).collect();
        MelSpectrogram::new(values, self.n_mels, self.n_frames).expect("consistent features")
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame] as f64
    }
}

/// Computes features for every entry in parallel; output order follows the manifest.
pub fn extract_features(
    manifest: &Manifest,
    mel: &MelConfig,
    base_dir: &Path,
    seed: u64,
) -> Result<Vec<AudioFeatures>> {
    if mel.sample_rate_hz != manifest.header.sample_rate_hz {
        return Err(Error::Config(format!(
            "mel sample rate {} differs from corpus sample rate {}",
            mel.sample_rate_hz, manifest.header.sample_rate_hz
        )));
    }
    let extractor = MelExtractor::new(mel)?;
    manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let w = entry_waveform(e, &manifest.header, base_dir, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
            Ok(AudioFeatures::from_spectrogram(&extractor.log_mel(&w)?))
        })
        .collect()
}

/// Mean log-mel vector over frames that are not pure silence.
pub fn active_mean(f: &AudioFeatures, silence_level: f64) -> Vec<f64> {
    let active: Vec<usize> = (0..f.n_frames)
        .filter(|&t| (0..f.n_mels).any(|m| f.get(m, t) > silence_level + 1e-6))
        .collect();
    let frames: Vec<usize> = if active.is_empty() {
        (0..f.n_frames).collect()
    } else {
        active
    };
    (0..f.n_mels)
        .map(|m| frames.iter().map(|&t| f.get(m, t)).sum::<f64>() / frames.len() as f64)
        .collect()
}

/// Nearest-centroid accuracy on single-event test entries, centroids fitted on
/// single-event training entries.
pub fn nearest_centroid_accuracy(
    manifest: &Manifest,
    features: &[AudioFeatures],
    silence_level: f64,
) -> Result<f64> {
    let c = manifest.header.classes.len();
    let dim = features.first().map_or(0, |f| f.n_mels);
    let mut sums = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    let mut tests = Vec::new();
    for (e, f) in manifest.entries.iter().zip(features) {
        if !e.is_single_event() {
            continue;
        }
        let k = manifest
            .class_index(&e.labels[0])
            .ok_or_else(|| Error::Validation(format!("unknown label in `{}`", e.id)))?;
        let v = active_mean(f, silence_level);
        match e.split {
            Split::Train => {
                counts[k] += 1;
                sums[k].iter_mut().zip(&v).for_each(|(s, x)| *s += x);
            }
            Split::Test => tests.push((k, v)),
            Split::Val => {}
        }
    }
    if counts.contains(&0) || tests.is_empty() {
        return Err(Error::Input(
            "separability check needs train examples of every class and test examples".into(),
        ));
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|x| x / n as f64).collect())
        .collect();
    let correct = tests
        .iter()
        .filter(|(k, v)| {
            let dist = |c: &Vec<f64>| c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..centroids.len())
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap_or(0);
            best == *k
        })
        .count();
    Ok(correct as f64 / tests.len() as f64)
}

#[cfg(test)]
mod tests;
