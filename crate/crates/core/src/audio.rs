//! Waveform handling and the log-mel front-end.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Input("waveform is empty".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub window_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub clip_seconds: f64,
    pub log_epsilon: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 44_100,
            window_size: 1024,
            hop_size: 320,
            n_mels: 64,
            fmin_hz: 50.0,
            fmax_hz: 8000.0,
            clip_seconds: 7.0,
            log_epsilon: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if self.sample_rate_hz == 0 {
            return Err(Error::Config("mel.sample_rate_hz must be positive".into()));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) {
            return Err(Error::Config(format!(
                "mel.fmin_hz ({}) must be below mel.fmax_hz ({})",
                self.fmin_hz, self.fmax_hz
            )));
        }
        if self.fmax_hz > nyquist {
            return Err(Error::Config(format!(
                "mel.fmax_hz ({}) exceeds the Nyquist frequency ({nyquist})",
                self.fmax_hz
            )));
        }
        if self.hop_size == 0 || self.window_size < self.hop_size {
            return Err(Error::Config(format!(
                "mel.window_size ({}) must be >= mel.hop_size ({}) > 0",
                self.window_size, self.hop_size
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("mel.n_mels must be at least 1".into()));
        }
        if !(self.clip_seconds > 0.0) || !(self.log_epsilon > 0.0) {
            return Err(Error::Config(
                "mel.clip_seconds and mel.log_epsilon must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_fft_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate_hz as f64).round() as usize
    }

    /// Frames produced for `len` samples without centre padding.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window_size).then(|| (len - self.window_size) / self.hop_size + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Log-mel energies, `n_mels` rows by `n_frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    n_mels: usize,
    n_frames: usize,
}

impl MelSpectrogram {
    pub fn new(values: Vec<f64>, n_mels: usize, n_frames: usize) -> Result<Self> {
        if values.len() != n_mels * n_frames {
            return Err(Error::dim("mel spectrogram", &[n_mels, n_frames], &[values.len()]));
        }
        Ok(Self {
            values,
            n_mels,
            n_frames,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn band(&self, mel: usize) -> &[f64] {
        &self.values[mel * self.n_frames..(mel + 1) * self.n_frames]
    }

    /// Per-band mean over time.
    pub fn mean_over_time(&self) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.band(m).iter().sum::<f64>() / self.n_frames as f64)
            .collect()
    }
}

/// One triangular filter stored as its nonzero FFT-bin range.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilter {
    pub start_bin: usize,
    pub weights: Vec<f64>,
    pub center_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    filters: Vec<MelFilter>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn filters(&self) -> &[MelFilter] {
        &self.filters
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Dense `n_mels × (window/2+1)` matrix.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.filters
            .iter()
            .map(|f| {
                let mut row = vec![0.0; self.n_bins];
                row[f.start_bin..f.start_bin + f.weights.len()].copy_from_slice(&f.weights);
                row
            })
            .collect()
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.filters) {
            *o = f
                .weights
                .iter()
                .zip(&power[f.start_bin..])
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

/// Triangular filters with centres equally spaced on the mel scale between
/// `fmin` and `fmax`, peak weight 1.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<MelFilterbank> {
    cfg.validate()?;
    let n_bins = cfg.n_fft_bins();
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.window_size as f64;
    let filters = points
        .windows(3)
        .map(|w| {
            let (left, center, right) = (w[0], w[1], w[2]);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let up = (f - left) / (center - left);
                let down = (right - f) / (right - center);
                let wgt = up.min(down).max(0.0);
                if wgt > 0.0 {
                    start.get_or_insert(k);
                    weights.push(wgt);
                } else if start.is_some() {
                    break;
                }
            }
            MelFilter {
                start_bin: start.unwrap_or(0),
                weights,
                center_hz: center,
            }
        })
        .collect();
    Ok(MelFilterbank { filters, n_bins })
}

/// Reusable STFT + filterbank state for one [`MelConfig`].
pub struct MelExtractor {
    cfg: MelConfig,
    bank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        let bank = mel_filterbank(cfg)?;
        let n = cfg.window_size;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg: cfg.clone(),
            bank,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let cfg = &self.cfg;
        if w.sample_rate() != cfg.sample_rate_hz {
            return Err(Error::Input(format!(
                "waveform sample rate {} Hz does not match config {} Hz (resampling is not supported)",
                w.sample_rate(),
                cfg.sample_rate_hz
            )));
        }
        let n_frames = cfg.frame_count(w.len()).ok_or_else(|| {
            Error::Input(format!(
                "waveform has {} samples, fewer than the window size {}",
                w.len(),
                cfg.window_size
            ))
        })?;
        let (n, n_mels) = (cfg.window_size, cfg.n_mels);
        let mut values = vec![0.0; n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; cfg.n_fft_bins()];
        let mut mel = vec![0.0; n_mels];
        let floor = cfg.log_epsilon.ln();
        for t in 0..n_frames {
            let frame = &w.samples()[t * cfg.hop_size..t * cfg.hop_size + n];
            if frame.iter().all(|&s| s == 0.0) {
                for m in 0..n_mels {
                    values[m * n_frames + t] = floor;
                }
                continue;
            }
            for ((b, &s), &h) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s * h, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.bank.apply(&power, &mut mel);
            for (m, e) in mel.iter().enumerate() {
                values[m * n_frames + t] = (e + cfg.log_epsilon).ln();
            }
        }
        MelSpectrogram::new(values, n_mels, n_frames)
    }
}

/// Convenience wrapper building a one-off [`MelExtractor`].
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(cfg)?.log_mel(w)
}

/// Random contiguous crop to `clip_seconds`, or zero padding at the end when shorter.
pub fn truncate_or_pad(w: &Waveform, clip_seconds: f64, rng: &mut impl Rng) -> Result<Waveform> {
    if !(clip_seconds > 0.0) {
        return Err(Error::Config("clip_seconds must be positive".into()));
    }
    if w.is_empty() {
        return Err(Error::Input("cannot crop an empty waveform".into()));
    }
    let target = (clip_seconds * w.sample_rate() as f64).round() as usize;
    let samples = match w.len().cmp(&target) {
        std::cmp::Ordering::Equal => w.samples().to_vec(),
        std::cmp::Ordering::Greater => {
            let offset = rng.random_range(0..=w.len() - target);
            w.samples()[offset..offset + target].to_vec()
        }
        std::cmp::Ordering::Less => {
            let mut s = w.samples().to_vec();
            s.resize(target, 0.0);
            s
        }
    };
    Waveform::new(samples, w.sample_rate())
}

/// Reads a mono WAV file in 16-bit PCM or 32-bit float format.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Input(format!(
            "{}: {} channels; only mono WAV is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Input(format!(
                "{}: unsupported WAV encoding {fmt:?} {bits}-bit; use 16-bit PCM or 32-bit float",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn write_wav(path: &Path, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let (bits, fmt) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: bits,
        sample_format: fmt,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        let s = s.clamp(-1.0, 1.0);
        match encoding {
            WavEncoding::Pcm16 => writer.write_sample((s * 32767.0).round() as i16)?,
            WavEncoding::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, seconds: f64, amp: f64, sr: u32) -> Waveform {
        let n = (seconds * sr as f64).round() as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    // independent re-derivation of the mel mapping used as the oracle below
    fn oracle_mel(f: f64) -> f64 {
        2595.0 * (1.0 + f / 700.0).log10()
    }

    fn oracle_hz(m: f64) -> f64 {
        700.0 * (10f64.powf(m / 2595.0) - 1.0)
    }

    /// Filter whose triangle gives the largest weight to `freq`.
    fn oracle_bin_containing(freq: f64, cfg: &MelConfig) -> usize {
        let (lo, hi) = (oracle_mel(cfg.fmin_hz), oracle_mel(cfg.fmax_hz));
        let step = (hi - lo) / (cfg.n_mels + 1) as f64;
        (0..cfg.n_mels)
            .map(|m| {
                let l = oracle_hz(lo + step * m as f64);
                let c = oracle_hz(lo + step * (m + 1) as f64);
                let r = oracle_hz(lo + step * (m + 2) as f64);
                let w = ((freq - l) / (c - l)).min((r - freq) / (r - c)).max(0.0);
                (m, w)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn ten_seconds_cropped_to_seven_contiguous() {
        let sr = 1000;
        let w = Waveform::new((0..10_000).map(|i| i as f64).collect(), sr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = truncate_or_pad(&w, 7.0, &mut rng).unwrap();
        assert_eq!(out.len(), 7000);
        let first = out.samples()[0];
        assert!(out.samples().iter().enumerate().all(|(i, &s)| s == first + i as f64));
    }

    #[test]
    fn exact_length_is_identity_and_short_is_zero_padded() {
        let sr = 100;
        let w = Waveform::new(vec![0.5; 700], sr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(truncate_or_pad(&w, 7.0, &mut rng).unwrap(), w);

        let short = Waveform::new(vec![0.25; 300], sr).unwrap();
        let out = truncate_or_pad(&short, 7.0, &mut rng).unwrap();
        assert_eq!(out.len(), 700);
        assert!(out.samples()[..300].iter().all(|&s| s == 0.25));
        assert!(out.samples()[300..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn empty_waveform_rejected() {
        assert!(Waveform::new(vec![], 44_100).is_err());
    }

    #[test]
    fn default_filterbank_shape_and_support() {
        let cfg = MelConfig::default();
        let bank = mel_filterbank(&cfg).unwrap();
        let dense = bank.to_dense();
        assert_eq!(dense.len(), 64);
        assert!(dense.iter().all(|r| r.len() == 513));
        let bin_hz = 44_100.0 / 1024.0;
        for row in &dense {
            assert!(row.iter().any(|&v| v > 0.0));
            assert!(row.iter().all(|&v| v >= 0.0));
            for (k, &v) in row.iter().enumerate() {
                let f = k as f64 * bin_hz;
                if f < cfg.fmin_hz || f > cfg.fmax_hz {
                    assert_eq!(v, 0.0, "bin {k} ({f} Hz) outside support");
                }
            }
        }
    }

    #[test]
    fn filter_centres_follow_mel_formula() {
        let cfg = MelConfig::default();
        let bank = mel_filterbank(&cfg).unwrap();
        let (lo, hi) = (oracle_mel(50.0), oracle_mel(8000.0));
        for (m, f) in bank.filters().iter().enumerate() {
            let want = oracle_hz(lo + (hi - lo) * (m + 1) as f64 / 65.0);
            assert!((f.center_hz - want).abs() < 1e-9, "{m}: {} vs {want}", f.center_hz);
        }
    }

    #[test]
    fn single_mel_peaks_at_mel_midpoint() {
        let cfg = MelConfig {
            n_mels: 1,
            ..MelConfig::default()
        };
        let bank = mel_filterbank(&cfg).unwrap();
        let mid = oracle_hz((oracle_mel(50.0) + oracle_mel(8000.0)) / 2.0);
        assert!((bank.filters()[0].center_hz - mid).abs() < 1e-9);
        let row = &bank.to_dense()[0];
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let bin_hz = 44_100.0 / 1024.0;
        assert!((peak as f64 * bin_hz - mid).abs() <= bin_hz);
    }

    #[test]
    fn fmax_above_nyquist_is_config_error() {
        let cfg = MelConfig {
            sample_rate_hz: 8000,
            ..MelConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn seven_seconds_gives_962_frames() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.clip_samples(), 308_700);
        assert_eq!(cfg.frame_count(308_700), Some(962));
    }

    #[test]
    fn silence_maps_to_log_epsilon() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 5000], 44_100).unwrap();
        let m = log_mel(&w, &cfg).unwrap();
        let floor = 1e-10f64.ln();
        assert!(m.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn one_kilohertz_sine_lands_in_its_bin() {
        let cfg = MelConfig::default();
        let m = log_mel(&sine(1000.0, 1.0, 0.5, 44_100), &cfg).unwrap();
        let means = m.mean_over_time();
        let argmax = means
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, oracle_bin_containing(1000.0, &cfg));
    }

    #[test]
    fn doubling_amplitude_adds_two_ln_two() {
        let cfg = MelConfig::default();
        let w = sine(440.0, 0.5, 0.3, 44_100);
        let a = log_mel(&w, &cfg).unwrap();
        let b = log_mel(&w.scaled(2.0), &cfg).unwrap();
        let mut checked = 0;
        for (x, y) in a.values().iter().zip(b.values()) {
            if *x > 1e-3f64.ln() {
                assert!((y - x - 2.0 * 2f64.ln()).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn sample_rate_mismatch_and_short_input_rejected() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.1; 2048], 16_000).unwrap();
        assert!(matches!(log_mel(&w, &cfg), Err(Error::Input(_))));
        let w = Waveform::new(vec![0.1; 1000], 44_100).unwrap();
        assert!(matches!(log_mel(&w, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn wav_round_trip_both_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let w = sine(220.0, 0.1, 0.5, 44_100);
        for (enc, tol) in [(WavEncoding::Pcm16, 1.0 / 32767.0), (WavEncoding::Float32, 1e-7)] {
            let path = dir.path().join(format!("{enc:?}.wav"));
            write_wav(&path, &w, enc).unwrap();
            let back = read_wav(&path).unwrap();
            assert_eq!(back.len(), w.len());
            assert!(back
                .samples()
                .iter()
                .zip(w.samples())
                .all(|(a, b)| (a - b).abs() <= tol));
        }
    }

    #[test]
    fn stereo_wav_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Input(_))));
    }

    proptest::proptest! {
        #[test]
        fn frame_count_matches_direct_loop(len in 1024usize..400_000) {
            let cfg = MelConfig::default();
            let mut count = 0;
            let mut start = 0;
            while start + cfg.window_size <= len {
                count += 1;
                start += cfg.hop_size;
            }
            proptest::prop_assert_eq!(cfg.frame_count(len), Some(count));
        }
    }
}
