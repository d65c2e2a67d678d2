//! Joint embedding space: projection heads, learnable temperature, the symmetric
//! cross-entropy objective and the contrastive training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AudioFeatures;
use crate::encoders::{AudioEncoder, AudioEncoderConfig, TextEncoder, TextEncoderConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, ParameterStore, Tape, Tensor, Var};
use crate::text::TokenSequence;
use crate::zeroshot::{evaluate_suite, ZeroShotSuite};

pub const AUDIO_PREFIX: &str = "audio";
pub const TEXT_PREFIX: &str = "text";
pub const LOGIT_SCALE: &str = "logit_scale";

/// Linear map into the joint space followed by row-wise L2 normalisation.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    name: String,
    input: usize,
    dim: usize,
}

impl ProjectionHead {
    pub fn new(name: &str, input: usize, dim: usize) -> Result<Self> {
        if input == 0 || dim == 0 {
            return Err(Error::Config(format!("{name}: projection sizes must be positive")));
        }
        Ok(Self {
            name: name.to_string(),
            input,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        store.insert(
            self.weight_name(),
            Tensor::randn(vec![self.input, self.dim], INIT_STD, rng),
        )
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::dim(&self.name, shape, &[self.input, self.dim]));
        }
        let w = tape.param(store, &self.weight_name())?;
        let y = tape.matmul(x, w)?;
        Ok(tape.l2_normalize_rows(y))
    }

    pub fn project(&self, store: &ParameterStore, x: &Tensor, modality: Modality) -> Result<EmbeddingBatch> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let e = self.forward(&mut tape, store, v)?;
        EmbeddingBatch::new(tape.value(e).clone(), modality)
    }
}

/// Learnable logit scale kept as its logarithm and clamped after every update.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureParam {
    pub name: String,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for TemperatureParam {
    fn default() -> Self {
        Self {
            name: LOGIT_SCALE.to_string(),
            min_scale: 1.0,
            max_scale: 200.0,
        }
    }
}

impl TemperatureParam {
    /// `temperature` is the divisor: the initial scale is `1 / temperature`.
    pub fn init(&self, store: &mut ParameterStore, temperature: f64) -> Result<()> {
        if !(temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let log = (1.0 / temperature)
            .clamp(self.min_scale, self.max_scale)
            .ln();
        store.insert(self.name.clone(), Tensor::new(vec![1], vec![log])?)
    }

    pub fn scale(&self, store: &ParameterStore) -> Result<f64> {
        Ok(store.get(&self.name)?.data()[0].exp())
    }

    pub fn var(&self, tape: &mut Tape, store: &ParameterStore) -> Result<Var> {
        let p = tape.param(store, &self.name)?;
        Ok(tape.exp(p))
    }

    pub fn clamp(&self, store: &mut ParameterStore) -> Result<()> {
        let (lo, hi) = (self.min_scale.ln(), self.max_scale.ln());
        let v = &mut store.get_mut(&self.name)?.data_mut()[0];
        *v = v.clamp(lo, hi);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    values: Tensor,
    modality: Modality,
}

impl EmbeddingBatch {
    pub fn new(values: Tensor, modality: Modality) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::dim("embedding batch", values.shape(), &[0, 0]));
        }
        for r in 0..values.rows_cols().0 {
            let norm = values.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!("embedding row {r} has norm {norm}")));
            }
        }
        Ok(Self { values, modality })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.values.rows_cols().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub scale: f64,
}

/// `C = scale * E_t E_a^T`; row `i` is text `i`, column `j` is audio `j`.
pub fn similarity(text: &EmbeddingBatch, audio: &EmbeddingBatch, scale: f64) -> Result<SimilarityMatrix> {
    let (nt, dt) = text.values.rows_cols();
    let (na, da) = audio.values.rows_cols();
    if nt != na || dt != da {
        return Err(Error::dim("similarity", &[nt, dt], &[na, da]));
    }
    let mut tape = Tape::new();
    let t = tape.constant(text.values.clone());
    let a = tape.constant(audio.values.clone());
    let c = tape.matmul_nt(t, a)?;
    let c = tape.scale(c, scale);
    Ok(SimilarityMatrix {
        values: tape.value(c).clone(),
        scale,
    })
}

/// Differentiable symmetric cross-entropy over a square logit matrix:
/// `0.5 * (mean_i -log softmax_row(C)[i][i] + mean_j -log softmax_col(C)[j][j])`.
pub fn clap_loss_var(tape: &mut Tape, c: Var) -> Result<Var> {
    let shape = tape.shape(c).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::Contract(format!(
            "similarity matrix must be square and non-empty, got {shape:?}"
        )));
    }
    let n = shape[0];
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    let rows = tape.cross_entropy_sum(c, &targets)?;
    let ct = tape.transpose(c)?;
    let cols = tape.cross_entropy_sum(ct, &targets)?;
    let total = tape.add(rows, cols)?;
    Ok(tape.scale(total, 0.5 / n as f64))
}

pub fn clap_loss(c: &SimilarityMatrix) -> Result<f64> {
    clap_loss_matrix(&c.values)
}

pub fn clap_loss_matrix(c: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(c.clone());
    let l = clap_loss_var(&mut tape, v)?;
    Ok(tape.value(l).item())
}

/// Reduce-on-plateau learning-rate schedule monitoring a loss to be minimised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's monitored value and returns the learning rate to use next.
    pub fn step(&mut self, value: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| value < b) {
            self.best = Some(value);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClapConfig {
    pub embed_dim: usize,
    /// Initial temperature; the logit scale starts at `1 / temperature`.
    pub temperature: f64,
    pub max_logit_scale: f64,
}

impl Default for ClapConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            temperature: 0.007,
            max_logit_scale: 200.0,
        }
    }
}

/// Both encoders, their projection heads and the logit scale.
#[derive(Debug, Clone)]
pub struct ClapModel {
    pub audio: AudioEncoder,
    pub text: TextEncoder,
    pub audio_proj: ProjectionHead,
    pub text_proj: ProjectionHead,
    pub temperature: TemperatureParam,
    cfg: ClapConfig,
}

impl ClapModel {
    pub fn new(
        audio: &AudioEncoderConfig,
        text: &TextEncoderConfig,
        clap: &ClapConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        if !(clap.max_logit_scale >= 1.0) {
            return Err(Error::Config("clap.max_logit_scale must be >= 1".into()));
        }
        Ok(Self {
            audio: AudioEncoder::new(audio, AUDIO_PREFIX)?,
            text: TextEncoder::new(text, vocab_size, TEXT_PREFIX)?,
            audio_proj: ProjectionHead::new("proj_audio", audio.width, clap.embed_dim)?,
            text_proj: ProjectionHead::new("proj_text", text.width, clap.embed_dim)?,
            temperature: TemperatureParam {
                max_scale: clap.max_logit_scale,
                ..Default::default()
            },
            cfg: clap.clone(),
        })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.audio.init(store, rng)?;
        self.text.init(store, rng)?;
        self.audio_proj.init(store, rng)?;
        self.text_proj.init(store, rng)?;
        self.temperature.init(store, self.cfg.temperature)
    }

    pub fn patches(&self, f: &AudioFeatures) -> Result<Vec<f64>> {
        self.audio.patchify_values(&f.values, f.n_mels, f.n_frames)
    }

    pub fn embed_audio_var(&self, tape: &mut Tape, store: &ParameterStore, audio: &[&AudioFeatures]) -> Result<Var> {
        let patches = audio.iter().map(|f| self.patches(f)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = patches.iter().map(Vec::as_slice).collect();
        let x = self.audio.forward_patches(tape, store, &refs)?;
        self.audio_proj.forward(tape, store, x)
    }

    pub fn embed_text_var(&self, tape: &mut Tape, store: &ParameterStore, text: &[&TokenSequence]) -> Result<Var> {
        let batch = pad_batch(text)?;
        let x = self.text.encode(tape, store, &batch)?;
        self.text_proj.forward(tape, store, x)
    }

    /// Symmetric loss for aligned (audio, caption) pairs.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        audio: &[&AudioFeatures],
        text: &[&TokenSequence],
    ) -> Result<Var> {
        if audio.len() != text.len() || audio.len() < 2 {
            return Err(Error::Input(format!(
                "contrastive batch needs >= 2 aligned pairs, got {} audio / {} text",
                audio.len(),
                text.len()
            )));
        }
        let ea = self.embed_audio_var(tape, store, audio)?;
        let et = self.embed_text_var(tape, store, text)?;
        let c = tape.matmul_nt(et, ea)?;
        let s = self.temperature.var(tape, store)?;
        let c = tape.scale_by(c, s)?;
        clap_loss_var(tape, c)
    }

    pub fn audio_embeddings(
        &self,
        store: &ParameterStore,
        audio: &[&AudioFeatures],
        batch_size: usize,
    ) -> Result<EmbeddingBatch> {
        let mut rows = Vec::new();
        for chunk in audio.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let e = self.embed_audio_var(&mut tape, store, chunk)?;
            rows.extend_from_slice(tape.value(e).data());
        }
        let d = self.audio_proj.dim();
        EmbeddingBatch::new(Tensor::new(vec![audio.len(), d], rows)?, Modality::Audio)
    }

    pub fn text_embeddings(
        &self,
        store: &ParameterStore,
        text: &[&TokenSequence],
        batch_size: usize,
    ) -> Result<EmbeddingBatch> {
        let mut rows = Vec::new();
        for chunk in text.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let e = self.embed_text_var(&mut tape, store, chunk)?;
            rows.extend_from_slice(tape.value(e).data());
        }
        let d = self.text_proj.dim();
        EmbeddingBatch::new(Tensor::new(vec![text.len(), d], rows)?, Modality::Text)
    }

    pub fn config(&self) -> &ClapConfig {
        &self.cfg
    }

    pub fn logit_scale(&self, store: &ParameterStore) -> Result<f64> {
        self.temperature.scale(store)
    }
}

/// Trims trailing PAD so every sequence has the length of the longest content.
pub fn pad_batch(seqs: &[&TokenSequence]) -> Result<Vec<TokenSequence>> {
    let len = seqs.iter().map(|s| s.content_len()).max().unwrap_or(0);
    seqs.iter().map(|s| s.with_len(len)).collect()
}

/// One audio clip with its tokenised captions.
#[derive(Debug, Clone)]
pub struct PairExample<'a> {
    pub audio: &'a AudioFeatures,
    pub captions: Vec<TokenSequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClapTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
}

impl Default for ClapTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 15,
            seed: 0,
        }
    }
}

impl ClapTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(
                "learning rate must be positive and plateau factor in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
    pub logit_scale: f64,
    pub zero_shot_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClapOutcome {
    pub last: ParameterStore,
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamState,
}

fn mean_loss(model: &ClapModel, store: &ParameterStore, pairs: &[PairExample], batch_size: usize) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in pairs.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let audio: Vec<&AudioFeatures> = chunk.iter().map(|p| p.audio).collect();
        let text: Vec<&TokenSequence> = chunk.iter().map(|p| &p.captions[0]).collect();
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, store, &audio, &text)?;
        total += tape.value(l).item();
        batches += 1;
    }
    Ok((batches > 0).then(|| total / batches as f64))
}

/// Trains both encoders, the heads and the temperature with Adam. The learning rate
/// drops on validation-loss plateaus; the returned `best` store is the epoch with the
/// highest zero-shot score on `suite` (or the last epoch without a suite).
pub fn train_clap(
    model: &ClapModel,
    mut store: ParameterStore,
    train: &[PairExample],
    val: &[PairExample],
    suite: Option<&ZeroShotSuite>,
    cfg: &ClapTrainConfig,
) -> Result<ClapOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Input("contrastive training needs at least 2 pairs".into()));
    }
    if train.iter().chain(val).any(|p| p.captions.is_empty()) {
        return Err(Error::Input("every training pair needs a caption".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut plateau = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let audio: Vec<&AudioFeatures> = chunk.iter().map(|&i| train[i].audio).collect();
            let text: Vec<&TokenSequence> = chunk
                .iter()
                .map(|&i| {
                    let caps = &train[i].captions;
                    &caps[rng.random_range(0..caps.len())]
                })
                .collect();
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &store, &audio, &text)?;
            let value = tape.value(loss).item();
            step += 1;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "contrastive loss {value} at epoch {epoch}, step {step}"
                )));
            }
            tape.backward_into(loss, &mut store)?;
            adam_step(&mut store, &mut adam)?;
            model.temperature.clamp(&mut store)?;
            total += value;
            batches += 1;
        }
        let train_loss = total / batches.max(1) as f64;
        let val_loss = mean_loss(model, &store, val, cfg.batch_size)?;
        let lr_used = adam.learning_rate;
        adam.learning_rate = plateau.step(val_loss.unwrap_or(train_loss), adam.learning_rate);
        let score = suite
            .map(|s| evaluate_suite(model, &store, s).map(|r| r.score))
            .transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr_used,
            logit_scale: model.logit_scale(&store)?,
            zero_shot_score: score,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4} val {} lr {lr_used:e} score {}",
            val_loss.map_or("-".into(), |v| format!("{v:.4}")),
            score.map_or("-".into(), |v| format!("{v:.4}")),
        );
        history.push(record);
        if let Some(s) = score {
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, epoch, store.clone()));
            }
        }
    }
    let (best_score, best_epoch, best_store) = match best {
        Some((s, e, st)) => (Some(s), e, st),
        None => (None, cfg.epochs, store.clone()),
    };
    Ok(ClapOutcome {
        last: store,
        best: best_store,
        best_epoch,
        best_score,
        history,
        optimizer: adam,
    })
}
