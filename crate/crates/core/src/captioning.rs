//! Audio captioning on top of a trained contrastive model: a mapper turns the audio
//! embedding into a prefix for the frozen text encoder, which decodes greedily.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::ClapModel;
use crate::corpus::AudioFeatures;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, ParameterStore, Tape, Tensor};
use crate::pretrain::{captioning_loss, CaptionTarget, MapperConfig, MapperNetwork, MAPPER_PREFIX};
use crate::text::{normalize_words, Vocabulary, EOT, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub max_decode_len: usize,
    pub mapper: MapperConfig,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            max_decode_len: 16,
            mapper: MapperConfig::default(),
        }
    }
}

impl CaptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.max_decode_len == 0 {
            return Err(Error::Config(
                "caption batch size, learning rate and max_decode_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The contrastive model plus a mapper from audio embeddings to decoder prefixes.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub clap: ClapModel,
    pub mapper: MapperNetwork,
}

impl CaptionModel {
    pub fn new(clap: ClapModel, mapper: &MapperConfig) -> Result<Self> {
        let max_prefix = clap.text.config().max_prefix;
        if mapper.prefix_tokens > max_prefix {
            return Err(Error::Config(format!(
                "mapper.prefix_tokens {} exceeds text_encoder.max_prefix {max_prefix}",
                mapper.prefix_tokens
            )));
        }
        let mapper = MapperNetwork::new(MAPPER_PREFIX, clap.config().embed_dim, clap.text.width(), mapper)?;
        Ok(Self { clap, mapper })
    }

    pub fn init_mapper(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.mapper.init(store, rng)
    }

    /// Unit-norm audio embeddings, one row per clip.
    pub fn embed(&self, store: &ParameterStore, audio: &[&AudioFeatures], batch_size: usize) -> Result<Tensor> {
        Ok(self.clap.audio_embeddings(store, audio, batch_size)?.values().clone())
    }

    fn loss_value(&self, store: &ParameterStore, emb: &Tensor, targets: &[&CaptionTarget]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.batch_loss(&mut tape, store, emb, targets)?;
        Ok(tape.value(loss).item())
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        emb: &Tensor,
        targets: &[&CaptionTarget],
    ) -> Result<crate::numerics::Var> {
        let x = tape.constant(emb.clone());
        let prefix = self.mapper.forward(tape, store, x)?;
        captioning_loss(tape, store, &self.clap.text, prefix, self.mapper.prefix_tokens(), targets)
    }

    /// Mean captioning loss over `pairs` evaluated in batches.
    pub fn dataset_loss(&self, store: &ParameterStore, emb: &Tensor, targets: &[CaptionTarget], batch_size: usize) -> Result<f64> {
        let (n, d) = emb.rows_cols();
        if n != targets.len() || n == 0 {
            return Err(Error::dim("caption dataset", &[n], &[targets.len()]));
        }
        let mut total = 0.0;
        for start in (0..n).step_by(batch_size) {
            let end = (start + batch_size).min(n);
            let rows = Tensor::new(vec![end - start, d], emb.data()[start * d..end * d].to_vec())?;
            let refs: Vec<&CaptionTarget> = targets[start..end].iter().collect();
            total += self.loss_value(store, &rows, &refs)? * (end - start) as f64;
        }
        Ok(total / n as f64)
    }

    /// Greedy decoding from one audio embedding. PAD is never emitted; decoding
    /// stops at EOT or after `max_len` tokens.
    pub fn generate_ids(&self, store: &ParameterStore, embedding: &[f64], max_len: usize) -> Result<Vec<usize>> {
        let prefix = self.mapper.map_prefix(store, embedding)?;
        let p = self.mapper.prefix_tokens();
        let limit = max_len.min(self.clap.text.config().max_text_len);
        let mut ids: Vec<usize> = Vec::new();
        while ids.len() < limit {
            let mut tape = Tape::new();
            let pv = tape.constant(prefix.clone());
            let logits = self.clap.text.decode_logits(&mut tape, store, &[&ids], Some((pv, p)))?;
            let out = tape.value(logits);
            let vocab = out.shape()[2];
            let pos = p + ids.len() - 1;
            let row = &out.data()[pos * vocab..(pos + 1) * vocab];
            let next = (0..vocab)
                .filter(|&i| i != PAD)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if row[b] >= row[i] => Some(b),
                    _ => Some(i),
                })
                .ok_or_else(|| Error::Contract("vocabulary has no token besides PAD".into()))?;
            if next == EOT {
                break;
            }
            ids.push(next);
        }
        Ok(ids)
    }

    pub fn generate_caption(
        &self,
        store: &ParameterStore,
        vocab: &Vocabulary,
        embedding: &[f64],
        max_len: usize,
    ) -> Result<String> {
        let ids = self.generate_ids(store, embedding, max_len)?;
        let words = ids
            .iter()
            .map(|&i| {
                vocab
                    .token(i)
                    .ok_or_else(|| Error::Input(format!("token id {i} is outside the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl CaptionReport {
    pub fn loss_ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

/// Trains only the mapper. Every other parameter in `store` is frozen for the
/// duration and checked bit-for-bit afterwards.
pub fn train_captioner(
    model: &CaptionModel,
    store: &mut ParameterStore,
    audio: &[&AudioFeatures],
    targets: &[CaptionTarget],
    cfg: &CaptionConfig,
) -> Result<CaptionReport> {
    cfg.validate()?;
    if audio.len() != targets.len() || audio.is_empty() {
        return Err(Error::Input(format!(
            "captioner needs matching non-empty audio and targets ({} vs {})",
            audio.len(),
            targets.len()
        )));
    }
    let mapper_prefix = format!("{MAPPER_PREFIX}.");
    let snapshot: ParameterStore = {
        let mut s = ParameterStore::new();
        for (name, p) in store.iter().filter(|(n, _)| !n.starts_with(&mapper_prefix)) {
            s.insert(name, p.value.clone())?;
        }
        s
    };
    let frozen_before: Vec<String> = store.frozen_names().map(str::to_string).collect();
    store.freeze_all_except(&[mapper_prefix.as_str()]);

    let result = run_mapper_training(model, store, audio, targets, cfg);

    store.unfreeze_all();
    for name in &frozen_before {
        store.freeze(name);
    }
    for name in snapshot.names() {
        if !store.values_bit_equal(&snapshot, name) {
            return Err(Error::Invariant(format!(
                "frozen parameter `{name}` changed during captioner training"
            )));
        }
    }
    result
}

fn run_mapper_training(
    model: &CaptionModel,
    store: &mut ParameterStore,
    audio: &[&AudioFeatures],
    targets: &[CaptionTarget],
    cfg: &CaptionConfig,
) -> Result<CaptionReport> {
    let emb = model.embed(store, audio, cfg.batch_size)?;
    let d = emb.rows_cols().1;
    let initial_loss = model.dataset_loss(store, &emb, targets, cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<f64> = chunk.iter().flat_map(|&i| emb.row(i).iter().copied()).collect();
            let batch = Tensor::new(vec![chunk.len(), d], rows)?;
            let refs: Vec<&CaptionTarget> = chunk.iter().map(|&i| &targets[i]).collect();
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, store, &batch, &refs)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("captioning loss {value} at epoch {epoch}")));
            }
            tape.backward_into(loss, store)?;
            adam_step(store, &mut adam)?;
            sum += value * chunk.len() as f64;
            steps += 1;
        }
        let mean = sum / targets.len() as f64;
        log::info!("captioner epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let final_loss = model.dataset_loss(store, &emb, targets, cfg.batch_size)?;
    Ok(CaptionReport {
        initial_loss,
        final_loss,
        epoch_losses,
        steps,
    })
}

/// Best token-multiset F1 between `candidate` and any reference.
pub fn caption_overlap_score(candidate: &str, references: &[&str]) -> f64 {
    let cand = normalize_words(candidate);
    references
        .iter()
        .map(|r| multiset_f1(&cand, &normalize_words(r)))
        .fold(0.0, f64::max)
}

fn multiset_f1(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in b {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in a {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / a.len() as f64;
    let r = common as f64 / b.len() as f64;
    2.0 * p * r / (p + r)
}
