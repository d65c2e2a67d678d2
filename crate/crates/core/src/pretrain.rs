//! Multitask audio-encoder pretraining: every task is rendered as text and learned
//! with a prefix-conditioned captioning loss.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AudioFeatures, EventKind, ManifestEntry, TaskTag};
use crate::encoders::{init_linear, linear, AudioEncoder, AudioEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, ParameterStore, Tape, Tensor, Var};
use crate::text::{Vocabulary, EOT, PAD};

pub const MAPPER_PREFIX: &str = "mapper";
pub const DECODER_PREFIX: &str = "decoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    /// Number of continuous prefix vectors (2k).
    pub prefix_tokens: usize,
    pub hidden: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            prefix_tokens: 8,
            hidden: 256,
        }
    }
}

/// Two-layer GELU MLP turning one audio vector into `prefix_tokens` decoder inputs.
#[derive(Debug, Clone)]
pub struct MapperNetwork {
    name: String,
    input: usize,
    hidden: usize,
    prefix_tokens: usize,
    width: usize,
}

impl MapperNetwork {
    pub fn new(name: &str, input: usize, width: usize, cfg: &MapperConfig) -> Result<Self> {
        if cfg.prefix_tokens == 0 || cfg.hidden == 0 || input == 0 || width == 0 {
            return Err(Error::Config("mapper sizes must be positive".into()));
        }
        Ok(Self {
            name: name.to_string(),
            input,
            hidden: cfg.hidden,
            prefix_tokens: cfg.prefix_tokens,
            width,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn prefix_tokens(&self) -> usize {
        self.prefix_tokens
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        init_linear(store, &format!("{}.fc1", self.name), self.input, self.hidden, rng)?;
        init_linear(
            store,
            &format!("{}.fc2", self.name),
            self.hidden,
            self.prefix_tokens * self.width,
            rng,
        )
    }

    /// `[N, input]` to `[N * prefix_tokens, width]`, rows grouped per input.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::dim("map_prefix", &shape, &[self.input]));
        }
        let h = linear(tape, store, &format!("{}.fc1", self.name), x)?;
        let h = tape.gelu(h);
        let p = linear(tape, store, &format!("{}.fc2", self.name), h)?;
        tape.reshape(p, &[shape[0] * self.prefix_tokens, self.width])
    }

    /// Prefix for a single audio vector, `[prefix_tokens, width]`.
    pub fn map_prefix(&self, store: &ParameterStore, audio_embedding: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, audio_embedding.len()], audio_embedding.to_vec())?);
        let p = self.forward(&mut tape, store, x)?;
        Ok(tape.value(p).clone())
    }
}

/// EOT-terminated target ids `c_1 .. c_l` without padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionTarget {
    ids: Vec<usize>,
}

impl CaptionTarget {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Contract("caption target is empty".into()));
        }
        if ids.last() != Some(&EOT) || ids[..ids.len() - 1].iter().any(|&i| i == EOT || i == PAD) {
            return Err(Error::Contract(
                "caption target must end in its only EOT and contain no PAD".into(),
            ));
        }
        Ok(Self { ids })
    }

    pub fn from_text(text: &str, vocab: &Vocabulary, max_text_len: usize) -> Result<Self> {
        let seq = vocab.encode(text, max_text_len)?;
        Self::new(seq.ids()[..seq.content_len()].to_vec())
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Teacher-forcing decoder inputs: each target minus its final token, PAD-filled to
/// the longest row.
pub fn teacher_inputs(targets: &[&CaptionTarget]) -> Vec<Vec<usize>> {
    let len = targets.iter().map(|t| t.len() - 1).max().unwrap_or(0);
    targets
        .iter()
        .map(|t| {
            let mut ids = t.ids[..t.len() - 1].to_vec();
            ids.resize(len, PAD);
            ids
        })
        .collect()
}

/// Mean over the batch of summed target NLL, from logits `[B, P + L, W]` where the
/// logits at position `P - 1 + j` predict target token `j`.
pub fn captioning_loss_from_logits(
    tape: &mut Tape,
    logits: Var,
    targets: &[&CaptionTarget],
    prefix_len: usize,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let b = targets.len();
    if b == 0 || targets.iter().any(|t| t.is_empty()) {
        return Err(Error::Contract("captioning loss needs non-empty targets".into()));
    }
    if prefix_len == 0 {
        return Err(Error::Contract("captioning loss needs a prefix of at least one vector".into()));
    }
    let max_len = targets.iter().map(|t| t.len()).max().unwrap_or(0);
    if shape.len() != 3 || shape[0] != b || shape[1] < prefix_len - 1 + max_len {
        return Err(Error::dim("captioning_loss", &shape, &[b, prefix_len - 1 + max_len]));
    }
    let ids: Vec<&[usize]> = targets.iter().map(|t| t.ids()).collect();
    summed_target_nll(tape, logits, &ids, prefix_len)
}

/// Batch-mean of the summed NLL of `ids[i][j]` under the logits at `P - 1 + j`.
/// Ids are not checked for EOT termination.
pub(crate) fn summed_target_nll(tape: &mut Tape, logits: Var, ids: &[&[usize]], prefix_len: usize) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (b, seq, vocab) = (shape[0], shape[1], shape[2]);
    let mut rows = vec![None; b * seq];
    for (i, t) in ids.iter().enumerate() {
        for (j, &id) in t.iter().enumerate() {
            rows[i * seq + prefix_len - 1 + j] = Some(id);
        }
    }
    let flat = tape.reshape(logits, &[b * seq, vocab])?;
    let total = tape.cross_entropy_sum(flat, &rows)?;
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Captioning loss for a batch: the decoder reads `prefix` (`[B * P, width]`) and
/// the teacher-forced target tokens.
pub fn captioning_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    decoder: &TextEncoder,
    prefix: Var,
    prefix_len: usize,
    targets: &[&CaptionTarget],
) -> Result<Var> {
    if targets.iter().any(|t| t.is_empty()) || targets.is_empty() {
        return Err(Error::Contract("captioning loss needs non-empty targets".into()));
    }
    let inputs = teacher_inputs(targets);
    let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = decoder.decode_logits(tape, store, &refs, Some((prefix, prefix_len)))?;
    captioning_loss_from_logits(tape, logits, targets, prefix_len)
}

/// How a task turns an entry's metadata into target text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTemplate {
    Classification,
    Captioning,
    Qa,
    Attributes,
}

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 4] = [
        TaskTemplate::Classification,
        TaskTemplate::Captioning,
        TaskTemplate::Qa,
        TaskTemplate::Attributes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskTemplate::Classification => "classification",
            TaskTemplate::Captioning => "captioning",
            TaskTemplate::Qa => "qa",
            TaskTemplate::Attributes => "attributes",
        }
    }

    /// Whether an entry tagged with `tags` takes part in this task.
    pub fn applies(self, entry: &ManifestEntry) -> bool {
        let tags = &entry.tasks;
        match self {
            TaskTemplate::Classification => {
                tags.contains(&TaskTag::Classification) || tags.contains(&TaskTag::Multilabel)
            }
            TaskTemplate::Captioning => tags.contains(&TaskTag::Captioning),
            TaskTemplate::Qa => tags.contains(&TaskTag::Qa) && !entry.events().is_empty(),
            TaskTemplate::Attributes => {
                tags.contains(&TaskTag::Attributes) && entry.events().len() == 1
            }
        }
    }

    pub fn render(self, entry: &ManifestEntry, rng: &mut impl Rng) -> String {
        let labels = entry.labels.join(" and ");
        match self {
            TaskTemplate::Classification => format!("this is a sound of {labels}"),
            TaskTemplate::Captioning => entry
                .captions
                .choose(rng)
                .cloned()
                .unwrap_or_else(|| labels.clone()),
            TaskTemplate::Qa => render_qa(entry, rng),
            TaskTemplate::Attributes => match entry.events() {
                [e] => format!(
                    "a {} {} pitched {} sound",
                    if e.is_loud() { "loud" } else { "quiet" },
                    if e.kind.is_high_pitched() { "high" } else { "low" },
                    if e.is_long() { "long" } else { "short" }
                ),
                _ => labels,
            },
        }
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn render_qa(entry: &ManifestEntry, rng: &mut impl Rng) -> String {
    let labels = entry.labels.join(" and ");
    match entry.events() {
        [e] => match rng.random_range(0..4) {
            0 => format!("question what sound is this answer {labels}"),
            1 => format!("question is it loud answer {}", yes_no(e.is_loud())),
            2 => format!("question is it long answer {}", yes_no(e.is_long())),
            _ => format!("question is the pitch high answer {}", yes_no(e.kind.is_high_pitched())),
        },
        events => {
            if rng.random_bool(0.5) {
                format!("question what sounds are these answer {labels}")
            } else {
                let any_high = events.iter().any(|e| e.kind.is_high_pitched());
                format!("question is any sound high answer {}", yes_no(any_high))
            }
        }
    }
}

/// Words any task template can emit, for building the vocabulary.
pub fn template_words() -> Vec<String> {
    let mut words: Vec<String> = [
        "this is a sound of and question what sound is answer it loud long the pitch high",
        "sounds are these any yes no quiet low pitched short",
    ]
    .iter()
    .flat_map(|s| s.split_whitespace())
    .map(str::to_string)
    .collect();
    words.extend(EventKind::ALL.iter().map(|k| k.noun().to_string()));
    words
}

/// One pretraining task and the entries (by index into the feature list) it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTask {
    pub name: String,
    pub template: TaskTemplate,
    pub examples: Vec<usize>,
}

impl GenerationTask {
    /// Builds the task from the entries it applies to.
    pub fn from_entries(template: TaskTemplate, entries: &[&ManifestEntry]) -> Self {
        Self {
            name: template.name().to_string(),
            template,
            examples: (0..entries.len())
                .filter(|&i| template.applies(entries[i]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub tasks: Vec<TaskTemplate>,
    pub mapper: MapperConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            tasks: TaskTemplate::ALL.to_vec(),
            mapper: MapperConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("pretrain batch size and learning rate must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("pretrain.tasks must list at least one task".into()));
        }
        Ok(())
    }
}

/// Audio encoder, mapper and a separately trained decoder.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub audio: AudioEncoder,
    pub mapper: MapperNetwork,
    pub decoder: TextEncoder,
}

impl PretrainModel {
    pub fn new(
        audio: &AudioEncoderConfig,
        decoder: &TextEncoderConfig,
        mapper: &MapperConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        if mapper.prefix_tokens > decoder.max_prefix {
            return Err(Error::Config(format!(
                "mapper.prefix_tokens {} exceeds text_encoder.max_prefix {}",
                mapper.prefix_tokens, decoder.max_prefix
            )));
        }
        Ok(Self {
            audio: AudioEncoder::new(audio, crate::contrastive::AUDIO_PREFIX)?,
            mapper: MapperNetwork::new(MAPPER_PREFIX, audio.width, decoder.width, mapper)?,
            decoder: TextEncoder::new(decoder, vocab_size, DECODER_PREFIX)?,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.audio.init(store, rng)?;
        self.mapper.init(store, rng)?;
        self.decoder.init(store, rng)
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        audio: &[&AudioFeatures],
        targets: &[&CaptionTarget],
    ) -> Result<Var> {
        let patches = audio
            .iter()
            .map(|f| self.audio.patchify_values(&f.values, f.n_mels, f.n_frames))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = patches.iter().map(Vec::as_slice).collect();
        let emb = self.audio.forward_patches(tape, store, &refs)?;
        let prefix = self.mapper.forward(tape, store, emb)?;
        captioning_loss(tape, store, &self.decoder, prefix, self.mapper.prefix_tokens(), targets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub store: ParameterStore,
    pub history: Vec<PretrainRecord>,
    pub optimizer: AdamState,
}

/// Jointly trains audio encoder, mapper and decoder on the union of `tasks`. Each
/// epoch visits every (task, example) pair once in shuffled order; the target text
/// is rendered afresh at every visit.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_audio_encoder(
    model: &PretrainModel,
    mut store: ParameterStore,
    tasks: &[GenerationTask],
    entries: &[&ManifestEntry],
    audio: &[&AudioFeatures],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Input("pretraining needs at least one task".into()));
    }
    if entries.len() != audio.len() {
        return Err(Error::dim("pretrain", &[entries.len()], &[audio.len()]));
    }
    let pool: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(t, task)| task.examples.iter().map(move |&e| (t, e)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Input("pretraining tasks contain no examples".into()));
    }
    if pool.iter().any(|&(_, e)| e >= entries.len()) {
        return Err(Error::Input("task example index out of range".into()));
    }
    let max_len = model.decoder.config().max_text_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let targets = chunk
                .iter()
                .map(|&(t, e)| {
                    let text = tasks[t].template.render(entries[e], &mut rng);
                    CaptionTarget::from_text(&text, vocab, max_len)
                })
                .collect::<Result<Vec<_>>>()?;
            let target_refs: Vec<&CaptionTarget> = targets.iter().collect();
            let feats: Vec<&AudioFeatures> = chunk.iter().map(|&(_, e)| audio[e]).collect();
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &store, &feats, &target_refs)?;
            let value = tape.value(loss).item();
            step += 1;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss {value} at epoch {epoch}, step {step}"
                )));
            }
            tape.backward_into(loss, &mut store)?;
            adam_step(&mut store, &mut adam)?;
            losses.push(value);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {mean_loss:.4}");
        history.push(PretrainRecord {
            epoch,
            mean_loss,
            step_losses: losses,
        });
    }
    Ok(PretrainOutcome {
        store,
        history,
        optimizer: adam,
    })
}

#[cfg(test)]
mod tests;
