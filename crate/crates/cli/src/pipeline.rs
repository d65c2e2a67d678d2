//! Stage functions shared by the subcommands and the acceptance suite. Nothing here
//! touches the filesystem except the feature cache.

use std::path::Path;

use clapdesk::captioning::{train_captioner, CaptionModel, CaptionReport};
use clapdesk::config::{RunConfig, TextInit};
use clapdesk::contrastive::{train_clap, ClapModel, ClapOutcome, PairExample, AUDIO_PREFIX, TEXT_PREFIX};
use clapdesk::corpus::{extract_features, generate_corpus, AudioFeatures, Manifest, ManifestEntry, Split};
use clapdesk::numerics::ParameterStore;
use clapdesk::pretrain::{
    pretrain_audio_encoder, template_words, CaptionTarget, GenerationTask, PretrainModel, PretrainOutcome,
    DECODER_PREFIX,
};
use clapdesk::text::{normalize_words, TokenSequence, Vocabulary};
use clapdesk::zeroshot::{build_suite, evaluate_suite, render_prompt, SuiteResult, ZeroShotSuite};
use clapdesk::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent seed per stage from the run seed (FNV-1a over the label).
pub fn seeded(base: u64, label: &str) -> u64 {
    let mut h = base ^ 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeded(seed, label))
}

/// A corpus manifest with the vocabulary built from its training text.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn synthesize(cfg: &RunConfig) -> Result<Self> {
        let manifest = generate_corpus(&cfg.corpus, &cfg.mel)?;
        let vocab = build_vocab(&manifest, cfg)?;
        Ok(Self { manifest, vocab })
    }

    pub fn entries(&self, split: Split) -> Vec<usize> {
        self.manifest.indices(split)
    }
}

/// Words from training captions, task templates, class names and the prompt
/// template. Test captions are never consulted.
pub fn build_vocab(manifest: &Manifest, cfg: &RunConfig) -> Result<Vocabulary> {
    let mut texts: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .flat_map(|e| e.captions.iter().cloned())
        .collect();
    texts.extend(template_words());
    for c in &manifest.header.classes {
        texts.push(render_prompt(c, cfg.suite.prompt_template.as_deref()));
    }
    Vocabulary::build(&texts, cfg.vocab_size)
}

/// Cache key for features: mel settings, crop seed and the manifest itself.
pub fn feature_digest(manifest: &Manifest, cfg: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(json_of(&cfg.mel)?.as_bytes());
    h.update(cfg.seed.to_le_bytes());
    for e in &manifest.entries {
        h.update(serde_json::to_vec(e).map_err(|e| Error::Input(e.to_string()))?);
    }
    Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn json_of<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Input(e.to_string()))
}

pub fn compute_features(manifest: &Manifest, cfg: &RunConfig, base_dir: &Path) -> Result<Vec<AudioFeatures>> {
    extract_features(manifest, &cfg.mel, base_dir, seeded(cfg.seed, "crop"))
}

const FEATURE_MAGIC: &[u8; 8] = b"CDFEAT01";

/// Reads `{dir}/features-{digest}.bin`, or computes and writes it.
pub fn cached_features(manifest: &Manifest, cfg: &RunConfig, dir: &Path) -> Result<Vec<AudioFeatures>> {
    let path = dir.join(format!("features-{}.bin", feature_digest(manifest, cfg)?));
    if let Ok(bytes) = std::fs::read(&path) {
        if let Some(f) = decode_features(&bytes, manifest.entries.len()) {
            return Ok(f);
        }
        log::warn!("ignoring unreadable feature cache {}", path.display());
    }
    let features = compute_features(manifest, cfg, dir)?;
    std::fs::write(&path, encode_features(&features)).map_err(|e| Error::io(&path, e))?;
    Ok(features)
}

fn encode_features(f: &[AudioFeatures]) -> Vec<u8> {
    let mut out = FEATURE_MAGIC.to_vec();
    out.extend((f.len() as u64).to_le_bytes());
    for x in f {
        out.extend((x.n_mels as u64).to_le_bytes());
        out.extend((x.n_frames as u64).to_le_bytes());
        for v in &x.values {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn decode_features(bytes: &[u8], expected: usize) -> Option<Vec<AudioFeatures>> {
    let mut pos = 8;
    if bytes.get(..8)? != FEATURE_MAGIC {
        return None;
    }
    let u64_at = |pos: &mut usize| -> Option<usize> {
        let v = u64::from_le_bytes(bytes.get(*pos..*pos + 8)?.try_into().ok()?);
        *pos += 8;
        usize::try_from(v).ok()
    };
    let n = u64_at(&mut pos)?;
    if n != expected {
        return None;
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let n_mels = u64_at(&mut pos)?;
        let n_frames = u64_at(&mut pos)?;
        let len = n_mels.checked_mul(n_frames)?;
        let raw = bytes.get(pos..pos + len * 4)?;
        pos += len * 4;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(AudioFeatures { n_mels, n_frames, values });
    }
    (pos == bytes.len()).then_some(out)
}

/// Every caption of every entry in `split`, tokenized.
pub fn pair_examples<'a>(
    corpus: &Corpus,
    features: &'a [AudioFeatures],
    split: Split,
    max_text_len: usize,
) -> Result<Vec<PairExample<'a>>> {
    corpus
        .entries(split)
        .into_iter()
        .map(|i| {
            let captions = corpus.manifest.entries[i]
                .captions
                .iter()
                .map(|c| corpus.vocab.encode(c, max_text_len))
                .collect::<Result<Vec<TokenSequence>>>()?;
            Ok(PairExample {
                audio: &features[i],
                captions,
            })
        })
        .collect()
}

pub fn pretrain_model(cfg: &RunConfig, vocab_size: usize) -> Result<PretrainModel> {
    PretrainModel::new(&cfg.audio_encoder, &cfg.text_encoder, &cfg.pretrain.mapper, vocab_size)
}

/// Multitask pretraining on the training split, from a seeded random init.
pub fn run_pretrain(cfg: &RunConfig, corpus: &Corpus, features: &[AudioFeatures]) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let model = pretrain_model(cfg, corpus.vocab.len())?;
    let mut store = ParameterStore::new();
    model.init(&mut store, &mut rng_for(cfg.seed, "pretrain-init"))?;
    let idx = corpus.entries(Split::Train);
    let entries: Vec<&ManifestEntry> = idx.iter().map(|&i| &corpus.manifest.entries[i]).collect();
    let audio: Vec<&AudioFeatures> = idx.iter().map(|&i| &features[i]).collect();
    let tasks: Vec<GenerationTask> = cfg
        .pretrain
        .tasks
        .iter()
        .map(|&t| GenerationTask::from_entries(t, &entries))
        .collect();
    pretrain_audio_encoder(&model, store, &tasks, &entries, &audio, &corpus.vocab, &cfg.pretrain)
}

pub fn clap_model(cfg: &RunConfig, vocab_size: usize) -> Result<ClapModel> {
    ClapModel::new(&cfg.audio_encoder, &cfg.text_encoder, &cfg.clap, vocab_size)
}

/// Random init, then the audio encoder (and, with `text_init = pretrained_decoder`,
/// the text encoder) copied from a pretraining store.
pub fn init_clap(cfg: &RunConfig, vocab_size: usize, pretrained: Option<&ParameterStore>) -> Result<(ClapModel, ParameterStore)> {
    let model = clap_model(cfg, vocab_size)?;
    let mut store = ParameterStore::new();
    model.init(&mut store, &mut rng_for(cfg.seed, "clap-init"))?;
    match pretrained {
        Some(p) => {
            let n = store.copy_from(p, &format!("{AUDIO_PREFIX}."))?;
            if n == 0 {
                return Err(Error::Checkpoint("pretraining checkpoint holds no audio encoder".into()));
            }
            if cfg.text_init == TextInit::PretrainedDecoder {
                store.copy_renamed(p, DECODER_PREFIX, TEXT_PREFIX)?;
            }
        }
        None if cfg.text_init == TextInit::PretrainedDecoder => {
            return Err(Error::Config(
                "text_init = pretrained_decoder needs a pretraining checkpoint".into(),
            ))
        }
        None => {}
    }
    Ok((model, store))
}

pub fn suite<'a>(cfg: &RunConfig, corpus: &Corpus, features: &'a [AudioFeatures], split: Split) -> Result<ZeroShotSuite<'a>> {
    build_suite(
        &corpus.manifest,
        features,
        split,
        &corpus.vocab,
        cfg.text_encoder.max_text_len,
        &cfg.suite,
    )
}

/// Contrastive training with best-epoch selection on the validation suite.
pub fn run_train_clap(
    cfg: &RunConfig,
    corpus: &Corpus,
    features: &[AudioFeatures],
    model: &ClapModel,
    store: ParameterStore,
) -> Result<ClapOutcome> {
    cfg.validate()?;
    let max_len = cfg.text_encoder.max_text_len;
    let train = pair_examples(corpus, features, Split::Train, max_len)?;
    let val = pair_examples(corpus, features, Split::Val, max_len)?;
    let val_suite = if val.is_empty() {
        None
    } else {
        Some(suite(cfg, corpus, features, Split::Val)?)
    };
    train_clap(model, store, &train, &val, val_suite.as_ref(), &cfg.train)
}

pub fn evaluate(
    cfg: &RunConfig,
    corpus: &Corpus,
    features: &[AudioFeatures],
    model: &ClapModel,
    store: &ParameterStore,
    split: Split,
) -> Result<SuiteResult> {
    let s = suite(cfg, corpus, features, split)?;
    evaluate_suite(model, store, &s)
}

/// First caption of each entry in `split` as a captioning target.
pub fn caption_targets(corpus: &Corpus, split: Split, max_text_len: usize) -> Result<Vec<(usize, CaptionTarget)>> {
    corpus
        .entries(split)
        .into_iter()
        .map(|i| {
            let text = &corpus.manifest.entries[i].captions[0];
            Ok((i, CaptionTarget::from_text(text, &corpus.vocab, max_text_len)?))
        })
        .collect()
}

/// Adds a fresh mapper to a trained contrastive store and trains it alone.
pub fn run_caption(
    cfg: &RunConfig,
    clap: ClapModel,
    store: &mut ParameterStore,
    features: &[AudioFeatures],
    pairs: &[(usize, CaptionTarget)],
) -> Result<(CaptionModel, CaptionReport)> {
    let model = CaptionModel::new(clap, &cfg.caption.mapper)?;
    if !store.contains(&format!("{}.fc1.w", model.mapper.name())) {
        model.init_mapper(store, &mut rng_for(cfg.seed, "mapper-init"))?;
    }
    let audio: Vec<&AudioFeatures> = pairs.iter().map(|(i, _)| &features[*i]).collect();
    let targets: Vec<CaptionTarget> = pairs.iter().map(|(_, t)| t.clone()).collect();
    let report = train_captioner(&model, store, &audio, &targets, &cfg.caption)?;
    Ok((model, report))
}

/// Words a caption may contain that the vocabulary lacks.
pub fn unknown_words(vocab: &Vocabulary, text: &str) -> Vec<String> {
    normalize_words(text)
        .into_iter()
        .filter(|w| !vocab.contains(w))
        .collect()
}
