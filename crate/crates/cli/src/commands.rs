//! Subcommand definitions and the artifacts each one writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use clapdesk::checkpoint::Checkpoint;
use clapdesk::config::RunConfig;
use clapdesk::contrastive::ClapModel;
use clapdesk::corpus::{AudioFeatures, Manifest, Split};
use clapdesk::diagnostics::gradcheck_suite;
use clapdesk::numerics::ParameterStore;
use clapdesk::text::Vocabulary;
use clapdesk::{Error, Result};
use serde::Serialize;

use crate::pipeline::{self, Corpus};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "clapdesk", version, about = "Desk-scale contrastive language-audio pretraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus manifest and vocabulary.
    SynthData(SynthArgs),
    /// Multitask pretraining of the audio encoder.
    PretrainAudio(TrainArgs),
    /// Contrastive training of both encoders.
    TrainClap(ClapArgs),
    /// Zero-shot evaluation of a contrastive checkpoint.
    EvalZeroshot(EvalArgs),
    /// Rank clips for a text query.
    Retrieve(RetrieveArgs),
    /// Train the captioning mapper and caption held-out clips.
    Caption(CaptionArgs),
    /// Finite-difference check of every differentiable op and both losses.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration: desk, paper or reference.
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => RunConfig::preset(&self.preset),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for the manifest, vocabulary and feature cache.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Corpus directory written by synth-data.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClapArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Pretraining checkpoint whose audio encoder initializes training.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Contrastive checkpoint written by train-clap.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Free-text query.
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also write the ranking to `{run_dir}/retrieval.jsonl`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Caption at most this many held-out clips.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

/// Process exit status for each error category.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Input(_) | Error::Parse { .. } | Error::Validation(_) | Error::Wav(_) => 4,
        Error::Dimension { .. } | Error::Contract(_) | Error::NonFinite(_) | Error::Invariant(_) => 5,
        Error::Io { .. } | Error::Checkpoint(_) => 6,
    }
}

/// Exit status when a check ran but did not pass.
pub const EXIT_CHECK_FAILED: i32 = 7;

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::SynthData(a) => synth_data(&a.config.load()?, &a.out).map(|_| 0),
        Command::PretrainAudio(a) => pretrain_audio(&a.config.load()?, &a.data, &a.run_dir).map(|_| 0),
        Command::TrainClap(a) => {
            let cfg = a.train.config.load()?;
            train_clap(&cfg, &a.train.data, &a.train.run_dir, a.pretrained.as_deref()).map(|_| 0)
        }
        Command::EvalZeroshot(a) => eval_zeroshot(&a.data, &a.checkpoint, &a.run_dir, a.split.into()).map(|_| 0),
        Command::Retrieve(a) => {
            let hits = retrieve(&a.data, &a.checkpoint, &a.query, a.top_k, a.split.into())?;
            let mut out = std::io::stdout().lock();
            for h in &hits {
                writeln!(out, "{}\t{:.4}\t{}", h.id, h.score, h.caption).map_err(|e| Error::io("stdout", e))?;
            }
            if let Some(dir) = &a.run_dir {
                prepare_run_dir(dir)?;
                write_jsonl(&dir.join("retrieval.jsonl"), &hits)?;
            }
            Ok(0)
        }
        Command::Caption(a) => caption(&a.data, &a.checkpoint, &a.run_dir, a.limit).map(|_| 0),
        Command::Gradcheck(a) => {
            let passed = gradcheck(a.seed, a.run_dir.as_deref())?;
            Ok(if passed { 0 } else { EXIT_CHECK_FAILED })
        }
    }
}

fn prepare_run_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn snapshot_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)
}

/// Manifest and vocabulary from a synth-data directory.
pub fn load_corpus(data: &Path) -> Result<Corpus> {
    let manifest = Manifest::load(&data.join(MANIFEST_FILE))?;
    let vocab_path = data.join(VOCAB_FILE);
    if !vocab_path.exists() {
        return Err(Error::MissingArtifact {
            path: vocab_path,
            hint: "run `clapdesk synth-data` first".into(),
        });
    }
    let vocab = Vocabulary::load(&vocab_path)?;
    Ok(Corpus { manifest, vocab })
}

fn load_features(corpus: &Corpus, cfg: &RunConfig, data: &Path) -> Result<Vec<AudioFeatures>> {
    pipeline::cached_features(&corpus.manifest, cfg, data)
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    cfg.validate()?;
    prepare_run_dir(out)?;
    let corpus = Corpus::synthesize(cfg)?;
    corpus.manifest.write(&out.join(MANIFEST_FILE))?;
    corpus.vocab.save(&out.join(VOCAB_FILE))?;
    snapshot_config(out, cfg)?;
    let split = corpus.manifest.split();
    let summary = format!(
        "entries\t{}\ntrain\t{}\nval\t{}\ntest\t{}\nclasses\t{}\nvocabulary\t{}\n",
        corpus.manifest.entries.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        corpus.manifest.header.classes.join(","),
        corpus.vocab.len()
    );
    write_text(&out.join("summary.txt"), &summary)?;
    log::info!("wrote {} entries to {}", corpus.manifest.entries.len(), out.display());
    Ok(corpus)
}

pub fn pretrain_audio(cfg: &RunConfig, data: &Path, run_dir: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    let corpus = load_corpus(data)?;
    prepare_run_dir(run_dir)?;
    snapshot_config(run_dir, cfg)?;
    let features = load_features(&corpus, cfg, data)?;
    let out = pipeline::run_pretrain(cfg, &corpus, &features)?;
    let rows: Vec<_> = out
        .history
        .iter()
        .map(|r| serde_json::json!({"epoch": r.epoch, "mean_loss": r.mean_loss, "steps": r.step_losses.len()}))
        .collect();
    write_jsonl(&run_dir.join("history.jsonl"), &rows)?;
    let mut ckpt = Checkpoint::new(cfg, "pretrain", out.history.len() as u64, out.store)?;
    ckpt.optimizer = Some(out.optimizer);
    ckpt.save(&run_dir.join("pretrain.ckpt"))?;
    let last = out.history.last().map_or(f64::NAN, |r| r.mean_loss);
    write_text(
        &run_dir.join("summary.txt"),
        &format!("epochs\t{}\nfinal_mean_loss\t{last:.6}\n", out.history.len()),
    )?;
    Ok(ckpt)
}

pub struct ClapRun {
    pub best: Checkpoint,
    pub last: Checkpoint,
}

pub fn train_clap(cfg: &RunConfig, data: &Path, run_dir: &Path, pretrained: Option<&Path>) -> Result<ClapRun> {
    cfg.validate()?;
    let corpus = load_corpus(data)?;
    let pre = pretrained
        .map(|p| {
            let c = Checkpoint::load(p, "clapdesk pretrain-audio")?;
            if c.kind != "pretrain" {
                return Err(Error::Checkpoint(format!("{} is a `{}` checkpoint, not pretrain", p.display(), c.kind)));
            }
            Ok(c)
        })
        .transpose()?;
    prepare_run_dir(run_dir)?;
    snapshot_config(run_dir, cfg)?;
    let features = load_features(&corpus, cfg, data)?;
    let (model, store) = pipeline::init_clap(cfg, corpus.vocab.len(), pre.as_ref().map(|c| &c.params))?;
    let out = pipeline::run_train_clap(cfg, &corpus, &features, &model, store)?;
    write_jsonl(&run_dir.join("history.jsonl"), &out.history)?;
    let mut best = Checkpoint::new(cfg, "clap", out.best_epoch as u64, out.best)?;
    best.zero_shot_score = out.best_score;
    let mut last = Checkpoint::new(cfg, "clap", out.history.len() as u64, out.last)?;
    last.zero_shot_score = out.history.last().and_then(|r| r.zero_shot_score);
    last.optimizer = Some(out.optimizer);
    best.save(&run_dir.join("best.ckpt"))?;
    last.save(&run_dir.join("last.ckpt"))?;
    write_text(
        &run_dir.join("summary.txt"),
        &format!(
            "epochs\t{}\nbest_epoch\t{}\nbest_val_zero_shot_score\t{}\n",
            out.history.len(),
            out.best_epoch,
            out.best_score.map_or("-".into(), |s| format!("{s:.6}"))
        ),
    )?;
    Ok(ClapRun { best, last })
}

/// Contrastive model, parameters and config restored from a train-clap checkpoint.
pub fn load_clap(path: &Path, vocab_size: usize) -> Result<(RunConfig, ClapModel, ParameterStore)> {
    let ckpt = Checkpoint::load(path, "clapdesk train-clap")?;
    if ckpt.kind != "clap" && ckpt.kind != "caption" {
        return Err(Error::Checkpoint(format!(
            "{} is a `{}` checkpoint; expected one written by train-clap",
            path.display(),
            ckpt.kind
        )));
    }
    let cfg = ckpt.config()?;
    let model = pipeline::clap_model(&cfg, vocab_size)?;
    Ok((cfg, model, ckpt.params))
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub task: String,
    pub metric: String,
    pub value: f64,
}

pub fn eval_zeroshot(data: &Path, checkpoint: &Path, run_dir: &Path, split: Split) -> Result<Vec<MetricRow>> {
    let corpus = load_corpus(data)?;
    let (cfg, model, store) = load_clap(checkpoint, corpus.vocab.len())?;
    prepare_run_dir(run_dir)?;
    snapshot_config(run_dir, &cfg)?;
    let features = load_features(&corpus, &cfg, data)?;
    let result = pipeline::evaluate(&cfg, &corpus, &features, &model, &store, split)?;
    let mut rows: Vec<MetricRow> = result
        .results
        .iter()
        .map(|r| MetricRow {
            task: r.task.clone(),
            metric: format!("{:?}", r.metric).to_lowercase(),
            value: r.value,
        })
        .collect();
    rows.push(MetricRow {
        task: "zero_shot_score".into(),
        metric: "mean".into(),
        value: result.score,
    });
    write_jsonl(&run_dir.join("metrics.jsonl"), &rows)?;
    let mut table = format!("split\t{}\n", split.name());
    for r in &rows {
        table.push_str(&format!("{:<24}{:<12}{:.4}\n", r.task, r.metric, r.value));
    }
    write_text(&run_dir.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
    pub caption: String,
}

pub fn retrieve(data: &Path, checkpoint: &Path, query: &str, top_k: usize, split: Split) -> Result<Vec<Hit>> {
    let corpus = load_corpus(data)?;
    let unknown = pipeline::unknown_words(&corpus.vocab, query);
    if !unknown.is_empty() {
        log::warn!("query words outside the vocabulary: {}", unknown.join(", "));
    }
    let (cfg, model, store) = load_clap(checkpoint, corpus.vocab.len())?;
    let features = load_features(&corpus, &cfg, data)?;
    let idx = corpus.entries(split);
    let audio: Vec<&AudioFeatures> = idx.iter().map(|&i| &features[i]).collect();
    let emb = model.audio_embeddings(&store, &audio, cfg.suite.batch_size)?;
    let q = corpus.vocab.encode(query, cfg.text_encoder.max_text_len)?;
    let t = model.text_embeddings(&store, &[&q], 1)?;
    let sims: Vec<f64> = (0..idx.len())
        .map(|i| {
            emb.values()
                .row(i)
                .iter()
                .zip(t.values().row(0))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Ok(clapdesk::zeroshot::ranking(&sims)
        .into_iter()
        .take(top_k)
        .map(|i| {
            let e = &corpus.manifest.entries[idx[i]];
            Hit {
                id: e.id.clone(),
                score: sims[i],
                caption: e.captions[0].clone(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptionRow {
    pub id: String,
    pub caption: String,
    pub overlap: f64,
}

pub fn caption(data: &Path, checkpoint: &Path, run_dir: &Path, limit: Option<usize>) -> Result<Vec<CaptionRow>> {
    let corpus = load_corpus(data)?;
    let (cfg, clap, mut store) = load_clap(checkpoint, corpus.vocab.len())?;
    prepare_run_dir(run_dir)?;
    snapshot_config(run_dir, &cfg)?;
    let features = load_features(&corpus, &cfg, data)?;
    let max_len = cfg.text_encoder.max_text_len;
    let pairs = pipeline::caption_targets(&corpus, Split::Train, max_len)?;
    let (model, report) = pipeline::run_caption(&cfg, clap, &mut store, &features, &pairs)?;
    let mut ckpt = Checkpoint::new(&cfg, "caption", report.epoch_losses.len() as u64, store.clone())?;
    ckpt.zero_shot_score = None;
    ckpt.save(&run_dir.join("caption.ckpt"))?;

    let mut idx = corpus.entries(Split::Test);
    if let Some(n) = limit {
        idx.truncate(n);
    }
    let audio: Vec<&AudioFeatures> = idx.iter().map(|&i| &features[i]).collect();
    let emb = model.embed(&store, &audio, cfg.suite.batch_size)?;
    let mut rows = Vec::with_capacity(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let e = &corpus.manifest.entries[i];
        let text = model.generate_caption(&store, &corpus.vocab, emb.row(k), cfg.caption.max_decode_len)?;
        let refs: Vec<&str> = e.captions.iter().map(String::as_str).collect();
        rows.push(CaptionRow {
            id: e.id.clone(),
            overlap: clapdesk::captioning::caption_overlap_score(&text, &refs),
            caption: text,
        });
    }
    write_jsonl(&run_dir.join("captions.jsonl"), &rows)?;
    let mean = rows.iter().map(|r| r.overlap).sum::<f64>() / rows.len().max(1) as f64;
    write_text(
        &run_dir.join("summary.txt"),
        &format!(
            "train_pairs\t{}\ninitial_loss\t{:.6}\nfinal_loss\t{:.6}\ncaptioned\t{}\nmean_overlap\t{mean:.4}\n",
            pairs.len(),
            report.initial_loss,
            report.final_loss,
            rows.len()
        ),
    )?;
    Ok(rows)
}

pub fn gradcheck(seed: u64, run_dir: Option<&Path>) -> Result<bool> {
    let results = gradcheck_suite(seed)?;
    for r in &results {
        println!(
            "{}\t{:.3e}\t{}",
            r.name,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(dir) = run_dir {
        prepare_run_dir(dir)?;
        write_jsonl(&dir.join("gradcheck.jsonl"), &results)?;
    }
    Ok(results.iter().all(|r| r.passed))
}
