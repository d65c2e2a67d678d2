//! Zero-shot classification and retrieval, evaluation metrics and the aggregate
//! zero-shot score.
//!
//! Metrics only look at the order (and, for F1, the sign) of the raw logits. The
//! post-processed probabilities are monotone in the logits, but sigmoid and softmax
//! saturate in floating point and would otherwise introduce artificial ties.
//!
//! Average precision truncated at rank `k` is
//! `AP@k = (1 / min(R, k)) * sum_{i <= k, item i relevant} precision@i`
//! where `R` is the number of relevant items; full AP uses `k = n`.

use serde::{Deserialize, Serialize};

use crate::contrastive::ClapModel;
use crate::corpus::{AudioFeatures, Manifest, Split};
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tensor};
use crate::text::{TokenSequence, Vocabulary};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "this is a sound of {label}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Multiclass,
    Binary,
    Multilabel,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1,
    Map,
    RecallAt1,
    MapAt10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProcess {
    Softmax,
    Sigmoid,
    Raw,
}

impl TaskKind {
    pub fn post_process(self) -> PostProcess {
        match self {
            TaskKind::Multiclass | TaskKind::Binary => PostProcess::Softmax,
            TaskKind::Multilabel => PostProcess::Sigmoid,
            TaskKind::Retrieval => PostProcess::Raw,
        }
    }

    pub fn accepts(self, metric: Metric) -> bool {
        match self {
            TaskKind::Multiclass | TaskKind::Binary => metric == Metric::Accuracy,
            TaskKind::Multilabel => matches!(metric, Metric::Map | Metric::F1),
            TaskKind::Retrieval => matches!(metric, Metric::RecallAt1 | Metric::MapAt10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AudioToText,
    TextToAudio,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    /// One class index per audio item.
    Classes(Vec<usize>),
    /// Item x prompt membership (multilabel) or relevance (retrieval, audio x caption).
    Matrix(Vec<Vec<bool>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub prompts: Vec<String>,
    /// Indices into the suite's audio list.
    pub items: Vec<usize>,
    pub truth: Truth,
    pub direction: Direction,
}

impl TaskSpec {
    pub fn validate(&self, n_audio: usize) -> Result<()> {
        if !self.kind.accepts(self.metric) {
            return Err(Error::Config(format!(
                "task `{}`: metric {:?} does not fit kind {:?}",
                self.name, self.metric, self.kind
            )));
        }
        if self.prompts.is_empty() || self.items.is_empty() {
            return Err(Error::Input(format!("task `{}` has no prompts or items", self.name)));
        }
        if self.items.iter().any(|&i| i >= n_audio) {
            return Err(Error::Input(format!("task `{}` references a missing audio", self.name)));
        }
        if self.kind != TaskKind::Retrieval && self.direction != Direction::AudioToText {
            return Err(Error::Config(format!(
                "task `{}`: only retrieval may run text-to-audio",
                self.name
            )));
        }
        let ok = match &self.truth {
            Truth::Classes(c) => {
                matches!(self.kind, TaskKind::Multiclass | TaskKind::Binary)
                    && c.len() == self.items.len()
                    && c.iter().all(|&k| k < self.prompts.len())
            }
            Truth::Matrix(m) => {
                matches!(self.kind, TaskKind::Multilabel | TaskKind::Retrieval)
                    && m.len() == self.items.len()
                    && m.iter().all(|r| r.len() == self.prompts.len())
            }
        };
        if !ok {
            return Err(Error::dim(
                &self.name,
                &[self.items.len(), self.prompts.len()],
                &[],
            ));
        }
        Ok(())
    }
}

/// Audio clips shared by a list of tasks, plus the tokenizer used for prompts.
#[derive(Debug, Clone)]
pub struct ZeroShotSuite<'a> {
    pub audio: Vec<&'a AudioFeatures>,
    pub tasks: Vec<TaskSpec>,
    pub vocab: Vocabulary,
    pub max_text_len: usize,
    pub batch_size: usize,
}

/// Similarity logits of one task, rows are queries.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsTable {
    pub values: Tensor,
    pub post: PostProcess,
}

impl LogitsTable {
    pub fn scaled(&self, factor: f64) -> Self {
        let data = self.values.data().iter().map(|x| x * factor).collect();
        Self {
            values: Tensor::new(self.values.shape().to_vec(), data).expect("same shape"),
            post: self.post,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub results: Vec<TaskResult>,
    pub score: f64,
}

impl SuiteResult {
    pub fn value(&self, task: &str) -> Option<f64> {
        self.results.iter().find(|r| r.task == task).map(|r| r.value)
    }
}

/// Scaled cosine similarities: `scale * A P^T` for unit-norm rows.
pub fn zero_shot_logits(audio: &Tensor, prompts: &Tensor, scale: f64, post: PostProcess) -> Result<LogitsTable> {
    let (na, da) = audio.rows_cols();
    let (np, dp) = prompts.rows_cols();
    if np == 0 {
        return Err(Error::Input("zero-shot inference needs at least one prompt".into()));
    }
    if da != dp {
        return Err(Error::dim("zero_shot_logits", &[na, da], &[np, dp]));
    }
    let mut out = vec![0.0; na * np];
    for i in 0..na {
        let a = audio.row(i);
        for j in 0..np {
            out[i * np + j] = scale * a.iter().zip(prompts.row(j)).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    Ok(LogitsTable {
        values: Tensor::new(vec![na, np], out)?,
        post,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn postprocess(t: &LogitsTable, kind: TaskKind) -> Tensor {
    let (r, c) = t.values.rows_cols();
    let v = t.values.data();
    let data = match kind.post_process() {
        PostProcess::Raw => v.to_vec(),
        PostProcess::Sigmoid => v.iter().map(|&x| sigmoid(x)).collect(),
        PostProcess::Softmax => {
            let mut out = Vec::with_capacity(v.len());
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                out.extend(e.into_iter().map(|x| x / s));
            }
            out
        }
    };
    Tensor::new(vec![r, c], data).expect("same shape")
}

fn check_rows(scores: &Tensor, n: usize, what: &str) -> Result<(usize, usize)> {
    let (r, c) = scores.rows_cols();
    if scores.shape().len() != 2 || r != n {
        return Err(Error::dim(what, scores.shape(), &[n]));
    }
    Ok((r, c))
}

/// Indices sorted by descending score, ties broken by lower index first.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn argmax(row: &[f64]) -> usize {
    ranking(row).first().copied().unwrap_or(0)
}

/// `None` when no item is relevant.
pub fn average_precision(scores: &[f64], relevant: &[bool], cutoff: Option<usize>) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let k = cutoff.unwrap_or(scores.len()).min(scores.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().take(k).enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total.min(k) as f64)
}

pub fn metric_accuracy(scores: &Tensor, truth: &[usize]) -> Result<f64> {
    let (r, _) = check_rows(scores, truth.len(), "accuracy")?;
    if r == 0 {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let correct = (0..r).filter(|&i| argmax(scores.row(i)) == truth[i]).count();
    Ok(correct as f64 / r as f64)
}

/// Micro-averaged F1 over binary decisions; 1 when there are neither positives nor
/// predictions.
pub fn micro_f1(decisions: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64> {
    if decisions.len() != truth.len() || decisions.iter().zip(truth).any(|(d, t)| d.len() != t.len()) {
        return Err(Error::dim("micro_f1", &[decisions.len()], &[truth.len()]));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (d, t) in decisions.iter().zip(truth) {
        for (&p, &y) in d.iter().zip(t) {
            match (p, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Micro-F1 of `probs >= threshold` decisions.
pub fn metric_f1(probs: &Tensor, truth: &[Vec<bool>], threshold: f64) -> Result<f64> {
    let (r, c) = check_rows(probs, truth.len(), "f1")?;
    let decisions: Vec<Vec<bool>> = (0..r)
        .map(|i| (0..c).map(|j| probs.get2(i, j) >= threshold).collect())
        .collect();
    micro_f1(&decisions, truth)
}

/// Macro mAP over classes (columns); classes without positives are skipped.
pub fn metric_map(scores: &Tensor, truth: &[Vec<bool>]) -> Result<f64> {
    let (r, c) = check_rows(scores, truth.len(), "map")?;
    let mut aps = Vec::new();
    for j in 0..c {
        let col: Vec<f64> = (0..r).map(|i| scores.get2(i, j)).collect();
        let rel: Vec<bool> = truth.iter().map(|t| t[j]).collect();
        match average_precision(&col, &rel, None) {
            Some(ap) => aps.push(ap),
            None => log::warn!("class {j} has no positives; excluded from mAP"),
        }
    }
    if aps.is_empty() {
        return Err(Error::Input("mAP needs at least one class with positives".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn per_query(scores: &Tensor, relevant: &[Vec<bool>], what: &str, f: impl Fn(&[f64], &[bool]) -> Option<f64>) -> Result<f64> {
    let (r, c) = check_rows(scores, relevant.len(), what)?;
    if relevant.iter().any(|row| row.len() != c) {
        return Err(Error::dim(what, &[r, c], &[relevant.len()]));
    }
    let vals: Vec<f64> = (0..r)
        .filter_map(|i| {
            let v = f(scores.row(i), &relevant[i]);
            if v.is_none() {
                log::warn!("{what}: query {i} has no relevant items; excluded");
            }
            v
        })
        .collect();
    if vals.is_empty() {
        return Err(Error::Input(format!("{what}: no query has a relevant item")));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Fraction of queries (rows) whose top-ranked item is relevant.
pub fn metric_recall_at_1(scores: &Tensor, relevant: &[Vec<bool>]) -> Result<f64> {
    per_query(scores, relevant, "recall@1", |s, rel| {
        rel.iter().any(|&x| x).then(|| if rel[argmax(s)] { 1.0 } else { 0.0 })
    })
}

/// Mean over queries of AP truncated at rank 10.
pub fn metric_map_at_10(scores: &Tensor, relevant: &[Vec<bool>]) -> Result<f64> {
    per_query(scores, relevant, "mAP@10", |s, rel| average_precision(s, rel, Some(10)))
}

pub fn zero_shot_score(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("zero-shot score needs at least one task".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn transpose_bool(m: &[Vec<bool>], cols: usize) -> Vec<Vec<bool>> {
    (0..cols).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// Metric of one task from its logits table (rows: queries).
pub fn score_task(task: &TaskSpec, table: &LogitsTable) -> Result<f64> {
    let v = &table.values;
    match (&task.truth, task.metric) {
        (Truth::Classes(c), Metric::Accuracy) => metric_accuracy(v, c),
        (Truth::Matrix(m), Metric::F1) => {
            // sigmoid(x) >= 0.5 exactly when x >= 0
            let (r, c) = v.rows_cols();
            let decisions: Vec<Vec<bool>> = (0..r)
                .map(|i| (0..c).map(|j| v.get2(i, j) >= 0.0).collect())
                .collect();
            micro_f1(&decisions, m)
        }
        (Truth::Matrix(m), Metric::Map) => metric_map(v, m),
        (Truth::Matrix(m), metric @ (Metric::RecallAt1 | Metric::MapAt10)) => {
            let rel = match task.direction {
                Direction::AudioToText => m.clone(),
                Direction::TextToAudio => transpose_bool(m, task.prompts.len()),
            };
            if metric == Metric::RecallAt1 {
                metric_recall_at_1(v, &rel)
            } else {
                metric_map_at_10(v, &rel)
            }
        }
        _ => Err(Error::Config(format!("task `{}` has inconsistent truth", task.name))),
    }
}

fn encode_prompts(suite: &ZeroShotSuite, prompts: &[String]) -> Result<Vec<TokenSequence>> {
    prompts
        .iter()
        .map(|p| suite.vocab.encode(p, suite.max_text_len))
        .collect()
}

/// Logits for every task; audio is embedded once and shared between tasks.
pub fn suite_logits(model: &ClapModel, store: &ParameterStore, suite: &ZeroShotSuite) -> Result<Vec<LogitsTable>> {
    for t in &suite.tasks {
        t.validate(suite.audio.len())?;
    }
    let audio = model.audio_embeddings(store, &suite.audio, suite.batch_size)?;
    let scale = model.logit_scale(store)?;
    let d = audio.values().rows_cols().1;
    suite
        .tasks
        .iter()
        .map(|task| {
            let seqs = encode_prompts(suite, &task.prompts)?;
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let text = model.text_embeddings(store, &refs, suite.batch_size)?;
            let rows: Vec<f64> = task
                .items
                .iter()
                .flat_map(|&i| audio.values().row(i).iter().copied())
                .collect();
            let a = Tensor::new(vec![task.items.len(), d], rows)?;
            let table = zero_shot_logits(&a, text.values(), scale, task.kind.post_process())?;
            Ok(match task.direction {
                Direction::AudioToText => table,
                Direction::TextToAudio => LogitsTable {
                    values: table.values.transpose2(),
                    post: table.post,
                },
            })
        })
        .collect()
}

pub fn score_suite(suite: &ZeroShotSuite, tables: &[LogitsTable]) -> Result<SuiteResult> {
    if tables.len() != suite.tasks.len() {
        return Err(Error::dim("score_suite", &[tables.len()], &[suite.tasks.len()]));
    }
    let results = suite
        .tasks
        .iter()
        .zip(tables)
        .map(|(task, table)| {
            Ok(TaskResult {
                task: task.name.clone(),
                kind: task.kind,
                metric: task.metric,
                value: score_task(task, table)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = results.iter().map(|r| r.value).collect();
    let score = zero_shot_score(&values)?;
    Ok(SuiteResult { results, score })
}

pub fn evaluate_suite(model: &ClapModel, store: &ParameterStore, suite: &ZeroShotSuite) -> Result<SuiteResult> {
    let tables = suite_logits(model, store, suite)?;
    score_suite(suite, &tables)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    /// Prompt template with a `{label}` placeholder; raw labels when absent.
    pub prompt_template: Option<String>,
    pub retrieval_pool: usize,
    /// Classes (by index in the manifest header) of the binary task.
    pub binary_classes: [usize; 2],
    pub batch_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            prompt_template: None,
            retrieval_pool: 64,
            binary_classes: [0, 1],
            batch_size: 64,
        }
    }
}

pub fn render_prompt(label: &str, template: Option<&str>) -> String {
    match template {
        Some(t) => t.replace("{label}", label),
        None => label.to_string(),
    }
}

pub const TASK_CLASSIFICATION: &str = "classification";
pub const TASK_BINARY: &str = "binary";
pub const TASK_MULTILABEL_MAP: &str = "multilabel_map";
pub const TASK_MULTILABEL_F1: &str = "multilabel_f1";
pub const TASK_A2T_R1: &str = "audio_to_text_r1";
pub const TASK_A2T_MAP10: &str = "audio_to_text_map10";
pub const TASK_T2A_R1: &str = "text_to_audio_r1";
pub const TASK_T2A_MAP10: &str = "text_to_audio_map10";

/// The synthetic task suite over one split: multiclass and binary classification,
/// multilabel tagging (mAP and F1) and caption retrieval in both directions over a
/// pool of clips where relevance means an identical label set.
pub fn build_suite<'a>(
    manifest: &Manifest,
    features: &'a [AudioFeatures],
    split: Split,
    vocab: &Vocabulary,
    max_text_len: usize,
    cfg: &SuiteConfig,
) -> Result<ZeroShotSuite<'a>> {
    if features.len() != manifest.entries.len() {
        return Err(Error::dim("build_suite", &[features.len()], &[manifest.entries.len()]));
    }
    let classes = &manifest.header.classes;
    let [b0, b1] = cfg.binary_classes;
    if b0 == b1 || b0 >= classes.len() || b1 >= classes.len() {
        return Err(Error::Config("suite.binary_classes must name two distinct classes".into()));
    }
    let idx = manifest.indices(split);
    if idx.is_empty() {
        return Err(Error::Input(format!("split `{}` is empty", split.name())));
    }
    let audio: Vec<&AudioFeatures> = idx.iter().map(|&i| &features[i]).collect();
    let entries: Vec<_> = idx.iter().map(|&i| &manifest.entries[i]).collect();
    let label_of = |l: &str| manifest.class_index(l).expect("validated manifest");
    let prompts: Vec<String> = classes
        .iter()
        .map(|c| render_prompt(c, cfg.prompt_template.as_deref()))
        .collect();

    let singles: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].is_single_event()).collect();
    let single_truth: Vec<usize> = singles.iter().map(|&i| label_of(&entries[i].labels[0])).collect();
    let mut tasks = vec![TaskSpec {
        name: TASK_CLASSIFICATION.into(),
        kind: TaskKind::Multiclass,
        metric: Metric::Accuracy,
        prompts: prompts.clone(),
        items: singles.clone(),
        truth: Truth::Classes(single_truth.clone()),
        direction: Direction::AudioToText,
    }];

    let (bin_items, bin_truth): (Vec<usize>, Vec<usize>) = singles
        .iter()
        .zip(&single_truth)
        .filter_map(|(&i, &k)| {
            if k == b0 {
                Some((i, 0))
            } else if k == b1 {
                Some((i, 1))
            } else {
                None
            }
        })
        .unzip();
    if !bin_items.is_empty() {
        tasks.push(TaskSpec {
            name: TASK_BINARY.into(),
            kind: TaskKind::Binary,
            metric: Metric::Accuracy,
            prompts: vec![prompts[b0].clone(), prompts[b1].clone()],
            items: bin_items,
            truth: Truth::Classes(bin_truth),
            direction: Direction::AudioToText,
        });
    }

    let all: Vec<usize> = (0..entries.len()).collect();
    let membership: Vec<Vec<bool>> = entries
        .iter()
        .map(|e| {
            let mut row = vec![false; classes.len()];
            for l in &e.labels {
                row[label_of(l)] = true;
            }
            row
        })
        .collect();
    for (name, metric) in [(TASK_MULTILABEL_MAP, Metric::Map), (TASK_MULTILABEL_F1, Metric::F1)] {
        tasks.push(TaskSpec {
            name: name.into(),
            kind: TaskKind::Multilabel,
            metric,
            prompts: prompts.clone(),
            items: all.clone(),
            truth: Truth::Matrix(membership.clone()),
            direction: Direction::AudioToText,
        });
    }

    let pool_size = cfg.retrieval_pool.min(entries.len());
    if pool_size >= 2 {
        // evenly spaced so the pool mixes single events and mixtures
        let pool: Vec<usize> = (0..pool_size).map(|i| i * entries.len() / pool_size).collect();
        let captions: Vec<String> = pool.iter().map(|&i| entries[i].captions[0].clone()).collect();
        let relevance: Vec<Vec<bool>> = pool
            .iter()
            .map(|&i| pool.iter().map(|&j| entries[i].label_set() == entries[j].label_set()).collect())
            .collect();
        for (name, metric, direction) in [
            (TASK_A2T_R1, Metric::RecallAt1, Direction::AudioToText),
            (TASK_A2T_MAP10, Metric::MapAt10, Direction::AudioToText),
            (TASK_T2A_R1, Metric::RecallAt1, Direction::TextToAudio),
            (TASK_T2A_MAP10, Metric::MapAt10, Direction::TextToAudio),
        ] {
            tasks.push(TaskSpec {
                name: name.into(),
                kind: TaskKind::Retrieval,
                metric,
                prompts: captions.clone(),
                items: pool.clone(),
                truth: Truth::Matrix(relevance.clone()),
                direction,
            });
        }
    }
    for t in &tasks {
        t.validate(audio.len())?;
    }
    Ok(ZeroShotSuite {
        audio,
        tasks,
        vocab: vocab.clone(),
        max_text_len,
        batch_size: cfg.batch_size.max(1),
    })
}
