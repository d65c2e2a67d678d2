//! Audio patch transformer and causal text transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, ParameterStore, Tape, Tensor, Var};
use crate::text::{TokenSequence, PAD};

pub const INIT_STD: f64 = 0.02;
const MLP_EXPANSION: usize = 4;

fn check_heads(width: usize, heads: usize, what: &str) -> Result<()> {
    if width == 0 || heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "{what}: width {width} must be a positive multiple of heads {heads}"
        )));
    }
    Ok(())
}

/// Linear layer parameters `{prefix}.w` (`[inp, out]`) and `{prefix}.b`.
pub(crate) fn init_linear(
    store: &mut ParameterStore,
    prefix: &str,
    inp: usize,
    out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), Tensor::randn(vec![inp, out], INIT_STD, rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![out]))
}

pub(crate) fn linear(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn init_layer_norm(store: &mut ParameterStore, prefix: &str, width: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::filled(vec![width], 1.0))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![width]))
}

fn layer_norm(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.layer_norm(x, Some(g), Some(b))
}

/// Pre-norm transformer blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    prefix: String,
    width: usize,
    depth: usize,
    heads: usize,
}

impl TransformerStack {
    pub fn new(prefix: &str, width: usize, depth: usize, heads: usize) -> Result<Self> {
        check_heads(width, heads, prefix)?;
        Ok(Self {
            prefix: prefix.to_string(),
            width,
            depth,
            heads,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        let w = self.width;
        for i in 0..self.depth {
            let p = format!("{}.block{i}", self.prefix);
            init_layer_norm(store, &format!("{p}.ln1"), w)?;
            for name in ["q", "k", "v", "o"] {
                init_linear(store, &format!("{p}.attn.{name}"), w, w, rng)?;
            }
            init_layer_norm(store, &format!("{p}.ln2"), w)?;
            init_linear(store, &format!("{p}.mlp.fc"), w, MLP_EXPANSION * w, rng)?;
            init_linear(store, &format!("{p}.mlp.proj"), MLP_EXPANSION * w, w, rng)?;
        }
        init_layer_norm(store, &format!("{}.ln_f", self.prefix), w)
    }

    /// `x` is `[batch*seq, width]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        mut x: Var,
        batch: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        for i in 0..self.depth {
            let p = format!("{}.block{i}", self.prefix);
            let h = layer_norm(tape, store, &format!("{p}.ln1"), x)?;
            let q = linear(tape, store, &format!("{p}.attn.q"), h)?;
            let k = linear(tape, store, &format!("{p}.attn.k"), h)?;
            let v = linear(tape, store, &format!("{p}.attn.v"), h)?;
            let a = tape.attention(q, k, v, batch, self.heads, mask)?;
            let a = linear(tape, store, &format!("{p}.attn.o"), a)?;
            x = tape.add(x, a)?;

            let h = layer_norm(tape, store, &format!("{p}.ln2"), x)?;
            let h = linear(tape, store, &format!("{p}.mlp.fc"), h)?;
            let h = tape.gelu(h);
            let h = linear(tape, store, &format!("{p}.mlp.proj"), h)?;
            x = tape.add(x, h)?;
        }
        layer_norm(tape, store, &format!("{}.ln_f", self.prefix), x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioEncoderConfig {
    /// Mel bins per patch.
    pub patch_freq: usize,
    /// Frames per patch; trailing frames that do not fill a patch are dropped.
    pub patch_time: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_patches: usize,
    /// Log-mel values are standardised as `(x - input_center) / input_scale`.
    pub input_center: f64,
    pub input_scale: f64,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self {
            patch_freq: 8,
            patch_time: 120,
            width: 128,
            depth: 4,
            heads: 4,
            max_patches: 64,
            input_center: -11.5,
            input_scale: 11.5,
        }
    }
}

impl AudioEncoderConfig {
    pub fn validate(&self, n_mels: usize) -> Result<()> {
        check_heads(self.width, self.heads, "audio_encoder")?;
        if self.patch_freq == 0 || self.patch_time == 0 || n_mels % self.patch_freq != 0 {
            return Err(Error::Config(format!(
                "audio_encoder.patch_freq ({}) must divide n_mels ({n_mels})",
                self.patch_freq
            )));
        }
        if self.max_patches == 0 || !(self.input_scale > 0.0) {
            return Err(Error::Config(
                "audio_encoder.max_patches and input_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn patch_grid(&self, n_mels: usize, n_frames: usize) -> (usize, usize) {
        (n_mels / self.patch_freq, n_frames / self.patch_time)
    }
}

/// Bidirectional patch transformer over log-mel spectrograms, mean-pooled to one
/// vector per clip.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    cfg: AudioEncoderConfig,
    prefix: String,
    stack: TransformerStack,
}

impl AudioEncoder {
    pub fn new(cfg: &AudioEncoderConfig, prefix: &str) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            prefix: prefix.to_string(),
            stack: TransformerStack::new(prefix, cfg.width, cfg.depth, cfg.heads)?,
        })
    }

    pub fn config(&self) -> &AudioEncoderConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        let c = &self.cfg;
        let p = &self.prefix;
        init_linear(store, &format!("{p}.patch"), c.patch_freq * c.patch_time, c.width, rng)?;
        store.insert(format!("{p}.pos"), Tensor::zeros(vec![c.max_patches, c.width]))?;
        self.stack.init(store, rng)
    }

    /// Standardised patch vectors for one clip, patches in time-major order.
    pub fn patchify(&self, spec: &MelSpectrogram) -> Result<Vec<f64>> {
        self.patchify_values(spec.values(), spec.n_mels(), spec.n_frames())
    }

    /// As [`Self::patchify`] for a raw row-major `n_mels x n_frames` array.
    pub fn patchify_values<T: Copy + Into<f64>>(
        &self,
        values: &[T],
        n_mels: usize,
        n_frames: usize,
    ) -> Result<Vec<f64>> {
        let c = &self.cfg;
        if values.len() != n_mels * n_frames {
            return Err(Error::dim("patchify", &[values.len()], &[n_mels, n_frames]));
        }
        if n_frames < c.patch_time {
            return Err(Error::Input(format!(
                "spectrogram has {n_frames} frames, fewer than patch_time {}",
                c.patch_time
            )));
        }
        if n_mels % c.patch_freq != 0 {
            return Err(Error::dim("patchify", &[n_mels], &[c.patch_freq]));
        }
        let (nf, nt) = c.patch_grid(n_mels, n_frames);
        if nf * nt > c.max_patches {
            return Err(Error::Input(format!(
                "{} patches exceed max_patches {}",
                nf * nt,
                c.max_patches
            )));
        }
        let mut out = Vec::with_capacity(nf * nt * c.patch_freq * c.patch_time);
        for pt in 0..nt {
            for pf in 0..nf {
                for m in 0..c.patch_freq {
                    let row = (pf * c.patch_freq + m) * n_frames + pt * c.patch_time;
                    out.extend(
                        values[row..row + c.patch_time]
                            .iter()
                            .map(|&x| (x.into() - c.input_center) / c.input_scale),
                    );
                }
            }
        }
        Ok(out)
    }

    /// Encodes clips given as pre-computed patch vectors (see [`Self::patchify`]).
    pub fn forward_patches(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        patches: &[&[f64]],
    ) -> Result<Var> {
        let n = patches.len();
        if n == 0 {
            return Err(Error::Input("empty audio batch".into()));
        }
        let patch_dim = self.cfg.patch_freq * self.cfg.patch_time;
        let len = patches[0].len();
        if len == 0 || len % patch_dim != 0 || patches.iter().any(|p| p.len() != len) {
            return Err(Error::Input(
                "all clips in a batch must share one patch grid".into(),
            ));
        }
        let per_clip = len / patch_dim;
        let data: Vec<f64> = patches.iter().flat_map(|p| p.iter().copied()).collect();
        let x = tape.constant(Tensor::new(vec![n * per_clip, patch_dim], data)?);
        let p = &self.prefix;
        let h = linear(tape, store, &format!("{p}.patch"), x)?;
        let pos = tape.param(store, &format!("{p}.pos"))?;
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..per_clip).collect();
        let pos = tape.gather_rows(pos, &idx)?;
        let h = tape.add(h, pos)?;
        let h = self
            .stack
            .forward(tape, store, h, n, &AttentionMask::bidirectional())?;
        tape.mean_pool(h, n)
    }

    /// `[N, V]` clip representations.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        specs: &[&MelSpectrogram],
    ) -> Result<Var> {
        let patches = specs
            .iter()
            .map(|s| self.patchify(s))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = patches.iter().map(Vec::as_slice).collect();
        self.forward_patches(tape, store, &refs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_text_len: usize,
    /// Longest continuous prefix accepted by [`TextEncoder::decode_logits`].
    pub max_prefix: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 4,
            heads: 4,
            max_text_len: 32,
            max_prefix: 8,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_heads(self.width, self.heads, "text_encoder")?;
        if self.max_text_len < 2 {
            return Err(Error::Config("text_encoder.max_text_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// Per-position hidden vectors of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub length: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HiddenStates {
    pub fn position(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

/// Causal decoder-only transformer. The final hidden state at the EOT position is
/// the sentence representation; next-token logits use the tied token embedding.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    vocab_size: usize,
    prefix: String,
    stack: TransformerStack,
}

impl TextEncoder {
    pub fn new(cfg: &TextEncoderConfig, vocab_size: usize, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            prefix: prefix.to_string(),
            stack: TransformerStack::new(prefix, cfg.width, cfg.depth, cfg.heads)?,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        let p = &self.prefix;
        let w = self.cfg.width;
        store.insert(
            format!("{p}.tok"),
            Tensor::randn(vec![self.vocab_size, w], INIT_STD, rng),
        )?;
        store.insert(
            format!("{p}.pos"),
            Tensor::zeros(vec![self.cfg.max_prefix + self.cfg.max_text_len, w]),
        )?;
        self.stack.init(store, rng)
    }

    /// Final-norm hidden states `[B*(P+L), width]` for equal-length id rows, with an
    /// optional `[B*P, width]` continuous prefix placed before each row's tokens.
    pub fn hidden(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        ids: &[&[usize]],
        prefix: Option<(Var, usize)>,
    ) -> Result<Var> {
        let b = ids.len();
        if b == 0 {
            return Err(Error::Input("empty text batch".into()));
        }
        let l = ids[0].len();
        if ids.iter().any(|s| s.len() != l) {
            return Err(Error::Input("text batch rows must have equal length".into()));
        }
        let p = prefix.map_or(0, |(_, n)| n);
        if p > self.cfg.max_prefix || l > self.cfg.max_text_len {
            return Err(Error::Input(format!(
                "sequence of {p} prefix + {l} tokens exceeds limits {} + {}",
                self.cfg.max_prefix, self.cfg.max_text_len
            )));
        }
        let flat: Vec<usize> = ids.iter().flat_map(|s| s.iter().copied()).collect();
        let tok_table = tape.param(store, &format!("{}.tok", self.prefix))?;
        let tok = tape.embedding(tok_table, &flat)?;
        let seq = p + l;
        let mut key_valid = Vec::with_capacity(b * seq);
        let x = match prefix {
            Some((pv, _)) if p > 0 => {
                let shape = tape.shape(pv).to_vec();
                if shape.len() != 2 || shape[1] != self.cfg.width || shape[0] != b * p {
                    return Err(Error::dim("prefix", &shape, &[b * p, self.cfg.width]));
                }
                let both = tape.concat_rows(&[pv, tok])?;
                let mut order = Vec::with_capacity(b * seq);
                for bi in 0..b {
                    order.extend(bi * p..(bi + 1) * p);
                    order.extend((b * p + bi * l)..(b * p + (bi + 1) * l));
                    key_valid.extend(std::iter::repeat_n(true, p));
                    key_valid.extend(ids[bi].iter().map(|&t| t != PAD));
                }
                tape.gather_rows(both, &order)?
            }
            _ => {
                key_valid.extend(flat.iter().map(|&t| t != PAD));
                tok
            }
        };
        let pos = tape.param(store, &format!("{}.pos", self.prefix))?;
        let idx: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();
        let pos = tape.gather_rows(pos, &idx)?;
        let x = tape.add(x, pos)?;
        let mask = AttentionMask {
            causal: true,
            key_valid: Some(key_valid),
        };
        self.stack.forward(tape, store, x, b, &mask)
    }

    /// `[N, U]` sentence representations taken at each sequence's EOT position.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &[TokenSequence],
    ) -> Result<Var> {
        let ids: Vec<&[usize]> = batch.iter().map(TokenSequence::ids).collect();
        let h = self.hidden(tape, store, &ids, None)?;
        let l = ids.first().map_or(0, |s| s.len());
        let rows: Vec<usize> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| i * l + s.eot_position())
            .collect();
        tape.gather_rows(h, &rows)
    }

    /// Next-token logits at every position, shape `[B, P+L, vocab]`.
    pub fn decode_logits(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        ids: &[&[usize]],
        prefix: Option<(Var, usize)>,
    ) -> Result<Var> {
        let h = self.hidden(tape, store, ids, prefix)?;
        let table = tape.param(store, &format!("{}.tok", self.prefix))?;
        let logits = tape.matmul_nt(h, table)?;
        let rows = tape.shape(logits)[0];
        let b = ids.len();
        tape.reshape(logits, &[b, rows / b, self.vocab_size])
    }

    pub fn hidden_states(&self, store: &ParameterStore, seq: &TokenSequence) -> Result<HiddenStates> {
        let mut tape = Tape::new();
        let h = self.hidden(&mut tape, store, &[seq.ids()], None)?;
        Ok(HiddenStates {
            length: seq.len(),
            width: self.cfg.width,
            values: tape.value(h).data().to_vec(),
        })
    }
}
