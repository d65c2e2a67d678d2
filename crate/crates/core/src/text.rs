//! Word-level tokenizer with a reserved end-of-text token.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOT: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<eot>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

/// Lowercases, replaces punctuation with spaces and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Input(
                "vocabulary must start with <pad>, <eot>, <unk>".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Keeps the `max_size - 3` most frequent words; ties break lexicographically.
    pub fn build<S: AsRef<str>>(texts: &[S], max_size: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from no text".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in normalize_words(t.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size.saturating_sub(RESERVED.len()));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn encode(&self, text: &str, max_text_len: usize) -> Result<TokenSequence> {
        encode(text, self, max_text_len)
    }

    /// Content words up to the first EOT; PAD and reserved ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOT)
            .filter(|&&i| i != PAD)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Padded token ids with exactly one EOT.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    eot_position: usize,
}

impl TokenSequence {
    /// Validates a raw id sequence: exactly one EOT, followed only by PAD.
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        let eots: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &i)| i == EOT)
            .map(|(p, _)| p)
            .collect();
        let [eot_position] = eots[..] else {
            return Err(Error::Contract(format!(
                "token sequence must contain exactly one EOT, found {}",
                eots.len()
            )));
        };
        if ids[eot_position + 1..].iter().any(|&i| i != PAD)
            || ids[..eot_position].contains(&PAD)
        {
            return Err(Error::Contract("EOT must be the last non-PAD token".into()));
        }
        Ok(Self { ids, eot_position })
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

    pub fn eot_position(&self) -> usize {
        self.eot_position
    }

    /// Content tokens plus the EOT.
    pub fn content_len(&self) -> usize {
        self.eot_position + 1
    }

    /// Same content padded (or trimmed of PAD) to `len`.
    pub fn with_len(&self, len: usize) -> Result<Self> {
        if len < self.content_len() {
            return Err(Error::Contract(format!(
                "cannot shrink a sequence with {} content tokens to {len}",
                self.content_len()
            )));
        }
        let mut ids = self.ids[..self.content_len()].to_vec();
        ids.resize(len, PAD);
        Ok(Self {
            ids,
            eot_position: self.eot_position,
        })
    }
}

/// Word ids (UNK when out of vocabulary) truncated to `max_text_len - 1`, then
/// EOT, then PAD up to `max_text_len`.
pub fn encode(text: &str, vocab: &Vocabulary, max_text_len: usize) -> Result<TokenSequence> {
    if max_text_len < 2 {
        return Err(Error::Config("max_text_len must be at least 2".into()));
    }
    let mut ids: Vec<usize> = normalize_words(text)
        .iter()
        .map(|w| vocab.id(w))
        .take(max_text_len - 1)
        .collect();
    let eot_position = ids.len();
    ids.push(EOT);
    ids.resize(max_text_len, PAD);
    Ok(TokenSequence { ids, eot_position })
}
