//! Binary checkpoint format.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! magic        8 bytes  "CLAPDESK"
//! version      u32
//! digest       32 bytes SHA-256 of the config snapshot
//! config       u64 length + UTF-8 TOML
//! kind         u32 length + UTF-8 (e.g. "clap", "pretrain", "caption")
//! epoch        u64
//! has_score    u8, then f64 zero-shot score when 1
//! n_params     u64, then per parameter:
//!                name (u32 length + UTF-8), ndim u32, dims u64 x ndim, values f64 x numel
//! has_adam     u8, then when 1:
//!                learning_rate, beta1, beta2, epsilon f64, step u64, n_moments u64,
//!                per moment: name, len u64, first f64 x len, second f64 x len
//! ```

use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Moments, ParameterStore, Tensor};

pub const MAGIC: &[u8; 8] = b"CLAPDESK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub kind: String,
    pub epoch: u64,
    pub zero_shot_score: Option<f64>,
    pub params: ParameterStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, kind: &str, epoch: u64, params: ParameterStore) -> Result<Self> {
        Ok(Self {
            config_toml: config.to_toml()?,
            kind: kind.to_string(),
            epoch,
            zero_shot_score: None,
            params,
            optimizer: None,
        })
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_toml)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.bytes(&Sha256::digest(self.config_toml.as_bytes()));
        w.u64(self.config_toml.len() as u64);
        w.bytes(self.config_toml.as_bytes());
        w.short_str(&self.kind);
        w.u64(self.epoch);
        match self.zero_shot_score {
            Some(s) => {
                w.u8(1);
                w.f64(s);
            }
            None => w.u8(0),
        }
        w.u64(self.params.len() as u64);
        for (name, p) in self.params.iter() {
            w.short_str(name);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.f64s(p.value.data());
        }
        match &self.optimizer {
            Some(a) => {
                w.u8(1);
                for v in [a.learning_rate, a.beta1, a.beta2, a.epsilon] {
                    w.f64(v);
                }
                w.u64(a.step);
                w.u64(a.moments.len() as u64);
                for (name, m) in &a.moments {
                    w.short_str(name);
                    w.u64(m.first.len() as u64);
                    w.f64s(&m.first);
                    w.f64s(&m.second);
                }
            }
            None => w.u8(0),
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let digest = r.take(32)?.to_vec();
        let len = r.len_u64()?;
        let config_toml = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
        if Sha256::digest(config_toml.as_bytes()).as_slice() != digest.as_slice() {
            return Err(Error::Checkpoint("config digest does not match the snapshot".into()));
        }
        let kind = r.short_str()?;
        let epoch = r.u64()?;
        let zero_shot_score = match r.u8()? {
            0 => None,
            1 => Some(r.f64()?),
            other => return Err(Error::Checkpoint(format!("bad score flag {other}"))),
        };
        let n = r.len_u64()?;
        let mut params = ParameterStore::new();
        for _ in 0..n {
            let name = r.short_str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("shape of `{name}` overflows")))?;
            let data = r.f64s(numel)?;
            params
                .insert(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let (lr, b1, b2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let mut a = AdamState::with_betas(lr, b1, b2, eps);
                a.step = r.u64()?;
                let count = r.len_u64()?;
                let mut moments = IndexMap::new();
                for _ in 0..count {
                    let name = r.short_str()?;
                    let len = r.len_u64()?;
                    let first = r.f64s(len)?;
                    let second = r.f64s(len)?;
                    moments.insert(name, Moments { first, second });
                }
                a.moments = moments;
                Some(a)
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the optimizer state",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_toml,
            kind,
            epoch,
            zero_shot_score,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads `path`; a missing file is reported with `producer`, the command that
    /// writes it.
    pub fn load(path: &Path, producer: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: format!("run `{producer}` first"),
            });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.buf.reserve(v.len() * 8);
        for x in v {
            self.f64(*x);
        }
    }
    fn short_str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len_u64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("array length overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn short_str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}
