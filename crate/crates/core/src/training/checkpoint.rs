//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "LGCKPT\0\0"
//! version    u32       FORMAT_VERSION
//! count      u32       number of entries
//! entry*     name_len u32, name (UTF-8), kind u8, ndim u32, dims u64 × ndim,
//!            payload: kind 0 = f64 × prod(dims), kind 1 = u64 × prod(dims),
//!            kind 2 = UTF-8 bytes × prod(dims)
//! checksum   u64       FNV-1a 64 over every preceding byte
//! ```
//!
//! The file is read fully and verified before anything is decoded, so a
//! truncated or corrupt file yields an error and no partial state.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::adam::OptimizerState;
use super::{EpochRecord, TrainState};
use crate::agents::{AgentParams, PARAM_NAMES};
use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::run::fnv1a;

pub const MAGIC: &[u8; 8] = b"LGCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

const KIND_F64: u8 = 0;
const KIND_U64: u8 = 1;
const KIND_TEXT: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    /// Transform fitted on the training split, if one was applied.
    pub standardization: Option<Standardization>,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    dims: Vec<usize>,
    payload: Payload,
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn new() -> Self {
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        Self { buf, count: 0 }
    }

    fn header(&mut self, name: &str, kind: u8, dims: &[usize]) {
        self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(kind);
        self.buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            self.buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        self.count += 1;
    }

    fn f64s(&mut self, name: &str, dims: &[usize], values: &[f64]) {
        self.header(name, KIND_F64, dims);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn u64s(&mut self, name: &str, values: &[u64]) {
        self.header(name, KIND_U64, &[values.len()]);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn text(&mut self, name: &str, text: &str) {
        self.header(name, KIND_TEXT, &[text.len()]);
        self.buf.extend_from_slice(text.as_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.f64s(name, t.shape(), t.values());
    }

    fn finish(mut self) -> Vec<u8> {
        self.buf[12..16].copy_from_slice(&self.count.to_le_bytes());
        let sum = fnv1a(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let pos = rng.get_word_pos();
    words.push(rng.get_stream());
    words.push(pos as u64);
    words.push((pos >> 64) as u64);
    words
}

fn rng_from_words(words: &[u64]) -> Result<ChaCha8Rng> {
    if words.len() != 7 {
        return Err(Error::Checkpoint(format!("rng state needs 7 words, got {}", words.len())));
    }
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(&words[..4]) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[4]);
    rng.set_word_pos(words[5] as u128 | (words[6] as u128) << 64);
    Ok(rng)
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let s = &ckpt.state;
    let mut w = Writer::new();
    w.text("config", &ckpt.config.to_text());
    for (name, t) in s.params.named() {
        w.tensor(&format!("param/{name}"), t);
    }
    for (name, t) in s.best_params.named() {
        w.tensor(&format!("best/{name}"), t);
    }
    for (k, (name, t)) in s.params.named().enumerate() {
        w.f64s(&format!("adam_m/{name}"), t.shape(), &s.optimizer.first[k]);
        w.f64s(&format!("adam_v/{name}"), t.shape(), &s.optimizer.second[k]);
    }
    w.u64s("adam_step", &[s.optimizer.step]);
    w.u64s("rng/episode", &rng_words(&s.episode_rng));
    w.u64s("rng/gumbel", &rng_words(&s.gumbel_rng));
    w.u64s(
        "progress",
        &[
            s.epoch as u64,
            s.epochs_since_best as u64,
            s.best_epoch.map_or(u64::MAX, |e| e as u64),
            s.stopped_early as u64,
        ],
    );
    w.f64s("best_val_accuracy", &[1], &[s.best_val_accuracy]);
    let history: Vec<f64> = s
        .history
        .iter()
        .flat_map(|h| [h.epoch as f64, h.train_loss, h.val_accuracy, h.temperature])
        .collect();
    if !history.is_empty() {
        w.f64s("history", &[s.history.len(), 4], &history);
    }
    if let Some(st) = &ckpt.standardization {
        w.f64s("standardization/mean", &[st.mean.len()], &st.mean);
        w.f64s("standardization/std", &[st.std.len()], &st.std);
    }
    w.finish()
}

fn parse_entries(bytes: &[u8]) -> Result<BTreeMap<String, Entry>> {
    if bytes.len() < MAGIC.len() + 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic or too short)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt file)".into()));
    }
    let count = r.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let kind = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` has absurd dimensions")))?;
        let payload = match kind {
            KIND_F64 => Payload::F64(
                r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            KIND_U64 => Payload::U64(
                r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            KIND_TEXT => Payload::Text(
                String::from_utf8(r.take(n)?.to_vec())
                    .map_err(|_| Error::Checkpoint(format!("entry `{name}` is not UTF-8")))?,
            ),
            other => return Err(Error::Checkpoint(format!("entry `{name}` has unknown kind {other}"))),
        };
        entries.insert(name, Entry { dims, payload });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

struct Entries(BTreeMap<String, Entry>);

impl Entries {
    fn get(&mut self, name: &str) -> Result<Entry> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    fn f64s(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.get(name)? {
            Entry { dims, payload: Payload::F64(v) } => Ok((dims, v)),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not an f64 array"))),
        }
    }

    fn u64s(&mut self, name: &str) -> Result<Vec<u64>> {
        match self.get(name)?.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not a u64 array"))),
        }
    }

    fn text(&mut self, name: &str) -> Result<String> {
        match self.get(name)?.payload {
            Payload::Text(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not text"))),
        }
    }

    fn tensor(&mut self, name: &str) -> Result<Tensor> {
        let (dims, values) = self.f64s(name)?;
        Tensor::new(dims, values).map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))
    }

    fn params(&mut self, prefix: &str, config: &RunConfig) -> Result<AgentParams> {
        let tensors = PARAM_NAMES
            .iter()
            .map(|n| self.tensor(&format!("{prefix}/{n}")))
            .collect::<Result<Vec<_>>>()?;
        AgentParams::from_tensors(&config.game, tensors)
            .map_err(|e| Error::Checkpoint(format!("{prefix} parameters: {e}")))
    }
}

/// Decodes bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut e = Entries(parse_entries(bytes)?);
    let config = RunConfig::parse(&e.text("config")?)
        .map_err(|err| Error::Checkpoint(format!("embedded config: {err}")))?;
    let params = e.params("param", &config)?;
    let best_params = e.params("best", &config)?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, t) in params.named() {
        for (prefix, out) in [("adam_m", &mut first), ("adam_v", &mut second)] {
            let (_, v) = e.f64s(&format!("{prefix}/{name}"))?;
            if v.len() != t.len() {
                return Err(Error::Checkpoint(format!("{prefix}/{name} has wrong length")));
            }
            out.push(v);
        }
    }
    let step = *e.u64s("adam_step")?.first().ok_or_else(|| Error::Checkpoint("empty adam_step".into()))?;
    let episode_rng = rng_from_words(&e.u64s("rng/episode")?)?;
    let gumbel_rng = rng_from_words(&e.u64s("rng/gumbel")?)?;
    let progress = e.u64s("progress")?;
    let [epoch, since, best_epoch, stopped] = <[u64; 4]>::try_from(progress)
        .map_err(|_| Error::Checkpoint("progress entry needs 4 words".into()))?;
    let (_, best_acc) = e.f64s("best_val_accuracy")?;
    let history = match e.0.contains_key("history") {
        false => Vec::new(),
        true => {
            let (dims, v) = e.f64s("history")?;
            if dims.len() != 2 || dims[1] != 4 {
                return Err(Error::Checkpoint("history must be an n×4 array".into()));
            }
            v.chunks_exact(4)
                .map(|r| EpochRecord {
                    epoch: r[0] as usize,
                    train_loss: r[1],
                    val_accuracy: r[2],
                    temperature: r[3],
                })
                .collect()
        }
    };
    let standardization = match e.0.contains_key("standardization/mean") {
        false => None,
        true => Some(Standardization {
            mean: e.f64s("standardization/mean")?.1,
            std: e.f64s("standardization/std")?.1,
        }),
    };
    let state = TrainState {
        params,
        best_params,
        optimizer: OptimizerState { first, second, step },
        episode_rng,
        gumbel_rng,
        epoch: epoch as usize,
        epochs_since_best: since as usize,
        best_epoch: (best_epoch != u64::MAX).then_some(best_epoch as usize),
        best_val_accuracy: *best_acc.first().ok_or_else(|| Error::Checkpoint("empty best_val_accuracy".into()))?,
        stopped_early: stopped != 0,
        history,
    };
    Ok(Checkpoint {
        config,
        state,
        standardization,
    })
}

/// Writes atomically: the file is staged next to `path` and renamed into place.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let staging = path.with_extension("partial");
    std::fs::write(&staging, encode(ckpt)).map_err(|e| Error::io(&staging, e))?;
    std::fs::rename(&staging, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
