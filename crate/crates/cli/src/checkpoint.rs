//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "AGNET1\0\0"
//! version    u32      1
//! metadata   u32 length + UTF-8 JSON
//! records    u32 count, then per record:
//!              u32 name length + UTF-8 name
//!              u32 rank, rank x u64 extents
//!              little-endian f32 payload
//! crc32      u32 over every preceding byte
//! ```
//!
//! All integers are little-endian. Parameters come first in canonical order,
//! followed by one `sgd.velocity.<name>` record per parameter.

use std::collections::HashMap;
use std::path::Path;

use agnet::net::{AgNet, NetConfig};
use agnet::numerics::{SgdState, Tensor};
use agnet::training::{TrainConfig, TrainState};
use agnet::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

pub const MAGIC: &[u8; 8] = b"AGNET1\0\0";
pub const VERSION: u32 = 1;
pub const VELOCITY_PREFIX: &str = "sgd.velocity.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub classes: usize,
    pub class_names: Vec<String>,
    pub channels: usize,
    pub kappa: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Completed training epochs.
    pub epoch: usize,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl CheckpointMeta {
    pub fn new(net: &NetConfig, train: &TrainConfig, class_names: Vec<String>, epoch: usize) -> Self {
        Self {
            classes: net.classes,
            class_names,
            channels: net.channels(),
            kappa: train.kappa,
            image_size: train.image_size,
            seed: train.seed,
            epoch,
            net: net.clone(),
            train: train.clone(),
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.classes != self.net.classes || self.classes != self.class_names.len() {
            return Err(format!("class count {} disagrees with network or class names", self.classes));
        }
        if self.channels != self.net.channels() || self.kappa != self.train.kappa || self.image_size != self.train.image_size {
            return Err("metadata summary disagrees with stored configuration".into());
        }
        self.net.validate().map_err(|e| e.to_string())
    }
}

/// A decoded checkpoint: metadata plus a resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub state: TrainState<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_str(out, name);
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Serializes metadata, parameters and optimizer velocity. `meta.epoch` is
/// overwritten with `state.epoch`.
pub fn encode_checkpoint<T: Scalar>(meta: &CheckpointMeta, state: &TrainState<T>) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.epoch = state.epoch;
    let named = state.net.params.named();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &serde_json::to_string(&meta)?);
    put_u32(&mut out, (2 * named.len()) as u32);
    for (name, t) in &named {
        put_tensor(&mut out, name, t);
    }
    for ((name, _), v) in named.iter().zip(&state.sgd.velocity) {
        put_tensor(&mut out, &format!("{VELOCITY_PREFIX}{name}"), v);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> CliError {
        CliError::Checkpoint { path: self.path.to_path_buf(), message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| self.err(format!("{what} is not UTF-8")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.str("record name")?.to_string();
        let rank = self.u32("record rank")? as usize;
        if rank > 8 {
            return Err(self.err(format!("record {name:?} has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u64("record extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).ok_or_else(|| self.err("extent overflow"))?;
        let bytes = len.checked_mul(4).ok_or_else(|| self.err("extent overflow"))?;
        let payload = self.take(bytes, &format!("payload of {name:?}"))?;
        let data = payload.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect();
        let t = Tensor::new(&shape, data).map_err(|e| self.err(e.to_string()))?;
        Ok((name, t))
    }
}

/// Parses and validates checkpoint bytes; `path` only labels errors.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(r.err("bad magic: not an agnet checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported format version {version} (expected {VERSION})")));
    }
    if bytes.len() < r.pos + 4 {
        return Err(r.err("truncated: missing checksum"));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(r.err("checksum mismatch: file is corrupt or truncated"));
    }
    r.bytes = &bytes[..body];

    let meta: CheckpointMeta = serde_json::from_str(r.str("metadata")?).map_err(|e| r.err(format!("metadata: {e}")))?;
    meta.check().map_err(|m| r.err(m))?;
    let count = r.u32("record count")? as usize;
    let mut records = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor::<T>()?;
        if records.insert(name.clone(), t).is_some() {
            return Err(r.err(format!("duplicate record {name:?}")));
        }
    }
    if r.pos != r.bytes.len() {
        return Err(r.err(format!("{} trailing bytes after records", r.bytes.len() - r.pos)));
    }

    let mut net = AgNet::<T>::new(meta.net.clone(), 0)?;
    let names: Vec<String> = net.params.named().into_iter().map(|(n, _)| n).collect();
    let mut take = |name: &str| records.remove(name).ok_or_else(|| r.err(format!("missing record {name:?}")));
    let params = names.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
    let velocity = names.iter().map(|n| take(&format!("{VELOCITY_PREFIX}{n}"))).collect::<Result<Vec<_>>>()?;
    if let Some(extra) = records.keys().next() {
        return Err(r.err(format!("unexpected record {extra:?}")));
    }
    net.params.set_tensors(params).map_err(|e| r.err(e.to_string()))?;
    let mut sgd = SgdState::new(&velocity, T::lit(meta.train.lr), T::lit(meta.train.momentum))?
        .with_decay(T::lit(meta.train.decay_factor), meta.train.decay_every);
    for (dst, src) in sgd.velocity.iter_mut().zip(velocity) {
        if dst.shape() != src.shape() {
            return Err(r.err("velocity shape disagrees with parameter"));
        }
        *dst = src;
    }
    let epoch = meta.epoch;
    Ok(Checkpoint { meta, state: TrainState { net, sgd, epoch } })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint<T: Scalar>(path: &Path, meta: &CheckpointMeta, state: &TrainState<T>) -> Result<()> {
    let bytes = encode_checkpoint(meta, state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, path)
}
