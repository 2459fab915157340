//! Weight files and trajectory files.
//!
//! Weight file layout (all integers little-endian):
//!
//! ```text
//! "TALE"  u32 version  u32 config_len  config_text
//! u32 n_tensors
//!   per tensor: u32 name_len  name  u32 rank  u64 dims[rank]  u8 dtype  u64 offset
//! payloads, contiguous, in directory order
//! ```
//!
//! `offset` counts bytes from the start of the payload section. Only dtype
//! 0 (f64) is written; 1 (f32) is read and widened.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Block, ModelConfig, TransformerModel, Weights};
use crate::search::{Fingerprint, IterationRecord, PruneTrajectory, Termination, ThresholdMode};
use crate::task::TaskSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TALE";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;
pub const DTYPE_F32: u8 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn model_bytes(model: &TransformerModel) -> Vec<u8> {
    let config = model.config().to_canonical_text();
    let named = model.weights().named();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F64);
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.len() as u64;
    }
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn model_hash(model: &TransformerModel) -> String {
    sha256_hex(&model_bytes(model))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated: need {n} bytes for {what}, {} remain", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| Error::format(at, format!("{what} is not UTF-8: {e}")))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: u8,
    offset: u64,
    at: usize,
}

pub fn model_from_bytes(buf: &[u8]) -> Result<TransformerModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "not a TALE weight file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported format version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let config = ModelConfig::from_canonical_text(r.utf8(len, "config")?)
        .map_err(|e| Error::format(at, format!("bad config block: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = r.utf8(name_len, "tensor name")?.to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(at, format!("tensor {name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let dtype = r.u8("dtype")?;
        let offset = r.u64("offset")?;
        entries.push(Entry { name, shape, dtype, offset, at });
    }
    let payload_start = r.pos;
    let mut expected_offset = 0u64;
    let mut tensors = BTreeMap::new();
    for e in entries {
        if e.offset != expected_offset {
            return Err(Error::format(
                e.at,
                format!("tensor {}: offset {} inconsistent with payload layout (expected {expected_offset})", e.name, e.offset),
            ));
        }
        let width = match e.dtype {
            DTYPE_F64 => 8usize,
            DTYPE_F32 => 4,
            d => return Err(Error::format(e.at, format!("tensor {}: unknown dtype {d}", e.name))),
        };
        let n = e
            .shape
            .iter()
            .try_fold(width, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(e.at, format!("tensor {}: dims overflow", e.name)))?
            / width;
        let bytes = r.take(n * width, &format!("payload of {}", e.name))?;
        let data: Vec<f64> = if width == 8 {
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()
        } else {
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect()
        };
        expected_offset += (n * width) as u64;
        let t = Tensor::new(e.shape, data).map_err(|err| Error::format(e.at, format!("tensor {}: {err}", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::format(e.at, format!("duplicate tensor {}", e.name)));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos, "trailing bytes after payload"));
    }
    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::format(payload_start, format!("missing tensor {name}")))
    };
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 1..=config.n_layers {
        let mut get = |n: &str| take(format!("layer.{i}.{n}"));
        blocks.push(Block {
            attn_norm: get("attn_norm")?,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            mlp_norm: get("mlp_norm")?,
            w_up: get("w_up")?,
            w_down: get("w_down")?,
        });
    }
    let weights = Weights {
        embed: take("embed".into())?,
        blocks,
        final_norm: take("final_norm".into())?,
        w_out: take("w_out".into())?,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(payload_start, format!("unexpected tensor {extra}")));
    }
    TransformerModel::from_weights(config, weights).map_err(|e| Error::format(payload_start, e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn save_model(model: &TransformerModel, path: &Path) -> Result<()> {
    write_file(path, &model_bytes(model))
}

pub fn load_model(path: &Path) -> Result<TransformerModel> {
    model_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryHeader {
    pub model_hash: String,
    pub task_hash: String,
    pub epsilon: f64,
    pub mode: ThresholdMode,
    pub tool_version: String,
    pub n_layers: usize,
    pub task: TaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub header: TrajectoryHeader,
    pub records: Vec<IterationRecord>,
    pub termination: Option<Termination>,
}

impl TrajectoryFile {
    pub fn new(traj: &PruneTrajectory, task: &TaskSpec) -> Self {
        TrajectoryFile {
            header: TrajectoryHeader {
                model_hash: traj.fingerprint.model_hash.clone(),
                task_hash: traj.fingerprint.task_hash.clone(),
                epsilon: traj.epsilon,
                mode: traj.mode,
                tool_version: TOOL_VERSION.to_string(),
                n_layers: traj.n_layers,
                task: task.clone(),
            },
            records: traj.records.clone(),
            termination: traj.termination.clone(),
        }
    }

    pub fn trajectory(&self) -> PruneTrajectory {
        PruneTrajectory {
            fingerprint: Fingerprint {
                model_hash: self.header.model_hash.clone(),
                task_hash: self.header.task_hash.clone(),
            },
            n_layers: self.header.n_layers,
            epsilon: self.header.epsilon,
            mode: self.header.mode,
            records: self.records.clone(),
            termination: self.termination.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let is_hash = |s: &str| s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !is_hash(&self.header.model_hash) || !is_hash(&self.header.task_hash) {
            return Err(Error::Integrity("trajectory hashes must be lowercase hex SHA-256".into()));
        }
        if self.header.task.fingerprint() != self.header.task_hash {
            return Err(Error::Integrity("task hash does not match the embedded task spec".into()));
        }
        self.trajectory().check_invariants()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trajectory serializes");
        s.push('\n');
        s
    }
}

pub fn save_trajectory(file: &TrajectoryFile, path: &Path) -> Result<()> {
    // Write-then-rename so an interrupted run never leaves a torn file.
    let tmp = path.with_extension("json.tmp");
    write_file(&tmp, file.to_json().as_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn trajectory_from_str(text: &str) -> Result<TrajectoryFile> {
    let file: TrajectoryFile = serde_json::from_str(text).map_err(|e| {
        let offset = text
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::format(offset, format!("invalid trajectory JSON: {e}"))
    })?;
    file.validate()?;
    Ok(file)
}

pub fn load_trajectory(path: &Path) -> Result<TrajectoryFile> {
    trajectory_from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> TransformerModel {
        TransformerModel::init(ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 10,
            max_seq_len: 5,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn bytes_round_trip() {
        let m = model();
        let b = model_bytes(&m);
        let back = model_from_bytes(&b).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_bytes(&back), b);
    }

    #[test]
    fn truncation_reports_offset() {
        let b = model_bytes(&model());
        for cut in [0, 3, 7, 11, 40, b.len() - 1] {
            match model_from_bytes(&b[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn foreign_magic_and_version_refused() {
        let mut b = model_bytes(&model());
        b[0] = b'X';
        assert!(matches!(model_from_bytes(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = model_bytes(&model());
        b[4] = 2;
        assert!(matches!(model_from_bytes(&b), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn trailing_bytes_refused() {
        let mut b = model_bytes(&model());
        b.push(0);
        assert!(model_from_bytes(&b).unwrap_err().is_format());
    }
}
