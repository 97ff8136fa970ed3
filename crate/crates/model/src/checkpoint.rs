//! Versioned checkpoint container: `VTCDCKPT` magic, u32 LE manifest length,
//! JSON manifest, then every tensor as f32 LE in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Hyperplane;
use crate::error::{Error, Result};
use crate::losses::Phase;
use crate::params::TensorRecord;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VTCDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the training RNG stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Phase of the most recently completed epoch.
    pub phase: Phase,
    /// Epochs completed within `phase`.
    pub epoch: usize,
    /// Epochs completed per phase, in phase order.
    pub completed: [usize; 3],
    pub config: TrainConfig,
    pub rng: RngState,
    pub hyperplane: Option<Hyperplane>,
    /// Optimizer step counters per parameter group.
    pub optimizer_steps: BTreeMap<String, Vec<u64>>,
    /// Parameters (`param/...`) and optimizer moments (`adam/...`). Values
    /// live in the binary payload, not in the JSON manifest.
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Parameter records whose names start with `param/{prefix}`, with the
    /// `param/` tag stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<TensorRecord> {
        let tag = format!("param/{prefix}");
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with(&tag))
            .map(|t| TensorRecord {
                name: t.name["param/".len()..].to_string(),
                ..t.clone()
            })
            .collect()
    }

    /// The little-endian payload, which is also what "byte-identical
    /// parameter blobs" refers to.
    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.tensors.iter().map(|t| t.data.len()).sum::<usize>());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Writes to a sibling temporary file and renames, so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for t in &ckpt.tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::Config(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
    }
    let manifest = serde_json::to_vec(ckpt).map_err(|e| Error::format(path, e.to_string()))?;
    let len = u32::try_from(manifest.len()).map_err(|_| Error::format(path, "manifest too large"))?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&len.to_le_bytes())?;
        f.write_all(&manifest)?;
        f.write_all(&ckpt.payload())?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing VTCDCKPT magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::format(path, format!("manifest needs {len} bytes, file has {}", bytes.len() - 12)))?;
    let header: serde_json::Value = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let version = header.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::format(
            path,
            format!(
                "checkpoint format version {}, expected {CHECKPOINT_VERSION}",
                version.map_or_else(|| "missing".to_string(), |v| v.to_string())
            ),
        ));
    }
    let mut ckpt: Checkpoint = serde_json::from_value(header).map_err(|e| Error::format(path, e.to_string()))?;
    let payload = &bytes[12 + len..];
    let expected: usize = ckpt.tensors.iter().map(|t| 4 * t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut chunks = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for t in ckpt.tensors.iter_mut() {
        let n: usize = t.shape.iter().product();
        t.data = chunks.by_ref().take(n).collect();
    }
    Ok(ckpt)
}
