//! Binary checkpoint files.
//!
//! ```text
//! PLUSCKPT v1 <config-digest>\n
//! <name> <d0> <d1> ...\n  followed by little-endian f32 data, per parameter
//! sha256 <hex of every preceding byte>\n
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "PLUSCKPT v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint digest {found} does not match expected {expected}")]
    Digest { expected: String, found: String },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("parameter {name} has shape {found:?} in checkpoint, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub digest: String,
    pub params: ParamStore,
}

pub fn write_checkpoint(digest: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = format!("{MAGIC} {digest}\n").into_bytes();
    for (_, name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("{name} {}\n", dims.join(" ")).as_bytes());
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = hex::encode(Sha256::digest(&out));
    out.extend_from_slice(format!("sha256 {sum}\n").as_bytes());
    out
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, CheckpointError> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Format("unterminated line".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Format("non-utf8 header".into()))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut pos = 0;
    let header = take_line(bytes, &mut pos)?;
    let digest = header
        .strip_prefix(MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| CheckpointError::Format(format!("bad header {header:?}")))?
        .to_string();
    let mut params = ParamStore::new();
    loop {
        let body_end = pos;
        let line = take_line(bytes, &mut pos)?;
        if let Some(sum) = line.strip_prefix("sha256 ") {
            if hex::encode(Sha256::digest(&bytes[..body_end])) != sum {
                return Err(CheckpointError::Checksum);
            }
            if pos != bytes.len() {
                return Err(CheckpointError::Format("trailing bytes".into()));
            }
            return Ok(Checkpoint { digest, params });
        }
        let mut parts = line.split(' ');
        let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| CheckpointError::Format("empty block name".into()))?;
        let shape = parts
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CheckpointError::Format(format!("bad shape in {line:?}")))?;
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| CheckpointError::Format(format!("truncated block {name}")))?;
        pos += 4 * n;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if params.find(name).is_some() {
            return Err(CheckpointError::Format(format!("duplicate block {name}")));
        }
        params.add(name, t);
    }
}

pub fn save_checkpoint(path: &Path, digest: &str, store: &ParamStore) -> Result<(), CheckpointError> {
    fs::write(path, write_checkpoint(digest, store)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads `path` into `store`, which must hold exactly the same parameter
/// names and shapes. `expected` rejects files stamped with another digest.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore, expected: Option<&str>) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ckpt = read_checkpoint(&bytes)?;
    if let Some(e) = expected {
        if e != ckpt.digest {
            return Err(CheckpointError::Digest {
                expected: e.to_string(),
                found: ckpt.digest,
            });
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = ckpt
            .params
            .find(&name)
            .map(|i| ckpt.params.get(i))
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if src.shape() != store.get(id).shape() {
            return Err(CheckpointError::Shape {
                name,
                expected: store.get(id).shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        *store.get_mut(id) = src.clone();
    }
    if ckpt.params.len() != store.len() {
        return Err(CheckpointError::Format(format!(
            "checkpoint has {} blocks, model has {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    Ok(ckpt.digest)
}
