//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PLDR" | u32 version | u32 n | n bytes config JSON
//!        | u32 m | m bytes tensor index JSON | raw f32 payload
//! ```
//!
//! The index lists `{name, shape, offset}` per tensor; `offset` counts
//! bytes from the start of the payload.

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::PldrModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PLDR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn to_bytes(model: &PldrModel) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let mut index = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.weights.visit(&mut |name, t| {
        index.push(IndexEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let index = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(16 + config.len() + index.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for block in [&config, &index] {
        let len = u32::try_from(block.len())
            .map_err(|_| Error::InvalidArgument("checkpoint header too large".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(block);
    }
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<PldrModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let n = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;
    let config = config.validate()?;
    let m = r.u32("index length")? as usize;
    let index: Vec<IndexEntry> = serde_json::from_slice(r.take(m, "index")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("index block: {e}")))?;
    let payload = &buf[r.pos..];

    let expected = PldrModel::expected_shapes(&config);
    if index.len() != expected.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} tensors in index, config implies {}",
            index.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(index.len());
    let mut cursor = 0u64;
    for (entry, (name, shape)) in index.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {} {:?} where config implies {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        if entry.offset != cursor {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {} at offset {}, expected {}",
                entry.name, entry.offset, cursor
            )));
        }
        let count: usize = shape.iter().product();
        let start = cursor as usize;
        let end = start + count * 4;
        if end > payload.len() {
            return Err(Error::CorruptCheckpoint(format!("payload truncated in {}", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
        cursor = end as u64;
    }
    if cursor as usize != payload.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing payload bytes",
            payload.len() - cursor as usize
        )));
    }

    // Rebuild the weight tree from a freshly shaped template.
    let mut template = template_weights(&config);
    let mut it = tensors.into_iter();
    template.visit_mut(&mut |_, t| *t = it.next().expect("counts checked"));
    PldrModel::from_weights(config, template)
}

fn template_weights(config: &ModelConfig) -> crate::model::Weights<Tensor<f32>> {
    use crate::config::Variant;
    // Any variant shares the tree shape apart from the G source, so start
    // from a trainable or identity model and swap in constant slots.
    let init = match config.variant {
        Variant::Trainable => ModelConfig {
            init_seed: 0,
            ..config.clone()
        },
        _ => ModelConfig {
            variant: Variant::PredefinedG,
            predefined_g_kind: Some(crate::config::PredefinedGKind::Identity),
            init_seed: 0,
            ..config.clone()
        },
    };
    PldrModel::new(init).expect("validated config").weights
}

pub fn save(model: &PldrModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PldrModel> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::CheckpointNotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}
