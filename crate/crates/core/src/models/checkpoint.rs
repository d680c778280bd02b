//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "VFCK" | u32 version | [u8; 32] config digest | u32 record count
//! per record: u32 name length | name (UTF-8) | u8 dtype tag | u32 rank
//!             | u32 extents[rank] | scalars
//! [u8; 32] SHA-256 of every preceding byte
//! ```
//!
//! Dtype tag 0 is f32, 1 is f64. Running statistics are stored alongside the
//! trainable parameters.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub(super) fn save(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.digest());
    let entries = model.store().entries();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = Sha256::digest(&buf);
    buf.extend_from_slice(&sum);
    std::fs::write(path, buf).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> ModelError {
        ModelError::Checkpoint {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub(super) fn load_into(model: &mut Model, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let checkpoint_err = |detail: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 + 4 + 32 + 4 + 32 {
        return Err(checkpoint_err(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(checkpoint_err("missing VFCK magic".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(checkpoint_err("content checksum mismatch; the file is corrupt or was modified".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: 4,
        path,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let digest = r.take(32)?;
    if digest != model.digest() {
        return Err(ModelError::DigestMismatch {
            path: path.to_path_buf(),
            expected: model.digest_hex(),
            found: hex::encode(digest),
        });
    }
    let count = r.u32()? as usize;
    if count != model.store().len() {
        return Err(r.err(format!("{count} records, model has {}", model.store().len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.err("parameter name is not UTF-8"))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F32 => r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DTYPE_F64 => r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            t => return Err(r.err(format!("parameter `{name}` has unknown dtype tag {t}"))),
        };
        let id = model
            .store()
            .id_of(&name)
            .ok_or_else(|| r.err(format!("unexpected parameter `{name}`")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(r.err(format!("parameter `{name}` appears twice")));
        }
        let value = Tensor::new(shape, data).map_err(|e| r.err(format!("parameter `{name}`: {e}")))?;
        model
            .store_mut()
            .set(id, value)
            .map_err(|e| checkpoint_err(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(r.err(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(())
}
