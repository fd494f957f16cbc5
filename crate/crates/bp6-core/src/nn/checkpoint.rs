//! Model checkpoint file: little-endian binary, magic `BP6C`, a format
//! version, then one name-prefixed float32 array per parameter and buffer
//! (name, rank, dims, data), closed by a CRC-32 of everything before it.

use super::ParamSet;
use crate::crc::crc32;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"BP6C";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint integrity check failed (crc mismatch)")]
    CrcMismatch,
    #[error("checkpoint entry name is not valid utf-8")]
    BadName,
    #[error("checkpoint entry {name}: shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint has no entry for model tensor {0}")]
    MissingEntry(String),
    #[error("checkpoint entry {0} does not exist in the model")]
    UnknownEntry(String),
}

fn push_entry(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes every parameter and buffer of `ps` to `path`.
pub fn save_checkpoint(ps: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let count = ps.iter_params().count() + ps.iter_buffers().count();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, tensor) in ps.iter_params() {
        push_entry(&mut buf, name, tensor);
    }
    for (name, cell) in ps.iter_buffers() {
        push_entry(&mut buf, name, &cell.borrow());
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn parse_entries(bytes: &[u8]) -> Result<HashMap<String, Tensor>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(body) != stored {
        return Err(CheckpointError::CrcMismatch);
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut entries = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::from_vec(&shape, data).map_err(|_| CheckpointError::Truncated)?;
        entries.insert(name, tensor);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Truncated);
    }
    Ok(entries)
}

/// Loads a checkpoint into `ps`. Every model tensor must appear in the file
/// with a matching shape, and the file must not contain extra entries.
pub fn load_checkpoint(ps: &mut ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut entries = parse_entries(&bytes)?;

    let param_names: Vec<String> = ps.iter_params().map(|(n, _)| n.to_owned()).collect();
    for name in param_names {
        let tensor = entries
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.clone()))?;
        let id = ps.find_param(&name).expect("name taken from ps");
        let expected = ps.param_value(id).shape().to_vec();
        if tensor.shape() != expected.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected,
                found: tensor.shape().to_vec(),
            });
        }
        ps.set_param(id, tensor).expect("shape checked above");
    }
    let buffer_names: Vec<String> = ps.iter_buffers().map(|(n, _)| n.to_owned()).collect();
    for name in buffer_names {
        let tensor = entries
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.clone()))?;
        let id = ps.find_buffer(&name).expect("name taken from ps");
        let cell = ps.buffer(id);
        let expected = cell.borrow().shape().to_vec();
        if tensor.shape() != expected.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected,
                found: tensor.shape().to_vec(),
            });
        }
        *cell.borrow_mut() = tensor;
    }
    if let Some(name) = entries.into_keys().next() {
        return Err(CheckpointError::UnknownEntry(name));
    }
    Ok(())
}
