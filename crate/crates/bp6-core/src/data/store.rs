//! Binary segment store with integrity checking, plus its JSON sidecar.
//!
//! Layout, all little-endian: magic `BP6S`, u32 version, u32 sample count,
//! then per sample: length-prefixed subject id and motion state strings,
//! u32 window index, two f32 labels (SBP, DBP), and the six blocks as f32
//! row-major (channels x 1000). A CRC-32 of everything before it closes the
//! file.

use super::{DataError, MotionState, Provenance, SixModalSample};
use crate::crc::crc32;
use crate::nn::MODALITY_CHANNELS;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"BP6S";
const VERSION: u32 = 1;

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Writes samples to `path`. Every sample must be labeled and well-formed.
pub fn persist_store(samples: &[SixModalSample], path: &Path) -> Result<(), DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for (index, sample) in samples.iter().enumerate() {
        sample.validate()?;
        let label = sample.label.ok_or(DataError::Unlabeled { index })?;
        push_str(&mut out, &sample.provenance.subject_id);
        push_str(&mut out, &sample.provenance.motion_state.to_string());
        out.extend_from_slice(&sample.provenance.window_index.to_le_bytes());
        out.extend_from_slice(&label[0].to_le_bytes());
        out.extend_from_slice(&label[1].to_le_bytes());
        for block in &sample.blocks {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::CorruptStore(format!(
                "truncated at byte {} needing {n} more",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, DataError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| DataError::CorruptStore("non-utf8 string".into()))
    }
}

/// Reads a store back; the inverse of [`persist_store`].
pub fn load_store(path: &Path) -> Result<Vec<SixModalSample>, DataError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 + 4 {
        return Err(DataError::CorruptStore(format!(
            "{} bytes is too short for a store",
            bytes.len()
        )));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32(payload);
    if stored_crc != actual {
        return Err(DataError::CorruptStore(format!(
            "checksum mismatch: stored {stored_crc:#010x}, computed {actual:#010x}"
        )));
    }

    let mut r = Reader { bytes: payload, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DataError::Format("bad magic; not a segment store".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::Format(format!("unsupported store version {version}")));
    }
    let count = r.u32()? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let subject_id = r.string()?;
        let motion_state: MotionState = r
            .string()?
            .parse()
            .map_err(|e: DataError| DataError::CorruptStore(e.to_string()))?;
        let window_index = r.u32()?;
        let label = [r.f32()?, r.f32()?];
        let mut blocks: [Vec<f32>; 6] = std::array::from_fn(|_| Vec::new());
        for (m, block) in blocks.iter_mut().enumerate() {
            let n = MODALITY_CHANNELS[m] * super::BLOCK_LEN;
            block.reserve(n);
            for _ in 0..n {
                block.push(r.f32()?);
            }
        }
        samples.push(SixModalSample {
            blocks,
            label: Some(label),
            provenance: Provenance { subject_id, motion_state, window_index },
        });
    }
    if r.pos != payload.len() {
        return Err(DataError::CorruptStore(format!(
            "{} trailing bytes after the last sample",
            payload.len() - r.pos
        )));
    }
    Ok(samples)
}

/// Provenance recorded beside every store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSidecar {
    pub seed: u64,
    pub config_hash: String,
    /// Window counts keyed by "subject/state".
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl StoreSidecar {
    pub fn for_samples(samples: &[SixModalSample], seed: u64, config_hash: String) -> Self {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for s in samples {
            let key = format!("{}/{}", s.provenance.subject_id, s.provenance.motion_state);
            *counts.entry(key).or_insert(0) += 1;
        }
        StoreSidecar { seed, config_hash, counts, total: samples.len() as u64 }
    }
}

/// Sidecar path for a store: the store path with `.json` appended.
pub fn sidecar_path(store: &Path) -> PathBuf {
    let mut name = store.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    store.with_file_name(name)
}

pub fn write_sidecar(store: &Path, sidecar: &StoreSidecar) -> Result<(), DataError> {
    let json = serde_json::to_vec_pretty(sidecar)
        .map_err(|e| DataError::Format(format!("sidecar serialization: {e}")))?;
    std::fs::write(sidecar_path(store), json)?;
    Ok(())
}

pub fn read_sidecar(store: &Path) -> Result<StoreSidecar, DataError> {
    let bytes = std::fs::read(sidecar_path(store))?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::Format(format!("sidecar parse: {e}")))
}
