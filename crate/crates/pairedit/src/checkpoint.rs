//! Checkpoint file format: a fixed magic, a little-endian u64 header
//! length, a JSON header describing the run and the tensor table, then
//! one contiguous little-endian f32 payload. Tensor offsets are in f32
//! elements and must tile the payload exactly. Saving is deterministic,
//! so save, load, save again produces byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PAIREDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Start of this tensor in the payload, counted in f32 elements.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: Config,
    step: u64,
    rng_state: [u64; 4],
    tensors: Vec<TensorEntry>,
}

/// In-memory image of a checkpoint: everything needed to resume training
/// bit-exactly. Optimizer moments ride along as tensors named
/// `opt.m.<param>` and `opt.v.<param>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub config: Config,
    pub step: u64,
    pub rng_state: [u64; 4],
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Snapshot {
    pub fn tensor(&self, name: &str) -> Result<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, shape, data) in &self.tensors {
            let len: usize = shape.iter().product();
            if len != data.len() {
                return Err(Error::Shape(format!(
                    "tensor '{name}' has {} values but shape {:?}",
                    data.len(),
                    shape
                )));
            }
            tensors.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
            offset += len as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            rng_state: self.rng_state,
            tensors,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let payload_len: usize = self.tensors.iter().map(|(_, _, d)| d.len()).sum();
        let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + 4 * payload_len);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for (_, _, data) in &self.tensors {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let fail = |what: &str| Error::Config(format!("{}: {what}", path.display()));
        if bytes.len() < MAGIC.len() + 8 {
            return Err(fail("file too short for a checkpoint"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("bad magic, not a checkpoint file"));
        }
        let header_len =
            u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
        let header_start = MAGIC.len() + 8;
        let payload_start = header_start.checked_add(header_len).ok_or_else(|| fail("header length overflows"))?;
        if bytes.len() < payload_start {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])
            .map_err(|e| fail(&format!("header does not parse: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(fail(&format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &bytes[payload_start..];
        if payload.len() % 4 != 0 {
            return Err(fail("payload is not a whole number of f32 values"));
        }
        let n_values = payload.len() / 4;
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            if entry.offset != expected_offset {
                return Err(fail(&format!(
                    "tensor '{}' at offset {} but payload position is {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let len: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            if start + len > n_values {
                return Err(fail(&format!("tensor '{}' runs past the payload", entry.name)));
            }
            let data: Vec<f32> = (0..len)
                .map(|i| {
                    let b = 4 * (start + i);
                    f32::from_le_bytes(payload[b..b + 4].try_into().unwrap())
                })
                .collect();
            tensors.push((entry.name.clone(), entry.shape.clone(), data));
            expected_offset += len as u64;
        }
        if expected_offset != n_values as u64 {
            return Err(fail(&format!(
                "tensor table covers {expected_offset} values but payload holds {n_values}"
            )));
        }
        Ok(Snapshot { config: header.config, step: header.step, rng_state: header.rng_state, tensors })
    }
}
