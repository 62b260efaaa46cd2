//! `KELAB1` tensor container.
//!
//! Layout: 8-byte magic `KELAB1\0\0`, 8-byte little-endian header length,
//! UTF-8 JSON header, then little-endian `f32` blobs in directory order.
//! Directory offsets are byte offsets relative to the start of the blob
//! section.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KELAB1\0\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// `checkpoint` or `coeff_stats`.
    pub kind: String,
    pub config: ModelConfig,
    pub step: u64,
    #[serde(default = "one")]
    pub attn_temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_instances: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

fn one() -> f64 {
    1.0
}

impl Header {
    pub fn new(kind: &str, config: ModelConfig, step: u64) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            step,
            attn_temperature: 1.0,
            n_instances: None,
            optimizer: None,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }
}

/// A decoded container: header plus one `f32` buffer per directory entry.
#[derive(Clone, Debug)]
pub struct Container {
    pub header: Header,
    pub blobs: Vec<Vec<f32>>,
}

impl Container {
    pub fn blob(&self, name: &str) -> Option<(&TensorEntry, &[f32])> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| (&self.header.tensors[i], self.blobs[i].as_slice()))
    }
}

/// Writes `header` (its directory is rebuilt) followed by `tensors`, narrowing to `f32`.
///
/// Data goes to a sibling temp file that is renamed into place on success.
pub fn write(
    path: &Path,
    mut header: Header,
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let mut offset = 0u64;
    header.tensors = tensors
        .iter()
        .map(|(name, shape, data)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            debug_assert_eq!(entry.numel(), data.len());
            offset += 4 * data.len() as u64;
            entry
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, data) in tensors {
            for &x in data.iter() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CorruptHeader("bad magic, not a KELAB1 file".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16u64
        .checked_add(header_len)
        .ok_or_else(|| Error::CorruptHeader("header length overflows".into()))?;
    if header_end > bytes.len() as u64 {
        return Err(Error::Truncated {
            expected: header_end,
            found: bytes.len() as u64,
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end as usize])
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let blob = &bytes[header_end as usize..];
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(Error::CorruptHeader(format!(
                "tensor `{}` at offset {} but directory order implies {}",
                entry.name, entry.offset, expected_offset
            )));
        }
        expected_offset += 4 * entry.numel() as u64;
    }
    if (blob.len() as u64) < expected_offset {
        return Err(Error::Truncated {
            expected: expected_offset,
            found: blob.len() as u64,
        });
    }
    if (blob.len() as u64) > expected_offset {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after tensor data",
            blob.len() as u64 - expected_offset
        )));
    }
    let blobs = header
        .tensors
        .iter()
        .map(|e| {
            let start = e.offset as usize;
            blob[start..start + 4 * e.numel()]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        })
        .collect();
    Ok(Container { header, blobs })
}
