//! Named-tensor payloads: a JSON manifest (name, shape, byte offset) and a flat
//! little-endian `f64` stream. Used for checkpoints, golden files and the wire.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::AdapterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub total_bytes: usize,
    pub tensors: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|e| e.name.as_str())
    }
}

pub fn encode<'a, I>(tensors: I) -> (Manifest, Vec<u8>)
where
    I: IntoIterator<Item = (String, &'a Tensor)>,
{
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        dtype: DTYPE.to_string(),
        total_bytes: payload.len(),
        tensors: entries,
    };
    (manifest, payload)
}

pub fn decode(manifest: &Manifest, payload: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if manifest.dtype != DTYPE {
        return Err(Error::Payload(format!("unsupported dtype {}", manifest.dtype)));
    }
    if manifest.total_bytes != payload.len() {
        return Err(Error::Payload(format!(
            "manifest declares {} bytes, payload has {}",
            manifest.total_bytes,
            payload.len()
        )));
    }
    manifest
        .tensors
        .iter()
        .map(|e| {
            let len: usize = e.shape.iter().product();
            let end = e.offset + len * 8;
            let bytes = payload.get(e.offset..end).ok_or_else(|| {
                Error::Payload(format!("tensor {} overruns payload", e.name))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect()
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn write_files(stem: &Path, manifest: &Manifest, payload: &[u8]) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let (json, bin) = paths(stem);
    fs::write(json, serde_json::to_string_pretty(manifest)?)?;
    fs::write(bin, payload)?;
    Ok(())
}

pub fn read_files(stem: &Path) -> Result<(Manifest, Vec<u8>)> {
    let (json, bin) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(json)?)?;
    let payload = fs::read(bin)?;
    Ok((manifest, payload))
}

impl AdapterSet {
    pub fn encode(&self, prefix: &str) -> (Manifest, Vec<u8>) {
        encode(self.named(prefix))
    }

    /// Overwrites every tensor of this set from a payload produced by [`AdapterSet::encode`].
    pub fn load(&mut self, prefix: &str, manifest: &Manifest, payload: &[u8]) -> Result<()> {
        let decoded = decode(manifest, payload)?;
        let mut slots = self.named_mut(prefix);
        if decoded.len() != slots.len() {
            return Err(Error::Payload(format!(
                "expected {} tensors, got {}",
                slots.len(),
                decoded.len()
            )));
        }
        for ((name, slot), (got_name, t)) in slots.iter_mut().zip(decoded) {
            if *name != got_name || slot.shape() != t.shape() {
                return Err(Error::Payload(format!(
                    "expected {name} {:?}, got {got_name} {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
