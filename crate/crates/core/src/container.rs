//! NSTW binary tensor container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"NSTWGT01" | u64 manifest length | UTF-8 JSON manifest | raw tensor data
//! ```
//!
//! The manifest is a JSON array of `{name, dtype, shape, offset, nbytes}`
//! records. Offsets are relative to the first byte after the manifest. Only
//! `f32` payloads are supported.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NSTWGT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of named `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "tensor `{name}`: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Duplicate(name));
        }
        self.tensors.push(NamedTensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Like [`Container::get`] but reports a missing tensor as an incomplete container.
    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::IncompleteContainer(name.to_string()))
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let manifest: Vec<ManifestEntry> = self
            .tensors
            .iter()
            .map(|t| {
                let nbytes = (t.data.len() * 4) as u64;
                let entry = ManifestEntry {
                    name: t.name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                entry
            })
            .collect();
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::UnrecognizedContainer("bad magic or version".into()));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::UnrecognizedContainer("manifest length exceeds file".into()))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::UnrecognizedContainer(format!("manifest: {e}")))?;
        let payload = &bytes[data_start..];

        let mut container = Container::new();
        for entry in manifest {
            if entry.dtype != "f32" {
                return Err(Error::UnrecognizedContainer(format!(
                    "tensor `{}` has unsupported dtype `{}`",
                    entry.name, entry.dtype
                )));
            }
            let count: usize = entry.shape.iter().product();
            if entry.nbytes != (count * 4) as u64 {
                return Err(Error::UnrecognizedContainer(format!(
                    "tensor `{}`: nbytes {} inconsistent with shape {:?}",
                    entry.name, entry.nbytes, entry.shape
                )));
            }
            let start = entry.offset as usize;
            let end = start
                .checked_add(entry.nbytes as usize)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    Error::UnrecognizedContainer(format!("tensor `{}` runs past end of file", entry.name))
                })?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            container.push(entry.name, entry.shape, data).map_err(|e| match e {
                Error::Duplicate(n) => Error::UnrecognizedContainer(format!("duplicate tensor `{n}`")),
                other => other,
            })?;
        }
        Ok(container)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .and_then(|_| file.sync_all())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
