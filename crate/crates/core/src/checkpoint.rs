//! Binary checkpoint container.
//!
//! Layout: magic `SQCK`, format version (u32 LE), manifest byte length
//! (u32 LE), the UTF-8 manifest, then the concatenated little-endian
//! payloads. Each manifest line reads `name shape dtype offset`, with the
//! shape written as `AxBxC` and the offset counted from the payload start.

use std::path::Path;

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SQCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
            Payload::U64 { .. } => "u64",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Payload::F32(t) => t.shape(),
            Payload::F64(t) => t.shape(),
            Payload::U64 { shape, .. } => shape,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            Payload::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
            Payload::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            "f32" => Payload::F32(t.cast()),
            _ => Payload::F64(t.cast()),
        }
    }

    /// Converts a floating payload to `T`. Integer payloads are rejected.
    pub fn to_tensor<T: Real>(&self) -> Option<Tensor<T>> {
        match self {
            Payload::F32(t) => Some(t.cast()),
            Payload::F64(t) => Some(t.cast()),
            Payload::U64 { .. } => None,
        }
    }
}

/// Ordered list of named payloads.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Payload)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, payload: Payload) {
        self.entries.push((name.into(), payload));
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut manifest = String::new();
        for (name, p) in &self.entries {
            let shape = p
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!("{} {} {} {}\n", name, shape, p.dtype(), payload.len()));
            p.write(&mut payload);
        }
        let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err("missing SQCK magic".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < mlen {
            return Err(format!("manifest needs {mlen} bytes, file has {}", body.len()));
        }
        let manifest =
            std::str::from_utf8(&body[..mlen]).map_err(|e| format!("manifest is not UTF-8: {e}"))?;
        let payload = &body[mlen..];
        let mut entries = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let fields: Vec<&str> = line.split(' ').collect();
            let [name, shape, dtype, offset] = fields[..] else {
                return Err(format!("manifest line {}: expected 4 fields", lineno + 1));
            };
            let shape: Vec<usize> = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("tensor {name}: bad shape: {e}"))?
            };
            let offset: usize = offset
                .parse()
                .map_err(|e| format!("tensor {name}: bad offset: {e}"))?;
            let count: usize = shape.iter().product();
            let width = match dtype {
                "f32" => 4,
                "f64" | "u64" => 8,
                other => return Err(format!("tensor {name}: unknown dtype {other}")),
            };
            let end = offset + count * width;
            if end > payload.len() {
                return Err(format!(
                    "tensor {name}: payload truncated (needs bytes up to {end}, have {})",
                    payload.len()
                ));
            }
            let raw = &payload[offset..end];
            let p = match dtype {
                "f32" => Payload::F32(
                    Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect())
                        .map_err(|e| format!("tensor {name}: {e}"))?,
                ),
                "f64" => Payload::F64(
                    Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect())
                        .map_err(|e| format!("tensor {name}: {e}"))?,
                ),
                _ => Payload::U64 {
                    shape,
                    data: raw
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
            };
            entries.push((name.to_string(), p));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|detail| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        })
    }
}
