//! RAIF: a little-endian container for per-patch feature maps.
//!
//! Layout: `b"RAIF"`, version `u16 = 1`, rows `u16`, cols `u16`, dim `u32`,
//! then `rows * cols * dim` `f32` values, patch-major over a row-major grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::ensure_parent;

pub const MAGIC: &[u8; 4] = b"RAIF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct RaifBlob {
    pub rows: u16,
    pub cols: u16,
    pub dim: u32,
    pub data: Vec<f32>,
}

impl RaifBlob {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let rows16 = u16::try_from(rows).map_err(|_| Error::CorruptPayload(format!("rows {rows} exceed u16")))?;
        let cols16 = u16::try_from(cols).map_err(|_| Error::CorruptPayload(format!("cols {cols} exceed u16")))?;
        let dim32 = u32::try_from(dim).map_err(|_| Error::CorruptPayload(format!("dim {dim} exceeds u32")))?;
        if data.len() != rows * cols * dim {
            return Err(Error::CorruptPayload(format!(
                "{} values for a {rows}x{cols}x{dim} map",
                data.len()
            )));
        }
        Ok(Self {
            rows: rows16,
            cols: cols16,
            dim: dim32,
            data,
        })
    }

    pub fn vector_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptPayload(format!("header truncated at {} bytes", bytes.len())));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let rows = u16_at(6);
        let cols = u16_at(8);
        let dim = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]);
        let count = rows as usize * cols as usize * dim as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != count * 4 {
            return Err(Error::CorruptPayload(format!(
                "expected {} payload bytes for {rows}x{cols}x{dim}, found {}",
                count * 4,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            rows,
            cols,
            dim,
            data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ensure_parent(path)?;
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Optional `<name>.raif.json` written next to a feature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub image_id: String,
    pub provider: String,
    pub patch_size: u32,
}

pub fn sidecar_path(raif: &Path) -> std::path::PathBuf {
    let mut name = raif.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

pub fn read_sidecar(raif: &Path) -> Result<Option<Sidecar>> {
    let path = sidecar_path(raif);
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn write_sidecar(raif: &Path, sidecar: &Sidecar) -> Result<()> {
    let path = sidecar_path(raif);
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::json("sidecar", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
