//! Binary map container.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "DIXM"
//! 4       2         version (u16 LE), currently 1
//! 6       4         height (u32 LE)
//! 10      4         width (u32 LE)
//! 14      4*h*w     values, f32 LE, row-major
//! ...     4         digest length n (u32 LE)
//! ...     n         provenance digest, UTF-8
//! ```

use std::path::Path;

use crate::attribution::{ExplanationMap, Grid};
use crate::error::{DixError, Result};

pub const MAGIC: &[u8; 4] = b"DIXM";
pub const VERSION: u16 = 1;
const HEADER: usize = 14;

/// Contents of a map file: the grid at f32 precision and the provenance digest.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub digest: String,
}

impl StoredMap {
    pub fn from_map(map: &ExplanationMap) -> Self {
        StoredMap {
            height: map.grid.height,
            width: map.grid.width,
            values: map.values().iter().map(|&v| v as f32).collect(),
            digest: map.provenance_digest(),
        }
    }

    pub fn grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.values.len() + 4 + self.digest.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.digest.len() as u32).to_le_bytes());
        out.extend_from_slice(self.digest.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let need = |offset: usize, len: usize, what: &str| -> Result<()> {
            if bytes.len() < offset + len {
                return Err(DixError::Format {
                    offset,
                    detail: format!(
                        "truncated {what}: expected {len} bytes, found {}",
                        bytes.len().saturating_sub(offset)
                    ),
                });
            }
            Ok(())
        };
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        need(0, 4, "magic")?;
        if &bytes[..4] != MAGIC {
            return Err(DixError::Format {
                offset: 0,
                detail: format!("bad magic {:?}, expected \"DIXM\"", String::from_utf8_lossy(&bytes[..4])),
            });
        }
        need(4, 2, "version")?;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(DixError::Format {
                offset: 4,
                detail: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        need(6, 8, "dimensions")?;
        let (height, width) = (u32_at(6), u32_at(10));
        let payload = 4 * height * width;
        need(HEADER, payload, "payload")?;
        let values = bytes[HEADER..HEADER + payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let footer = HEADER + payload;
        need(footer, 4, "digest length")?;
        let n = u32_at(footer);
        need(footer + 4, n, "digest")?;
        let digest = std::str::from_utf8(&bytes[footer + 4..footer + 4 + n])
            .map_err(|e| DixError::Format {
                offset: footer + 4 + e.valid_up_to(),
                detail: "digest is not UTF-8".into(),
            })?
            .to_string();
        if bytes.len() != footer + 4 + n {
            return Err(DixError::Format {
                offset: footer + 4 + n,
                detail: format!("{} trailing bytes", bytes.len() - footer - 4 - n),
            });
        }
        Ok(StoredMap {
            height,
            width,
            values,
            digest,
        })
    }
}

pub fn write_map(path: &Path, map: &ExplanationMap) -> Result<()> {
    std::fs::write(path, StoredMap::from_map(map).encode())?;
    Ok(())
}

pub fn read_map(path: &Path) -> Result<StoredMap> {
    StoredMap::decode(&std::fs::read(path)?)
}
