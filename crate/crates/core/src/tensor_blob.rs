//! The `.tnsr` container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header (`shape`, `channels`), then row-major little-endian
//! `f32` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OVLTNSR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    #[serde(default)]
    channels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    /// Optional names for the last axis.
    pub channels: Vec<String>,
    pub data: Vec<f32>,
}

impl TensorBlob {
    pub fn new(shape: Vec<usize>, channels: Vec<String>, data: Vec<f32>) -> Result<Self> {
        let blob = TensorBlob { shape, channels, data };
        blob.validate()?;
        Ok(blob)
    }

    fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {n} values but data has {}",
                self.shape,
                self.data.len()
            )));
        }
        if !self.channels.is_empty() && self.shape.last() != Some(&self.channels.len()) {
            return Err(Error::Shape(format!(
                "{} channel names for last extent {:?}",
                self.channels.len(),
                self.shape.last()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&Header { shape: self.shape.clone(), channels: self.channels.clone() })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("missing tensor magic".into());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..).ok_or("truncated header")?;
        if body.len() < hlen {
            return Err("truncated header".into());
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| format!("bad header: {e}"))?;
        let payload = &body[hlen..];
        if payload.len() % 4 != 0 {
            return Err("payload is not a whole number of f32 values".into());
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let blob = TensorBlob { shape: header.shape, channels: header.channels, data };
        blob.validate().map_err(|e| e.to_string())?;
        Ok(blob)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorBlob::from_bytes(&bytes).map_err(|reason| Error::malformed(path, reason))
    }

    /// Index of a named channel.
    pub fn channel(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }
}
