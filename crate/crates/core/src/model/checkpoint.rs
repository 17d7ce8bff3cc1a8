//! Checkpoint file format (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "UNRFCKPT"
//! version      u32      1
//! config_len   u64      length of the JSON-encoded ModelConfig
//! config       config_len bytes
//! param_count  u64      total number of scalars
//! params       param_count × f64, layer order conv1..convC, deconv1..deconvD,
//!              weights then bias per layer, each tensor row-major
//! ```

use std::path::Path;

use super::{ModelConfig, Network};
use crate::error::{CheckpointError, Result};
use crate::fsutil;
use crate::nn::Tensor4;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNRFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(net: &Network) -> Vec<u8> {
    let config = serde_json::to_vec(net.config()).expect("model config serializes");
    let count = net.param_count();
    let mut out = Vec::with_capacity(28 + config.len() + 8 * count);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in net.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads sequential little-endian fields, reporting truncation against the
/// total length the header promised so far.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated {
                expected: self.pos as u64 + n as u64,
                found: self.bytes.len() as u64,
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or(CheckpointError::Header("parameter count overflows".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 8], version: u32) -> Result<(), CheckpointError> {
        let found = self
            .take(8)
            .map_err(|_| CheckpointError::Version("file too short to carry a format header".into()))?;
        if found != magic {
            return Err(CheckpointError::Version(format!(
                "bad magic bytes {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != version {
            return Err(CheckpointError::Version(format!(
                "format version {v}, this build reads {version}"
            )));
        }
        Ok(())
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Network, CheckpointError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let config_len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| CheckpointError::Header(format!("model config: {e}")))?;
    let shapes = config
        .layer_shapes()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let count = r.u64()? as usize;
    let expected: usize = shapes.iter().map(|s| s.param_count()).sum();
    if count != expected {
        return Err(CheckpointError::Shape(format!(
            "header declares {count} parameters, the embedded config needs {expected}"
        )));
    }
    let mut params = Vec::with_capacity(2 * shapes.len());
    for s in &shapes {
        for dims in [s.weight_dims(), s.bias_dims()] {
            let n = dims.iter().product();
            let values = r.f64s(n)?;
            params.push(Tensor4::new(dims, values).map_err(|e| CheckpointError::Shape(e.to_string()))?);
        }
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Shape(format!(
            "{} trailing bytes after the parameters",
            r.remaining()
        )));
    }
    Network::from_params(&config, params).map_err(|e| CheckpointError::Shape(e.to_string()))
}

/// Writes atomically: a temporary file in the target directory is renamed into place.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    fsutil::write_bytes_atomic(path, &checkpoint_bytes(net))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(checkpoint_from_bytes(&bytes)?)
}
