//! Binary model checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! b"BULN"  u32 version(=1)  u32 layer_count
//! layer_count x (u32 in, u32 out)
//! for each layer: out*in weights (row-major f64), then out biases (f64)
//! u32 provenance_len  provenance_len bytes of UTF-8 JSON
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Classifier, Dense};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BULN";
pub const VERSION: u32 = 1;

/// Where a saved model came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// `original` or an unlearning method name.
    pub method: String,
    pub seed: u64,
    /// Hex SHA-256 of the canonical experiment config.
    pub config_digest: String,
    pub num_classes: usize,
}

pub fn encode(model: &Classifier, provenance: &Provenance) -> Result<Vec<u8>> {
    if provenance.num_classes != model.num_classes() {
        return Err(Error::invalid(format!(
            "provenance records {} classes but the model has {}",
            provenance.num_classes,
            model.num_classes()
        )));
    }
    let mut out = Vec::with_capacity(16 + model.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(model.layers().len())?.to_le_bytes());
    for layer in model.layers() {
        out.extend_from_slice(&u32_of(layer.input_dim())?.to_le_bytes());
        out.extend_from_slice(&u32_of(layer.output_dim())?.to_le_bytes());
    }
    for layer in model.layers() {
        for v in layer.weights().iter().chain(layer.bias()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(provenance)?;
    out.extend_from_slice(&u32_of(json.len())?.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{n} does not fit in a u32 field")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "truncated: needed {n} bytes for {what}, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Classifier, Provenance)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let at = cur.pos;
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported version {version}"),
        });
    }
    let at = cur.pos;
    let count = cur.u32("layer count")? as usize;
    if count == 0 {
        return Err(Error::Format {
            offset: at,
            message: "checkpoint has no layers".into(),
        });
    }
    let mut dims = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let n_in = cur.u32(&format!("layer {i} input width"))? as usize;
        let n_out = cur.u32(&format!("layer {i} output width"))? as usize;
        dims.push((n_in, n_out));
    }
    let mut layers = Vec::with_capacity(count);
    for (i, &(n_in, n_out)) in dims.iter().enumerate() {
        let at = cur.pos;
        let n_w = n_in.checked_mul(n_out).ok_or_else(|| Error::Format {
            offset: at,
            message: format!("layer {i} size overflows"),
        })?;
        // Checked up front so that a huge declared size fails without allocating.
        if n_w.saturating_add(n_out).saturating_mul(8) > bytes.len() - cur.pos {
            return Err(Error::Format {
                offset: cur.pos,
                message: format!("truncated: layer {i} parameters exceed the remaining bytes"),
            });
        }
        let w = (0..n_w).map(|_| cur.f64("weight")).collect::<Result<Vec<_>>>()?;
        let b = (0..n_out).map(|_| cur.f64("bias")).collect::<Result<Vec<_>>>()?;
        let layer = Dense::new(Tensor::new(vec![n_out, n_in], w)?, Tensor::vector(b)).map_err(|e| Error::Format {
            offset: at,
            message: format!("layer {i}: {e}"),
        })?;
        layers.push(layer);
    }
    let at = cur.pos;
    let len = cur.u32("provenance length")? as usize;
    let json = cur.take(len, "provenance")?;
    let provenance: Provenance = serde_json::from_slice(json).map_err(|e| Error::Format {
        offset: at + 4,
        message: format!("provenance is not valid JSON: {e}"),
    })?;
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            message: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    let width = dims[dims.len() - 1].1;
    let k = provenance.num_classes;
    let expanded = width == k + 1;
    let model = Classifier::from_layers(layers, k, expanded).map_err(|e| Error::Format {
        offset: 12,
        message: e.to_string(),
    })?;
    Ok((model, provenance))
}

pub fn save_checkpoint(model: &Classifier, provenance: &Provenance, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, provenance)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Classifier, Provenance)> {
    decode(&std::fs::read(path)?)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("`{}` has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
