//! Binary parameter files plus a `key=value` config companion.
//!
//! Layout, all little-endian: `b"TDM1"`, `u32` parameter count, then per
//! parameter `u16` name length, UTF-8 name, `u8` rank, `u32` extents, `f32`
//! values.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ModelConfig, TdamModel};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDM1";

pub fn encode_checkpoint(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + params.scalar_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Validation(format!("parameter name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format("bad magic, expected TDM1".into()));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| format(format!("{name}: {e}")))?;
        store.insert(name, value)?;
    }
    if r.pos != bytes.len() {
        return Err(format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

/// `model.tdm` → `model.cfg`.
pub fn config_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

/// Writes the parameters to `path` and the config next to it.
pub fn save_checkpoint(model: &TdamModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(&model.params)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let cfg = config_path_for(path);
    fs::write(&cfg, model.config.to_kv_text())
        .map_err(|e| Error::io(format!("writing {}", cfg.display()), e))
}

/// Reads a checkpoint and its config, checking that every parameter the
/// config needs is present with the right shape.
pub fn load_checkpoint(path: &Path) -> Result<TdamModel> {
    let cfg_path = config_path_for(path);
    let text = fs::read_to_string(&cfg_path)
        .map_err(|e| Error::io(format!("reading {}", cfg_path.display()), e))?;
    let config = ModelConfig::from_kv_text(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let params = decode_checkpoint(&bytes, path)?;
    let expected = TdamModel::expected_params(&config);
    if expected.len() != params.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("config needs {} parameters, file has {}", expected.len(), params.len()),
        });
    }
    for (name, shape) in &expected {
        match params.by_name(name) {
            Some(p) if p.value.shape() == shape.as_slice() => {}
            Some(p) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("{name}: shape {:?}, config needs {shape:?}", p.value.shape()),
                })
            }
            None => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("missing parameter {name}"),
                })
            }
        }
    }
    Ok(TdamModel { config, params })
}
