//! Binary checkpoint format: versioned, little-endian, guarded by a hash of
//! the model-defining config sections.
//!
//! Layout: magic `FDCP`, version u32, config hash u64, parameter count u32,
//! then per parameter: name length u32 + UTF-8 name, order u32, extents
//! u32 each, raw f32 payload.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FDCP";
const VERSION: u32 = 1;

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.cfg.model_hash().to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads parameter values into an existing model. The file's config hash
/// must match the model's unless `cfg.checkpoint_allow_mismatch` is set.
/// Every stored parameter must exist with a matching shape, and every model
/// parameter must be covered.
pub fn load(model: &mut Model, cfg: &Config, path: &Path) -> Result<()> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let hash = r.u64()?;
    if hash != cfg.model_hash() && !cfg.checkpoint_allow_mismatch {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {hash:#018x}, config {:#018x} \
             (set checkpoint.allow_mismatch=true to override)",
            cfg.model_hash()
        )));
    }
    let count = r.u32()? as usize;

    let mut seen = vec![false; model.params.len()];
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))?;
        let order = r.u32()? as usize;
        let mut shape = Vec::with_capacity(order);
        for _ in 0..order {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let id = model.params.find(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter '{name}' not in model"))
        })?;
        let param = model.params.get_mut(id);
        if param.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' shape {shape:?} does not match model {:?}",
                param.value.shape()
            )));
        }
        for (i, v) in param.value.data_mut().iter_mut().enumerate() {
            *v = f32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap());
        }
        seen[id.0] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not cover parameter '{}'",
            model.params.iter().nth(missing).unwrap().name
        )));
    }
    Ok(())
}
