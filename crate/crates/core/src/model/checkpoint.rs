//! Binary checkpoint format. All integers and scalars are little-endian.
//!
//! ```text
//! magic        8 bytes   "QFORMER\0"
//! version      u32       1
//! config_len   u32
//! config       config_len bytes of JSON (ModelConfig)
//! count        u32       number of parameters
//! per parameter:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8        0 = f32, 1 = f64
//!   ndim       u32
//!   dims       ndim × u64
//!   data       Π dims scalars of `dtype`
//! ```
//!
//! Writers always emit `f64`; readers also accept `f32` payloads.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{Model, ModelConfig};
use crate::array::DenseArray;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QFORMER\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, value) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.fail("bad magic bytes"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(cfg_len, "config")?).map_err(|e| r.fail(format!("config JSON: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut params = IndexMap::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| r.fail("parameter name is not UTF-8"))?
            .to_string();
        let dtype = r.u8("dtype")?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| r.fail(format!("`{name}` has an overflowing shape")))?;
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(len.saturating_mul(8), "f64 data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => r
                .take(len.saturating_mul(4), "f32 data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(r.fail(format!("`{name}` has unknown dtype tag {other}"))),
        };
        let value = DenseArray::new(shape, data).map_err(|e| r.fail(format!("`{name}`: {e}")))?;
        if params.insert(name.clone(), value).is_some() {
            return Err(r.fail(format!("duplicate parameter `{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Model::from_parts(config, params)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    from_bytes(&buf, path)
}
