//! Model checkpoint files.
//!
//! Layout, byte for byte:
//!
//! ```text
//! SOFTPIVOT-CHECKPOINT 1\n
//! <key>=<value>\n            one line per config field, fixed order
//! tensors=<count>\n
//! then <count> records:
//!   u32 LE   name length in bytes
//!   [u8]     name, UTF-8
//!   u32 LE   number of dimensions
//!   u64 LE   each dimension
//!   f64 LE   every value, row-major
//! ```

use std::fs;
use std::path::Path;

use super::config::TransformerConfig;
use super::model::TransformerModel;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "SOFTPIVOT-CHECKPOINT 1";

pub fn to_bytes(model: &TransformerModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    for (k, v) in model.config().to_kv() {
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    out.extend_from_slice(format!("tensors={}\n", model.params().len()).as_bytes());
    for (name, t) in model.names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("byte {}: {}", self.pos, msg.into()),
        }
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unterminated header"))?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| self.err("header is not UTF-8"))?;
        self.pos += end + 1;
        Ok(s)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated tensor data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
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

pub fn from_bytes(buf: &[u8], path: &str) -> Result<TransformerModel> {
    let mut r = Reader {
        buf,
        pos: 0,
        path: path.to_string(),
    };
    if r.line()? != MAGIC {
        return Err(r.err("not a checkpoint (bad magic line)"));
    }
    let mut config = TransformerConfig::default();
    let count = loop {
        let line = r.line()?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| r.err(format!("bad header line {line:?}")))?;
        if k == "tensors" {
            break v.parse::<usize>().map_err(|_| r.err("bad tensor count"))?;
        }
        config.set_kv(k, v)?;
    };
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.err("tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last tensor"));
    }
    TransformerModel::from_named(config, tensors)
}

pub fn save(model: &TransformerModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TransformerModel> {
    let buf = fs::read(path)?;
    from_bytes(&buf, &path.display().to_string())
}
