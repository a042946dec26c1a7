//! Checkpoint files: a text header with the model configuration, then one
//! binary block per parameter.
//!
//! ```text
//! IHD-CHECKPOINT 1
//! resolution: 32
//! ...
//! end
//! <u32 name length><name bytes><u32 rank><u64 dims...><f64 values...>   (per parameter, little-endian)
//! ```

use std::fs;
use std::path::Path;

use ihd_autodiff::DenseArray;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const CHECKPOINT_MAGIC: &str = "IHD-CHECKPOINT 1";

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(model.config().to_kv().as_bytes());
    out.extend_from_slice(b"end\n");
    for (name, value) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::parse(self.path, 0, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let len = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(self.path, 0, "unterminated header"))?;
        let line = std::str::from_utf8(&rest[..len]).map_err(|_| Error::parse(self.path, 0, "header is not UTF-8"))?;
        self.pos += len + 1;
        Ok(line)
    }
}

/// Rebuilds a model from checkpoint bytes, checking every parameter's name
/// and shape against the configuration in the header.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.line()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, 1, format!("not a checkpoint (header `{magic}`)")));
    }
    let mut header = String::new();
    loop {
        let line = r.line()?;
        if line == "end" {
            break;
        }
        header.push_str(line);
        header.push('\n');
    }
    let kv = KeyValues::parse(&header, path)?;
    let config = ModelConfig::from_kv(&kv, &ModelConfig::tiny())?;
    let mut model = Model::new(config)?;
    let mut seen = vec![false; model.params.len()];
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::parse(path, 0, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Structure(format!("{}: unexpected parameter `{name}`", path.display())))?;
        if model.params.value(id).shape() != shape.as_slice() {
            return Err(Error::Structure(format!(
                "{}: parameter `{name}` has shape {shape:?}, expected {:?}",
                path.display(),
                model.params.value(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.params.set(id, DenseArray::new(shape, data)?)?;
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::Structure(format!("{}: duplicate parameter `{name}`", path.display())));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Structure(format!(
            "{}: missing parameter `{}`",
            path.display(),
            model.params.name(missing)
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
