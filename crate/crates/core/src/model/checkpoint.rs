//! Single-file checkpoint archive.
//!
//! Layout, all integers little-endian:
//! `MAGIC`, `u32` format version, `u32` config length, config JSON,
//! `u32` array count, then per array: `u32` name length, name,
//! `u32` rank, `u64` dims, `f32` values in row-major order.

use std::path::Path;

use super::{Model, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RCMPCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let w = model.weights();
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    for (name, t) in w.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated archive")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<(ModelConfig, Weights<f32>), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| format!("bad config: {e}"))?;
    let count = r.u32()?;
    let mut weights = Weights::default();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "weight name is not UTF-8")?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("weight size overflows")?;
        let raw = r.take(n.checked_mul(4).ok_or("weight size overflows")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if weights.position(&name).is_some() {
            return Err(format!("duplicate weight {name}"));
        }
        weights.insert(name, Tensor::new(shape, data));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after the last weight".into());
    }
    Ok((config, weights))
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Model> {
    let (config, weights) = parse(bytes).map_err(|detail| Error::Format { path: origin.to_path_buf(), detail })?;
    Model::from_weights(config, weights)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::util::create_dir(dir)?;
    }
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io("writing checkpoint", path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io("reading checkpoint", path, e))?;
    from_bytes(&bytes, path)
}
