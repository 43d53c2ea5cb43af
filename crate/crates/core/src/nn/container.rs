//! `DSEM` model container: magic, version, JSON header, named `f32` blobs.

use serde_json::Value;

use crate::error::{DseError, Result};

use super::params::{Param, ParamStore};

const MAGIC: &[u8; 4] = b"DSEM";
pub const CONTAINER_VERSION: u32 = 1;

/// A decoded container: the JSON header and the parameter blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub header: Value,
    pub params: ParamStore,
}

/// Layout (all integers u32 little-endian):
/// `DSEM`, version, header length, header JSON, parameter count, then per
/// parameter: name length, UTF-8 name, rank, dims…, `f32` values.
pub fn write_container(header: &Value, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CONTAINER_VERSION);
    let json = serde_json::to_vec(header).expect("JSON value serializes");
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    put_u32(&mut out, params.len() as u32);
    for p in params.params() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.dims.len() as u32);
        for &d in &p.dims {
            put_u32(&mut out, d as u32);
        }
        for &v in &p.value {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_container(bytes: &[u8]) -> Result<ModelContainer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DseError::format("bad model magic"));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(DseError::format(format!("unsupported model container version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Value = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| DseError::format(format!("model header: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| DseError::format("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(4 * n)?;
        let value = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push_raw(Param { name, dims, value });
    }
    if r.pos != bytes.len() {
        return Err(DseError::format("trailing bytes after model parameters"));
    }
    Ok(ModelContainer { header, params })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DseError::format("truncated model container")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
