//! Binary checkpoint format.
//!
//! ```text
//! "TBRG" | version: u32 LE | entry count: u32 LE
//! per entry: name len u16 | UTF-8 name | dtype u8 (0 = f64) | rank u8
//!            | dims u32 LE * rank | payload f64 LE, row-major
//! ```
//!
//! Entries are written in name order. Adam moments are stored as
//! `opt.m.<param>` / `opt.v.<param>` and the step counter as `opt.step`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{AdamState, DenseArray, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TBRG";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const OPT_PREFIX: &str = "opt.";

pub fn encode(store: &ParamStore, opt: &AdamState) -> Result<Vec<u8>> {
    let mut entries: BTreeMap<String, DenseArray> = BTreeMap::new();
    for (name, value) in store.iter() {
        if name.starts_with(OPT_PREFIX) {
            return Err(Error::Checkpoint(format!("parameter name `{name}` uses reserved prefix")));
        }
        entries.insert(name.to_string(), value.clone());
    }
    for (name, m) in &opt.first {
        entries.insert(format!("opt.m.{name}"), DenseArray::from_raw(vec![m.len()], m.clone()));
    }
    for (name, v) in &opt.second {
        entries.insert(format!("opt.v.{name}"), DenseArray::from_raw(vec![v.len()], v.clone()));
    }
    entries.insert("opt.step".into(), DenseArray::scalar(opt.step as f64));

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, value) in &entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.push(value.rank() as u8);
        for &d in value.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, AdamState)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    let mut opt = AdamState::default();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("unsupported dtype {dtype} for `{name}`")));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let value = DenseArray::new(dims, data)?;
        if let Some(p) = name.strip_prefix("opt.m.") {
            opt.first.insert(p.to_string(), value.into_data());
        } else if let Some(p) = name.strip_prefix("opt.v.") {
            opt.second.insert(p.to_string(), value.into_data());
        } else if name == "opt.step" {
            opt.step = value.item() as u64;
        } else if name.starts_with(OPT_PREFIX) {
            return Err(Error::Checkpoint(format!("unknown optimizer entry `{name}`")));
        } else {
            store.insert(name, value)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((store, opt))
}

pub fn save(path: &Path, store: &ParamStore, opt: &AdamState) -> Result<()> {
    let bytes = encode(store, opt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, AdamState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
