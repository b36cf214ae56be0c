//! Named-parameter checkpoint container.
//!
//! Layout: one ASCII header line
//! `CMCKPT1 {"fingerprint":"<hex>","params":<n>}\n`, then `n` entries of
//! `u32 name_len | name (UTF-8) | u32 ndim | ndim x u64 extents |
//! product(extents) x f64`, all little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelState;
use crate::tensor::Tensor;

const MAGIC: &str = "CMCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    params: usize,
}

pub fn encode(state: &ModelState, fingerprint: &str) -> Vec<u8> {
    let header = Header {
        fingerprint: fingerprint.to_string(),
        params: state.len(),
    };
    let mut out = format!("{MAGIC} {}\n", serde_json::to_string(&header).expect("header serializes")).into_bytes();
    for id in state.ids() {
        let p = state.get(id);
        out.extend((p.name.len() as u32).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.extend((p.value.shape().len() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend((e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

/// Decoded checkpoint: its fingerprint and parameters in file order.
pub struct Checkpoint {
    pub fingerprint: String,
    pub state: ModelState,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated checkpoint: need {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Format {
        offset: 0,
        message: "missing checkpoint header line".into(),
    })?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format {
        offset: 0,
        message: "header is not UTF-8".into(),
    })?;
    let json = line.strip_prefix(MAGIC).and_then(|r| r.strip_prefix(' ')).ok_or(Error::Format {
        offset: 0,
        message: format!("bad magic, expected {MAGIC}"),
    })?;
    let header: Header = serde_json::from_str(json).map_err(|e| Error::Format {
        offset: MAGIC.len() + 1,
        message: format!("bad header: {e}"),
    })?;

    let mut cur = Cursor { bytes, pos: nl + 1 };
    let mut state = ModelState::new();
    for _ in 0..header.params {
        let name_len = cur.u32()? as usize;
        let at = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let at = cur.pos;
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: at,
            message: e.to_string(),
        })?;
        if state.id(&name).is_some() {
            return Err(Error::Format {
                offset: at,
                message: format!("duplicate parameter {name}"),
            });
        }
        state.add(name, value);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            message: "trailing bytes after last parameter".into(),
        });
    }
    Ok(Checkpoint {
        fingerprint: header.fingerprint,
        state,
    })
}

pub fn save(path: &Path, state: &ModelState, fingerprint: &str) -> Result<()> {
    fs::write(path, encode(state, fingerprint)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
