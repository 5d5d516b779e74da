//! `O2NACKPT` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "O2NACKPT"  u32 version
//! repeated:   u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f64 data[prod(dims)]
//! ```
//!
//! Free-form text (the effective run configuration) travels as an ordinary
//! record named [`META_RECORD`] holding one byte per value.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"O2NACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const META_RECORD: &str = "meta.config";

pub fn encode_checkpoint(store: &ParamStore, meta: Option<&str>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut record = |name: &str, t: &Tensor| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    if let Some(text) = meta {
        let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
        let t = Tensor::new(&[bytes.len()], bytes).expect("rank-1");
        record(META_RECORD, &t);
    }
    for (name, t) in store.iter() {
        record(name, t);
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint into its parameters and optional embedded text.
pub fn decode_checkpoint(buf: &[u8]) -> Result<(ParamStore, Option<String>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected O2NACKPT".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 8,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut store = ParamStore::new();
    let mut meta = None;
    while r.pos < buf.len() {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Format {
                offset: at,
                msg: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let bytes = r.take(n * 8, "tensor data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data)?;
        if name == META_RECORD {
            let text: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
            meta = Some(String::from_utf8(text).map_err(|e| Error::Format {
                offset: at,
                msg: format!("meta record is not UTF-8: {e}"),
            })?);
        } else {
            store.insert(name, t).map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?;
        }
    }
    Ok((store, meta))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    meta: Option<&str>,
) -> Result<()> {
    fs::write(path.as_ref(), encode_checkpoint(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, Option<String>)> {
    let buf = fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
