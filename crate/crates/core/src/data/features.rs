//! `O2NAFEAT` feature files.
//!
//! Header: magic `O2NAFEAT`, then little-endian `u32` version, video count,
//! rows per video and row width; then `videos·rows·dim` little-endian `f32`s.
//! Rows `0..N` of a video are image features and rows `N..2N` motion features.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"O2NAFEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_BYTES: usize = 8 + 4 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub rows: usize,
    pub dim: usize,
    data: Vec<f32>,
}

impl FeatureSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0
            || dim == 0
            || !rows.is_multiple_of(2)
            || !data.len().is_multiple_of(rows * dim)
        {
            return Err(Error::Data(format!(
                "{} values do not form videos of {rows}x{dim} (rows must be 2N)",
                data.len()
            )));
        }
        Ok(FeatureSet { rows, dim, data })
    }

    pub fn videos(&self) -> usize {
        self.data.len() / (self.rows * self.dim)
    }

    /// Key frames per video (`rows / 2`).
    pub fn frames(&self) -> usize {
        self.rows / 2
    }

    pub fn video(&self, i: usize) -> &[f32] {
        let n = self.rows * self.dim;
        &self.data[i * n..(i + 1) * n]
    }

    /// Image rows of video `i`, widened.
    pub fn image(&self, i: usize) -> Vec<f64> {
        let half = self.frames() * self.dim;
        self.video(i)[..half]
            .iter()
            .map(|&v| f64::from(v))
            .collect()
    }

    /// Motion rows of video `i`, widened.
    pub fn motion(&self, i: usize) -> Vec<f64> {
        let half = self.frames() * self.dim;
        self.video(i)[half..]
            .iter()
            .map(|&v| f64::from(v))
            .collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Keeps videos `range`, in order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> FeatureSet {
        let n = self.rows * self.dim;
        FeatureSet {
            rows: self.rows,
            dim: self.dim,
            data: self.data[range.start * n..range.end * n].to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [
            FEATURE_VERSION,
            self.videos() as u32,
            self.rows as u32,
            self.dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_BYTES {
            return Err(Error::Format {
                offset: buf.len() as u64,
                msg: format!("truncated header: {} of {HEADER_BYTES} bytes", buf.len()),
            });
        }
        if &buf[..8] != FEATURE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected O2NAFEAT".into(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let (version, videos, rows, dim) = (
            word(0),
            word(1) as usize,
            word(2) as usize,
            word(3) as usize,
        );
        if version != FEATURE_VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported version {version}"),
            });
        }
        let expected = HEADER_BYTES + videos * rows * dim * 4;
        if buf.len() != expected {
            return Err(Error::Format {
                offset: buf.len() as u64,
                msg: format!(
                    "expected {expected} bytes for {videos}x{rows}x{dim}, found {}",
                    buf.len()
                ),
            });
        }
        let data = buf[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureSet::new(rows, dim, data)
    }
}

pub fn save_features(path: impl AsRef<Path>, features: &FeatureSet) -> Result<()> {
    fs::write(path.as_ref(), features.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let buf = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    FeatureSet::decode(&buf)
}
