//! `VSWF` snippet-feature files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"VSWF" | u32 version (=1) | u32 crops | u32 snippets | u32 dim
//! crops * snippets * dim f32 values, row-major (crop, snippet, feature)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"VSWF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// Raw contents of a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub crops: usize,
    pub snippets: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn new(crops: usize, snippets: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if crops == 0 || snippets == 0 || dim == 0 {
            return Err(Error::shape("feature file", format!("zero dimension in {crops}x{snippets}x{dim}")));
        }
        if data.len() != crops * snippets * dim {
            return Err(Error::shape(
                "feature file",
                format!("{crops}x{snippets}x{dim} needs {} values, got {}", crops * snippets * dim, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature file", "features must be finite"));
        }
        Ok(Self {
            crops,
            snippets,
            dim,
            data,
        })
    }

    /// Narrows a `crops x T x D` tensor to `f32`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[c, s, d] = t.shape() else {
            return Err(Error::shape("feature file", format!("expected crops x T x D, got {:?}", t.shape())));
        };
        Self::new(c, s, d, t.data().iter().map(|&v| v as f32).collect())
    }

    /// Widens to a `crops x T x D` `f64` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.crops, self.snippets, self.dim],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated dimensions")
    }

    pub fn payload_len(&self) -> usize {
        self.data.len() * 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload_len());
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, self.crops as u32, self.snippets as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses file bytes; `path` is only used in error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: String| Error::Truncated {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 4 {
            return Err(truncated(format!("{} bytes, no magic", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let (crops, snippets, dim) = (word(1) as usize, word(2) as usize, word(3) as usize);
        if crops == 0 || snippets == 0 || dim == 0 {
            return Err(Error::SizeMismatch {
                path: path.to_path_buf(),
                detail: format!("zero dimension in header {crops}x{snippets}x{dim}"),
            });
        }
        let expected = crops
            .checked_mul(snippets)
            .and_then(|n| n.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::SizeMismatch {
                path: path.to_path_buf(),
                detail: format!("header {crops}x{snippets}x{dim} overflows"),
            })?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(truncated(format!("payload has {} bytes, header implies {expected}", payload.len())));
        }
        if payload.len() > expected {
            return Err(Error::SizeMismatch {
                path: path.to_path_buf(),
                detail: format!("payload has {} bytes, header implies {expected}", payload.len()),
            });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::SizeMismatch {
                path: path.to_path_buf(),
                detail: "payload contains non-finite values".into(),
            });
        }
        Ok(Self {
            crops,
            snippets,
            dim,
            data,
        })
    }
}

pub fn write_feature_file(path: impl AsRef<Path>, features: &FeatureFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, features.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::decode(&bytes, path)
}
