//! IDX container reader (the MNIST file format), raw or gzip-compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad IDX magic 0x{found:08x} at offset {offset}: {reason}")]
    BadMagic { found: u32, offset: usize, reason: &'static str },

    #[error("truncated IDX data: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("IDX dimensions {dims:?} overflow the addressable size")]
    DimensionOverflow { dims: Vec<u32> },

    #[error("corrupt gzip stream: {0}")]
    Gzip(String),

    #[error("SHA-256 mismatch for {name}: expected {expected}, computed {computed}")]
    Checksum { name: String, expected: String, computed: String },
}

/// Unsigned-byte tensor read from an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Stack of 8-bit grayscale images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl ImageSet {
    pub fn new(n: usize, rows: usize, cols: usize, pixels: Vec<u8>) -> Result<Self> {
        if n * rows * cols != pixels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{n} images of {rows}x{cols} need {} pixels, got {}",
                n * rows * cols,
                pixels.len()
            )));
        }
        Ok(Self { n, rows, cols, pixels })
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }

    pub fn take(&self, count: usize) -> Self {
        let count = count.min(self.n);
        let size = self.rows * self.cols;
        Self { n: count, rows: self.rows, cols: self.cols, pixels: self.pixels[..count * size].to_vec() }
    }
}

impl TryFrom<IdxTensor> for ImageSet {
    type Error = Error;

    fn try_from(t: IdxTensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[n, rows, cols] => ImageSet::new(n, rows, cols, t.data),
            other => Err(Error::DimensionMismatch(format!("expected an image stack, got dims {other:?}"))),
        }
    }
}

/// Inflates gzip input when the gzip magic is present.
pub fn maybe_decompress(bytes: Vec<u8>) -> std::result::Result<Vec<u8>, IdxError> {
    if bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        MultiGzDecoder::new(bytes.as_slice()).read_to_end(&mut out).map_err(|e| IdxError::Gzip(e.to_string()))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Parses an uncompressed IDX payload of unsigned bytes.
pub fn parse_idx(bytes: &[u8]) -> std::result::Result<IdxTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated { expected: 4, actual: bytes.len() as u64 });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic { found: magic, offset: 0, reason: "leading bytes must be zero" });
    }
    if bytes[2] != 0x08 {
        return Err(IdxError::BadMagic { found: magic, offset: 2, reason: "element type is not unsigned byte" });
    }
    if magic != LABELS_MAGIC && magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic { found: magic, offset: 3, reason: "expected 1 or 3 dimensions" });
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(IdxError::Truncated { expected: header as u64, actual: bytes.len() as u64 });
    }
    let raw_dims: Vec<u32> =
        (0..ndim).map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap())).collect();
    let payload = raw_dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|&p| p <= isize::MAX as u64 - header as u64)
        .ok_or_else(|| IdxError::DimensionOverflow { dims: raw_dims.clone() })?;
    let expected = header as u64 + payload;
    if (bytes.len() as u64) < expected {
        return Err(IdxError::Truncated { expected, actual: bytes.len() as u64 });
    }
    Ok(IdxTensor {
        dims: raw_dims.iter().map(|&d| d as usize).collect(),
        data: bytes[header..expected as usize].to_vec(),
    })
}

/// Reads an IDX file, auto-detecting gzip compression.
pub fn read_idx(path: &Path) -> Result<IdxTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_idx(&maybe_decompress(bytes)?)?)
}

/// Hex SHA-256 of a file's raw bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Checks a file against a pinned digest.
pub fn verify_sha256(path: &Path, expected: &str) -> Result<()> {
    let computed = sha256_file(path)?;
    if !computed.eq_ignore_ascii_case(expected.trim()) {
        return Err(IdxError::Checksum {
            name: path.display().to_string(),
            expected: expected.trim().to_lowercase(),
            computed,
        }
        .into());
    }
    Ok(())
}

/// Serializes an unsigned-byte tensor (1 or 3 dims) as IDX.
pub fn encode_idx(tensor: &IdxTensor) -> Result<Vec<u8>> {
    let magic = match tensor.dims.len() {
        1 => LABELS_MAGIC,
        3 => IMAGES_MAGIC,
        n => return Err(Error::InvalidParameter(format!("IDX writer supports 1 or 3 dims, got {n}"))),
    };
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.data.len());
    out.write_all(&magic.to_be_bytes()).unwrap();
    for &d in &tensor.dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidParameter(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_be_bytes()).unwrap();
    }
    out.extend_from_slice(&tensor.data);
    Ok(out)
}
