//! Dataset dumps, manifests and PGM image grids.
//!
//! Dataset layout (integers little-endian):
//!
//! ```text
//! magic "DOEMDSET" | u32 version | u64 d_v | u64 rows | u8 encoding
//! rows x d_v bytes, each 0 or 1 | 32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::idx::ImageSet;
use super::{BinaryDataset, Encoding, Provenance};
use crate::container::FormatError;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 8] = *b"DOEMDSET";
pub const DATASET_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8 + 8 + 1;

/// Sidecar describing a dataset dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub d_v: usize,
    pub rows: usize,
    pub encoding: Encoding,
    pub sha256: String,
    pub provenance: Provenance,
    /// Image geometry `(rows, cols, bits per pixel)` when rows are images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageShape>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
}

pub fn dataset_to_bytes(ds: &BinaryDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + ds.bits().len() + 32);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.d_v() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.push(match ds.encoding() {
        Encoding::ZeroOne => 0,
        Encoding::PlusMinus => 1,
    });
    out.extend_from_slice(ds.bits());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn dataset_from_bytes(bytes: &[u8], provenance: Provenance) -> std::result::Result<BinaryDataset, FormatError> {
    let truncated = |field: &str, offset: usize| FormatError::Truncated { field: field.into(), offset: offset as u64 };
    if bytes.len() < HEADER + 32 {
        return Err(truncated("header", bytes.len()));
    }
    if bytes[..8] != DATASET_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion { found: version });
    }
    let d_v = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let rows = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let encoding = match bytes[28] {
        0 => Encoding::ZeroOne,
        1 => Encoding::PlusMinus,
        other => {
            return Err(FormatError::InvalidValue { field: "encoding".into(), reason: format!("unknown tag {other}") })
        }
    };
    let payload = d_v
        .checked_mul(rows)
        .filter(|&p| p <= (bytes.len() - HEADER - 32) as u64)
        .ok_or_else(|| truncated("bits", HEADER))? as usize;
    if HEADER + payload + 32 != bytes.len() {
        return Err(FormatError::TrailingBytes { count: (bytes.len() - HEADER - payload - 32) as u64 });
    }
    let computed = hex::encode(Sha256::digest(&bytes[..HEADER + payload]));
    let stored = hex::encode(&bytes[HEADER + payload..]);
    if computed != stored {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    let bits = bytes[HEADER..HEADER + payload].to_vec();
    if d_v == 0 {
        return Err(FormatError::InvalidValue { field: "d_v".into(), reason: "zero width".into() });
    }
    BinaryDataset::new(d_v as usize, bits, encoding, provenance)
        .map_err(|e| FormatError::InvalidValue { field: "bits".into(), reason: e.to_string() })
}

/// Writes `<path>` and `<path>.json`; returns the manifest.
pub fn save_dataset(path: &Path, ds: &BinaryDataset, image: Option<ImageShape>) -> Result<DatasetManifest> {
    let bytes = dataset_to_bytes(ds);
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        d_v: ds.d_v(),
        rows: ds.len(),
        encoding: ds.encoding(),
        sha256: hex::encode(&bytes[bytes.len() - 32..]),
        provenance: ds.provenance.clone(),
        image,
    };
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, to_json(&manifest)).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Loads a dump; the manifest is optional but must agree when present.
pub fn load_dataset(path: &Path) -> Result<(BinaryDataset, Option<DatasetManifest>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let manifest: Option<DatasetManifest> = match fs::read_to_string(&mpath) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| FormatError::InvalidValue {
            field: format!("manifest ({})", mpath.display()),
            reason: e.to_string(),
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&mpath, e)),
    };
    let provenance = manifest.as_ref().map(|m| m.provenance.clone()).unwrap_or_else(|| Provenance::new(path.display().to_string()));
    let ds = dataset_from_bytes(&bytes, provenance)?;
    if let Some(m) = &manifest {
        if m.d_v != ds.d_v() || m.rows != ds.len() {
            return Err(FormatError::InvalidValue {
                field: "manifest.d_v/rows".into(),
                reason: format!("manifest says {}x{}, data is {}x{}", m.rows, m.d_v, ds.len(), ds.d_v()),
            }
            .into());
        }
    }
    Ok((ds, manifest))
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

/// Binary PGM (P5) tiling the images row by row, one-pixel black gutters.
pub fn pgm_grid(images: &ImageSet, per_row: usize) -> Vec<u8> {
    let per_row = per_row.max(1).min(images.n.max(1));
    let grid_rows = images.n.div_ceil(per_row);
    let width = per_row * (images.cols + 1) - 1;
    let height = (grid_rows * (images.rows + 1)).saturating_sub(1);
    let mut canvas = vec![0u8; width * height];
    for k in 0..images.n {
        let (gy, gx) = (k / per_row, k % per_row);
        let img = images.image(k);
        for r in 0..images.rows {
            let y = gy * (images.rows + 1) + r;
            let x = gx * (images.cols + 1);
            canvas[y * width + x..y * width + x + images.cols].copy_from_slice(&img[r * images.cols..(r + 1) * images.cols]);
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&canvas);
    out
}

/// Turns bit rows back into grayscale images.
pub fn rows_to_images(ds: &BinaryDataset, shape: ImageShape) -> Result<ImageSet> {
    let per_image = shape.rows * shape.cols * shape.bits as usize;
    if per_image != ds.d_v() {
        return Err(Error::DimensionMismatch(format!(
            "image shape {}x{}x{} does not match row width {}",
            shape.rows,
            shape.cols,
            shape.bits,
            ds.d_v()
        )));
    }
    let mut pixels = Vec::with_capacity(ds.len() * shape.rows * shape.cols);
    for row in ds.rows() {
        match shape.bits {
            1 => pixels.extend(row.iter().map(|&b| if b == 1 { 255 } else { 0 })),
            8 => pixels.extend(super::encode::decode_8bit_row(row)?),
            other => return Err(Error::InvalidParameter(format!("unsupported bit depth {other}"))),
        }
    }
    ImageSet::new(ds.len(), shape.rows, shape.cols, pixels)
}
