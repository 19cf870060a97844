//! Versioned binary container for named f64 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DOEMTNSR"
//! version  u32
//! count    u32      number of sections
//! section  u16 name length, UTF-8 name, u32 ndim, ndim x u64 dims,
//!          prod(dims) x f64 data
//! footer   32 bytes SHA-256 of everything above
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"DOEMTNSR";
pub const VERSION: u32 = 1;

const CHUNK_VALUES: usize = 8192;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes at offset 0")]
    BadMagic,

    #[error("unsupported container version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },

    #[error("truncated container while reading `{field}` at offset {offset}")]
    Truncated { field: String, offset: u64 },

    #[error("section name at offset {offset} is not valid UTF-8")]
    BadName { offset: u64 },

    #[error("duplicate field `{0}`")]
    DuplicateField(String),

    #[error("missing field `{field}`")]
    MissingField { field: String },

    #[error("field `{field}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { field: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("field `{field}`: {reason}")]
    InvalidValue { field: String, reason: String },

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    ChecksumMismatch { stored: String, computed: String },

    #[error("{count} unexpected trailing byte(s) after the footer")]
    TrailingBytes { count: u64 },

    #[error("I/O failure while reading container: {0}")]
    Io(#[source] io::Error),
}

/// Dense tensor with row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory container with ordered, uniquely named sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<(), FormatError> {
        if self.sections.iter().any(|(n, _)| n == name) {
            return Err(FormatError::DuplicateField(name.to_string()));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(FormatError::ShapeMismatch {
                field: name.to_string(),
                expected: dims,
                found: vec![data.len()],
            });
        }
        self.sections.push((name.to_string(), Tensor { dims, data }));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, FormatError> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| FormatError::MissingField { field: name.to_string() })
    }

    /// Removes a section, checking its shape.
    pub fn take(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f64>, FormatError> {
        let pos = self
            .sections
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| FormatError::MissingField { field: name.to_string() })?;
        if self.sections[pos].1.dims != dims {
            return Err(FormatError::ShapeMismatch {
                field: name.to_string(),
                expected: dims.to_vec(),
                found: self.sections[pos].1.dims.clone(),
            });
        }
        Ok(self.sections.remove(pos).1.data)
    }

    /// Writes the container and returns the hex digest.
    pub fn write_to<W: Write>(&self, w: W) -> io::Result<String> {
        let views: Vec<(&str, &[usize], &[f64])> =
            self.sections.iter().map(|(n, t)| (n.as_str(), t.dims.as_slice(), t.data.as_slice())).collect();
        write_sections(w, &views)
    }

    /// Reads a container; `byte_len` bounds declared sizes when known.
    pub fn read_from<R: Read>(r: R, byte_len: Option<u64>) -> Result<Self, FormatError> {
        let mut reader = HashingReader { inner: r, hasher: Sha256::new(), offset: 0 };

        let magic: [u8; 8] = reader.array("magic")?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = u32::from_le_bytes(reader.array("version")?);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion { found: version });
        }
        let count = u32::from_le_bytes(reader.array("section count")?);

        let mut out = Container::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_offset = reader.offset;
            let name_len = u16::from_le_bytes(reader.array("section name length")?) as usize;
            let mut name_bytes = vec![0u8; name_len];
            reader.fill(&mut name_bytes, "section name")?;
            let name = String::from_utf8(name_bytes).map_err(|_| FormatError::BadName { offset: name_offset })?;
            if !seen.insert(name.clone()) {
                return Err(FormatError::DuplicateField(name));
            }

            let ndim = u32::from_le_bytes(reader.array(&format!("{name}.ndim"))?) as usize;
            if ndim > 16 {
                return Err(FormatError::InvalidValue { field: format!("{name}.ndim"), reason: format!("{ndim} dimensions") });
            }
            let mut dims = Vec::with_capacity(ndim);
            let mut total: u64 = 1;
            for _ in 0..ndim {
                let d = u64::from_le_bytes(reader.array(&format!("{name}.dims"))?);
                total = total.checked_mul(d).ok_or_else(|| FormatError::InvalidValue {
                    field: format!("{name}.dims"),
                    reason: "element count overflows".into(),
                })?;
                dims.push(usize::try_from(d).map_err(|_| FormatError::InvalidValue {
                    field: format!("{name}.dims"),
                    reason: format!("dimension {d} does not fit in memory"),
                })?);
            }
            let bytes = total.checked_mul(8).ok_or_else(|| FormatError::InvalidValue {
                field: format!("{name}.dims"),
                reason: "byte count overflows".into(),
            })?;
            if let Some(len) = byte_len {
                if reader.offset + bytes + 32 > len {
                    return Err(FormatError::Truncated { field: format!("{name}.data"), offset: reader.offset });
                }
            }

            let total = total as usize;
            let mut data = Vec::with_capacity(total);
            let mut buf = vec![0u8; CHUNK_VALUES.min(total.max(1)) * 8];
            let mut remaining = total;
            while remaining > 0 {
                let take = remaining.min(CHUNK_VALUES);
                let chunk = &mut buf[..take * 8];
                reader.fill(chunk, &format!("{name}.data"))?;
                data.extend(chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())));
                remaining -= take;
            }
            out.sections.push((name, Tensor { dims, data }));
        }

        let computed = hex::encode(reader.hasher.finalize_reset());
        let mut stored = [0u8; 32];
        read_exact_or_truncated(&mut reader.inner, &mut stored, "checksum", reader.offset)?;
        let stored = hex::encode(stored);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        let mut rest = Vec::new();
        reader.inner.read_to_end(&mut rest).map_err(FormatError::Io)?;
        if !rest.is_empty() {
            return Err(FormatError::TrailingBytes { count: rest.len() as u64 });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> crate::Result<String> {
        let file = File::create(path).map_err(|e| crate::Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let digest = self.write_to(&mut w).map_err(|e| crate::Error::io(path, e))?;
        w.flush().map_err(|e| crate::Error::io(path, e))?;
        Ok(digest)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let file = File::open(path).map_err(|e| crate::Error::io(path, e))?;
        let len = file.metadata().map_err(|e| crate::Error::io(path, e))?.len();
        Ok(Self::read_from(BufReader::new(file), Some(len))?)
    }
}

/// Streams borrowed sections to `w`; returns the hex digest written as footer.
pub fn write_sections<W: Write>(mut w: W, sections: &[(&str, &[usize], &[f64])]) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut put = |w: &mut W, bytes: &[u8]| -> io::Result<()> {
        hasher.update(bytes);
        w.write_all(bytes)
    };
    put(&mut w, &MAGIC)?;
    put(&mut w, &VERSION.to_le_bytes())?;
    put(&mut w, &(sections.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(CHUNK_VALUES * 8);
    for (name, dims, data) in sections {
        let expected: usize = dims.iter().product();
        if expected != data.len() || name.len() > u16::MAX as usize {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("section `{name}` is malformed")));
        }
        put(&mut w, &(name.len() as u16).to_le_bytes())?;
        put(&mut w, name.as_bytes())?;
        put(&mut w, &(dims.len() as u32).to_le_bytes())?;
        for &d in dims.iter() {
            put(&mut w, &(d as u64).to_le_bytes())?;
        }
        for chunk in data.chunks(CHUNK_VALUES) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            put(&mut w, &buf)?;
        }
    }
    let digest = hasher.finalize();
    w.write_all(&digest)?;
    Ok(hex::encode(digest))
}

/// Writes borrowed sections to a file.
pub fn save_sections(path: &Path, sections: &[(&str, &[usize], &[f64])]) -> crate::Result<String> {
    let file = File::create(path).map_err(|e| crate::Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let digest = write_sections(&mut w, sections).map_err(|e| crate::Error::io(path, e))?;
    w.flush().map_err(|e| crate::Error::io(path, e))?;
    Ok(digest)
}

struct HashingReader<R> {
    inner: R,
    hasher: Sha256,
    offset: u64,
}

impl<R: Read> HashingReader<R> {
    fn fill(&mut self, buf: &mut [u8], field: &str) -> Result<(), FormatError> {
        read_exact_or_truncated(&mut self.inner, buf, field, self.offset)?;
        self.hasher.update(&*buf);
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N], FormatError> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, field)?;
        Ok(buf)
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], field: &str, offset: u64) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::Truncated { field: field.to_string(), offset },
        _ => FormatError::Io(e),
    })
}
