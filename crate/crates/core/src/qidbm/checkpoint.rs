//! QiDBM checkpoints: a tensor container plus a JSON sidecar.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldConvention, QidbmParams};
use crate::container::{save_sections, Container, FormatError};
use crate::data::dump::{manifest_path, to_json, ImageShape};
use crate::data::Encoding;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub l: usize,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    pub encoding: Encoding,
    pub field: FieldConvention,
    /// SHA-256 of the tensor file.
    #[serde(default)]
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageShape>,
}

impl CheckpointManifest {
    pub fn for_params(p: &QidbmParams) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            l: p.l,
            m: p.m,
            n: p.n,
            seed: 0,
            epoch: 0,
            config_hash: String::new(),
            encoding: Encoding::ZeroOne,
            field: FieldConvention::SpinConsistent,
            sha256: String::new(),
            image: None,
        }
    }
}

fn shapes(l: usize, m: usize, n: usize) -> [(&'static str, Vec<usize>); 6] {
    [
        ("b_v", vec![l]),
        ("b_h1", vec![m]),
        ("b_h2", vec![n]),
        ("w1", vec![l, m]),
        ("w2", vec![m, n]),
        ("gamma", vec![m]),
    ]
}

/// Writes `<path>` and `<path>.json`; returns the manifest as written.
pub fn save_checkpoint(path: &Path, params: &QidbmParams, manifest: &CheckpointManifest) -> Result<CheckpointManifest> {
    params.validate()?;
    let dims = shapes(params.l, params.m, params.n);
    let sections: Vec<(&str, &[usize], &[f64])> =
        params.sections().iter().zip(&dims).map(|((name, data), (_, d))| (*name, d.as_slice(), *data)).collect();
    let sha256 = save_sections(path, &sections)?;
    let mut manifest = manifest.clone();
    manifest.format_version = CHECKPOINT_VERSION;
    manifest.l = params.l;
    manifest.m = params.m;
    manifest.n = params.n;
    manifest.sha256 = sha256;
    let mpath = manifest_path(path);
    fs::write(&mpath, to_json(&manifest)).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Reads a checkpoint, cross-checking the sidecar against the tensors.
pub fn load_checkpoint(path: &Path) -> Result<(QidbmParams, CheckpointManifest)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| FormatError::InvalidValue {
        field: format!("manifest ({})", mpath.display()),
        reason: e.to_string(),
    })?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion { found: manifest.format_version }.into());
    }
    let mut c = Container::load(path)?;
    let (l, m, n) = (manifest.l, manifest.m, manifest.n);
    let mut take = |name: &str, dims: &[usize]| c.take(name, dims);
    let params = QidbmParams {
        l,
        m,
        n,
        b_v: take("b_v", &[l])?,
        b_h1: take("b_h1", &[m])?,
        b_h2: take("b_h2", &[n])?,
        w1: take("w1", &[l, m])?,
        w2: take("w2", &[m, n])?,
        gamma: take("gamma", &[m])?,
    };
    if let Some((name, k)) = params.first_non_finite() {
        return Err(FormatError::InvalidValue { field: format!("{name}[{k}]"), reason: "not finite".into() }.into());
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_field_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let p = QidbmParams::init(5, 3, 2, 4).with_gamma(&[0.25]).unwrap();
        let mut man = CheckpointManifest::for_params(&p);
        man.seed = 4;
        man.epoch = 7;
        let written = save_checkpoint(&path, &p, &man).unwrap();
        let (back, m2) = load_checkpoint(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(m2, written);

        // A manifest disagreeing with the tensors names the offending field.
        let mut wrong = written.clone();
        wrong.m = 4;
        fs::write(manifest_path(&path), to_json(&wrong)).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("b_h1"), "{err}");

        fs::write(manifest_path(&path), to_json(&written)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let k = bytes.len() / 2;
        bytes[k] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
