//! Resolved run configurations.
//!
//! Every command is described by one [`RunConfig`] value. The CLI resolves
//! flags into it, writes it to `config.toml` in the output directory, and
//! `doem run --config` replays it.

use std::path::{Path, PathBuf};

use doem_core::data::mixture::BernoulliMixtureSpec;
use doem_core::doem::{DoemConfig, DoemPath};
use doem_core::qidbm::CdConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    GenData(GenDataConfig),
    TrainDoem(TrainDoemConfig),
    TrainCd(TrainCdConfig),
    Eval(EvalConfig),
    Sample(SampleConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum GenDataConfig {
    Bernoulli(BernoulliMixtureSpec),
    Mnist(MnistConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnistConfig {
    pub input: PathBuf,
    /// 1 for thresholding, 8 for bit planes.
    pub bits: u8,
    pub threshold: u8,
    /// Reduce 28x28 images to 8x8 before encoding.
    #[serde(default)]
    pub downscale: bool,
    /// Keep only the first `limit` images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Expected SHA-256 of the input file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    /// Keep only these visible columns (drops the image geometry).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDoemConfig {
    pub data: PathBuf,
    pub hidden: usize,
    /// Transverse field on every hidden qubit.
    pub gamma: f64,
    /// Transverse field on every visible qubit; anything but zero is refused.
    #[serde(default)]
    pub visible_gamma: f64,
    /// Initial biases and couplings are uniform in `±init_scale`.
    pub init_scale: f64,
    #[serde(default)]
    pub path: DoemPath,
    pub doem: DoemConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCdConfig {
    pub data: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<PathBuf>,
    /// Trailing rows of `data` held out when no separate file is given.
    #[serde(default)]
    pub holdout_rows: usize,
    /// `[m, n]`.
    pub hidden: [usize; 2],
    /// One value for every `h1` unit, or one per unit.
    pub gamma: Vec<f64>,
    /// Expected bits per pixel of image data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
    /// Exact held-out NLL after every epoch.
    #[serde(default)]
    pub exact_nll: bool,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub cd: CdConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub model: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Exact distribution table as written by `gen-data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    /// Fail instead of falling back when exact metrics are out of reach.
    #[serde(default)]
    pub exact: bool,
    pub n_samples: usize,
    pub burn_in: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub model: PathBuf,
    pub n: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 over the resolved text and the tool version.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        h.update(concat!("doem ", env!("CARGO_PKG_VERSION")).as_bytes());
        hex::encode(h.finalize())
    }

    /// Makes input paths absolute so a replay does not depend on the working directory.
    pub fn resolve_paths(&mut self) -> Result<(), CliError> {
        let abs = |p: &mut PathBuf| -> Result<(), CliError> {
            *p = std::path::absolute(&*p).map_err(|e| CliError::io(&*p, e))?;
            Ok(())
        };
        match self {
            RunConfig::GenData(GenDataConfig::Mnist(c)) => abs(&mut c.input),
            RunConfig::GenData(GenDataConfig::Bernoulli(_)) => Ok(()),
            RunConfig::TrainDoem(c) => abs(&mut c.data),
            RunConfig::TrainCd(c) => {
                abs(&mut c.data)?;
                c.heldout.as_mut().map_or(Ok(()), abs)
            }
            RunConfig::Eval(c) => {
                abs(&mut c.model)?;
                c.data.as_mut().map_or(Ok(()), abs)?;
                c.table.as_mut().map_or(Ok(()), abs)
            }
            RunConfig::Sample(c) => abs(&mut c.model),
        }
    }
}
