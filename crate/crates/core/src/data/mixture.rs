//! Mixture of Bernoulli distributions around random modes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{basis, BinaryDataset, Encoding, Provenance};
use crate::error::{Error, Result};

/// Largest bit count for which the exact probability table is built.
pub const EXACT_TABLE_CAP: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernoulliMixtureSpec {
    pub n_bits: usize,
    pub n_modes: usize,
    pub p: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for BernoulliMixtureSpec {
    fn default() -> Self {
        Self { n_bits: 8, n_modes: 8, p: 0.9, n_samples: 1000, seed: 0 }
    }
}

impl BernoulliMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParameter(format!("success probability {} is outside (0, 1)", self.p)));
        }
        if self.n_modes == 0 {
            return Err(Error::InvalidParameter("at least one mode is required".into()));
        }
        if self.n_bits == 0 || self.n_bits > 63 {
            return Err(Error::InvalidParameter(format!("bit count {} is outside 1..=63", self.n_bits)));
        }
        Ok(())
    }
}

/// Exact distribution of the mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureTable {
    pub n_bits: usize,
    pub modes: Vec<u64>,
    pub probabilities: Vec<f64>,
}

impl MixtureTable {
    /// `P(v) = (1/M) Σ_k p^(N-d_k) (1-p)^(d_k)`, `d_k` the Hamming distance to mode k.
    pub fn exact(n_bits: usize, modes: &[u64], p: f64) -> Result<Self> {
        if n_bits > EXACT_TABLE_CAP {
            return Err(Error::QubitCap { what: "exact mixture table".into(), qubits: n_bits, cap: EXACT_TABLE_CAP });
        }
        let m = modes.len() as f64;
        let probabilities = (0..1u64 << n_bits)
            .map(|v| {
                modes
                    .iter()
                    .map(|&k| {
                        let d = (v ^ k).count_ones() as i32;
                        p.powi(n_bits as i32 - d) * (1.0 - p).powi(d)
                    })
                    .sum::<f64>()
                    / m
            })
            .collect();
        Ok(Self { n_bits, modes: modes.to_vec(), probabilities })
    }

    /// Rows of `index,probability`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::InvalidParameter(format!("csv: {e}"));
        w.write_record(["index", "probability"]).map_err(io)?;
        for (i, p) in self.probabilities.iter().enumerate() {
            w.write_record([i.to_string(), p.to_string()]).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Vec<f64>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut out = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidParameter(format!("table row {k}: {e}")))?;
            let idx: usize = rec.get(0).unwrap_or("").parse().map_err(|_| Error::InvalidParameter(format!("table row {k}: bad index")))?;
            let p: f64 = rec.get(1).unwrap_or("").parse().map_err(|_| Error::InvalidParameter(format!("table row {k}: bad probability")))?;
            if idx != k {
                return Err(Error::InvalidParameter(format!("table row {k} has index {idx}")));
            }
            out.push(p);
        }
        Ok(out)
    }
}

/// Draws modes, then samples. The table is `None` above [`EXACT_TABLE_CAP`] bits.
pub fn gen_bernoulli_mixture(spec: &BernoulliMixtureSpec) -> Result<(BinaryDataset, Option<MixtureTable>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_bits;
    let space = 1u64 << n;

    let modes: Vec<u64> = if (spec.n_modes as u64) <= space && space <= usize::MAX as u64 {
        sample(&mut rng, space as usize, spec.n_modes).into_iter().map(|i| i as u64).collect()
    } else {
        (0..spec.n_modes).map(|_| rng.random_range(0..space)).collect()
    };

    let mut bits = Vec::with_capacity(spec.n_samples * n);
    for _ in 0..spec.n_samples {
        let mode = modes[rng.random_range(0..modes.len())];
        for b in basis::bits_of(mode, n) {
            let flip = !rng.random_bool(spec.p);
            bits.push(b ^ flip as u8);
        }
    }

    let provenance = Provenance::new("bernoulli-mixture")
        .with_seed(spec.seed)
        .with("n_bits", n)
        .with("n_modes", spec.n_modes)
        .with("p", spec.p)
        .with("n_samples", spec.n_samples);
    let dataset = BinaryDataset::new(n, bits, Encoding::ZeroOne, provenance)?;
    let table = if n <= EXACT_TABLE_CAP { Some(MixtureTable::exact(n, &modes, spec.p)?) } else { None };
    Ok((dataset, table))
}
