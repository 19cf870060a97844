//! Binary datasets, encodings and empirical distributions.
//!
//! A visible bit vector maps to a computational-basis index by reading it as
//! a big-endian integer: bit 0 of the vector is the most significant bit,
//! matching the Kronecker ordering where site 0 is the leftmost factor.
//! Bit `0` sits on the `σz = +1` eigenvector (basis state `|0⟩`), so the
//! spin attached to a bit is `1 - 2·bit`. All conversions go through
//! [`basis`].

pub mod dump;
pub mod encode;
pub mod idx;
pub mod mixture;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DensityOperator;
use crate::models::EXACT_QUBIT_CAP;

/// Value set used when feeding bits to a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    #[default]
    ZeroOne,
    PlusMinus,
}

impl Encoding {
    /// Numeric value of a stored bit.
    #[inline]
    pub fn value(self, bit: u8) -> f64 {
        match self {
            Encoding::ZeroOne => bit as f64,
            Encoding::PlusMinus => 2.0 * bit as f64 - 1.0,
        }
    }

    /// Value of the "off" state.
    #[inline]
    pub fn off(self) -> f64 {
        self.value(0)
    }

    pub fn name(self) -> &'static str {
        match self {
            Encoding::ZeroOne => "zero-one",
            Encoding::PlusMinus => "plus-minus",
        }
    }
}

/// Bit-vector and basis-index conversions shared by every module.
pub mod basis {
    /// Big-endian basis index of a bit vector (at most 63 bits).
    pub fn index_of(bits: &[u8]) -> u64 {
        debug_assert!(bits.len() <= 63);
        bits.iter().fold(0u64, |acc, &b| (acc << 1) | (b & 1) as u64)
    }

    /// Inverse of [`index_of`] for a vector of `width` bits.
    pub fn bits_of(index: u64, width: usize) -> Vec<u8> {
        (0..width).map(|k| ((index >> (width - 1 - k)) & 1) as u8).collect()
    }

    /// Bit of `site` within the basis index of a `width`-site register.
    #[inline]
    pub fn bit(index: usize, site: usize, width: usize) -> u8 {
        ((index >> (width - 1 - site)) & 1) as u8
    }

    /// `σz` eigenvalue carried by a bit.
    #[inline]
    pub fn spin_of_bit(bit: u8) -> f64 {
        1.0 - 2.0 * bit as f64
    }

    /// Spin of `site` in basis state `index`.
    #[inline]
    pub fn spin(index: usize, site: usize, width: usize) -> f64 {
        spin_of_bit(bit(index, site, width))
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(source: impl Into<String>) -> Self {
        Self { source: source.into(), seed: None, params: BTreeMap::new() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }
}

/// N binary rows of width `d_v`, stored as bits.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryDataset {
    d_v: usize,
    bits: Vec<u8>,
    encoding: Encoding,
    pub provenance: Provenance,
}

impl BinaryDataset {
    pub fn new(d_v: usize, bits: Vec<u8>, encoding: Encoding, provenance: Provenance) -> Result<Self> {
        if d_v == 0 {
            return Err(Error::InvalidParameter("dataset width must be positive".into()));
        }
        if bits.len() % d_v != 0 {
            return Err(Error::DimensionMismatch(format!("{} bits do not split into rows of {d_v}", bits.len())));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::InvalidParameter(format!("entry {pos} is {}, not a bit", bits[pos])));
        }
        Ok(Self { d_v, bits, encoding, provenance })
    }

    /// Builds a dataset from encoded values (`0/1` or `-1/+1`).
    pub fn from_values(d_v: usize, values: &[f64], encoding: Encoding, provenance: Provenance) -> Result<Self> {
        let bits = values
            .iter()
            .enumerate()
            .map(|(k, &x)| match (encoding, x) {
                (Encoding::ZeroOne, x) if x == 0.0 => Ok(0),
                (Encoding::ZeroOne, x) if x == 1.0 => Ok(1),
                (Encoding::PlusMinus, x) if x == -1.0 => Ok(0),
                (Encoding::PlusMinus, x) if x == 1.0 => Ok(1),
                _ => Err(Error::InvalidParameter(format!("entry {k} = {x} is not in the {} encoding", encoding.name()))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(d_v, bits, encoding, provenance)
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn len(&self) -> usize {
        self.bits.len() / self.d_v
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.d_v..(i + 1) * self.d_v]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[u8]> {
        self.bits.chunks_exact(self.d_v)
    }

    /// Row `i` in the declared encoding.
    pub fn row_values(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&b| self.encoding.value(b)).collect()
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            d_v: self.d_v,
            bits: self.bits[start * self.d_v..end * self.d_v].to_vec(),
            encoding: self.encoding,
            provenance: self.provenance.clone(),
        }
    }

    /// Keeps only the listed columns, in order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&c) = columns.iter().find(|&&c| c >= self.d_v) {
            return Err(Error::InvalidParameter(format!("column {c} out of range for width {}", self.d_v)));
        }
        let bits = self.rows().flat_map(|r| columns.iter().map(move |&c| r[c])).collect();
        let provenance = self.provenance.clone().with("columns", format!("{columns:?}"));
        Self::new(columns.len(), bits, self.encoding, provenance)
    }

    /// Integer counts per basis index.
    pub fn empirical(&self) -> Result<EmpiricalDistribution> {
        if self.d_v > 63 {
            return Err(Error::InvalidParameter(format!("{} bits do not fit a basis index", self.d_v)));
        }
        let mut counts = BTreeMap::new();
        for r in self.rows() {
            *counts.entry(basis::index_of(r)).or_insert(0u64) += 1;
        }
        Ok(EmpiricalDistribution { d_v: self.d_v, counts, total: self.len() as u64 })
    }
}

/// Sparse diagonal of the empirical density operator, kept as exact counts.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDistribution {
    pub d_v: usize,
    pub counts: BTreeMap<u64, u64>,
    pub total: u64,
}

impl EmpiricalDistribution {
    pub fn probability(&self, index: u64) -> f64 {
        self.counts.get(&index).map_or(0.0, |&c| c as f64 / self.total as f64)
    }

    /// Dense probability vector over all `2^d_v` basis states.
    pub fn dense(&self) -> Result<Vec<f64>> {
        if self.d_v > 24 {
            return Err(Error::QubitCap { what: "dense empirical table".into(), qubits: self.d_v, cap: 24 });
        }
        let mut p = vec![0.0; 1 << self.d_v];
        for (&i, &c) in &self.counts {
            p[i as usize] = c as f64 / self.total as f64;
        }
        Ok(p)
    }

    /// Diagonal density operator `(1/N) Σ v v†`.
    pub fn density(&self) -> Result<DensityOperator> {
        if self.d_v > EXACT_QUBIT_CAP {
            return Err(Error::QubitCap { what: "dense empirical density".into(), qubits: self.d_v, cap: EXACT_QUBIT_CAP });
        }
        DensityOperator::diagonal(vec![2; self.d_v], &self.dense()?)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        let n = self.total as f64;
        -self.counts.values().map(|&c| c as f64 / n).map(|p| p * p.ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_conversions() {
        assert_eq!(basis::index_of(&[1, 0]), 2);
        assert_eq!(basis::index_of(&[0, 0, 1]), 1);
        assert_eq!(basis::bits_of(6, 3), vec![1, 1, 0]);
        assert_eq!(basis::bit(6, 2, 3), 0);
        assert_eq!(basis::spin(0, 0, 2), 1.0);
        assert_eq!(basis::spin(2, 0, 2), -1.0);
        for i in 0..32 {
            assert_eq!(basis::index_of(&basis::bits_of(i, 5)), i);
        }
    }

    #[test]
    fn empirical_density_example() {
        let ds = BinaryDataset::new(2, vec![0, 0, 0, 0, 1, 1, 1, 0], Encoding::ZeroOne, Provenance::new("test")).unwrap();
        let emp = ds.empirical().unwrap();
        assert_eq!(emp.counts.values().sum::<u64>(), emp.total);
        assert_eq!(emp.dense().unwrap(), vec![0.5, 0.0, 0.25, 0.25]);
        let rho = emp.density().unwrap();
        assert_eq!(rho.trace(), 1.0);

        let single = BinaryDataset::new(3, vec![1, 0, 1, 1, 0, 1], Encoding::ZeroOne, Provenance::new("t")).unwrap();
        let p = single.empirical().unwrap().dense().unwrap();
        assert_eq!(p.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(p[5], 1.0);
    }

    #[test]
    fn validation() {
        assert!(BinaryDataset::new(2, vec![0, 2], Encoding::ZeroOne, Provenance::default()).is_err());
        assert!(BinaryDataset::new(2, vec![0, 1, 1], Encoding::ZeroOne, Provenance::default()).is_err());
        assert!(BinaryDataset::from_values(2, &[-1.0, 1.0], Encoding::PlusMinus, Provenance::default()).is_ok());
        assert!(BinaryDataset::from_values(2, &[0.0, 1.0], Encoding::PlusMinus, Provenance::default()).is_err());
        let big = BinaryDataset::new(15, vec![0; 15], Encoding::ZeroOne, Provenance::default()).unwrap();
        assert!(matches!(big.empirical().unwrap().density(), Err(Error::QubitCap { .. })));
    }
}
