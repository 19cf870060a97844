//! Quantum-interleaved deep Boltzmann machines trained by contrastive divergence.
//!
//! Layers are `v` (visible, `l` units), `h1` (`m` units, may carry transverse
//! fields `Γ`) and `h2` (`n` units). Only `h1` is quantum, and it touches only
//! classical layers, so conditioned on `v` and `h2` each `h1` unit is an
//! independent qubit with Hamiltonian `f σz + Γ σx` (Gibbs state `exp(+H)/Z`):
//!
//! ```text
//! D = sqrt(f² + Γ²),   ⟨σz⟩ = (f/D) tanh D,   ⟨σx⟩ = (Γ/D) tanh D
//! ```
//!
//! and `P(h1 = on) = (1 + ⟨σz⟩)/2`. Nothing here is exponential in the unit
//! counts: the largest buffer is the `l x m` weight matrix.

pub mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryDataset, Encoding};
use crate::error::{Error, Result};
use crate::models::log_sum_exp;
use crate::rng::{generate_stream, init_stream, row_stream, shuffle_stream};

/// Largest `l + n` for exact likelihoods by enumeration.
pub const EXACT_NLL_CAP: usize = 20;

/// How the effective field of an `h1` unit is read off its activation
/// `a = b + Wᵀv + W₂h₂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldConvention {
    /// Field of the spin variable behind the encoded unit: `a/2` for
    /// `{0,1}` units, `a` for `±1` units. Reduces exactly to the classical
    /// DBM conditional at `Γ = 0`.
    #[default]
    SpinConsistent,
    /// Field equal to the activation in either encoding.
    Raw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Qidbm,
    /// Classical DBM: `h1` sampled with the logistic conditional, `Γ` must be zero.
    Dbm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QidbmParams {
    pub l: usize,
    pub m: usize,
    pub n: usize,
    pub b_v: Vec<f64>,
    pub b_h1: Vec<f64>,
    pub b_h2: Vec<f64>,
    /// Row-major `l x m`.
    pub w1: Vec<f64>,
    /// Row-major `m x n`.
    pub w2: Vec<f64>,
    /// Transverse field per `h1` unit.
    pub gamma: Vec<f64>,
}

impl QidbmParams {
    pub fn zeros(l: usize, m: usize, n: usize) -> Self {
        Self {
            l,
            m,
            n,
            b_v: vec![0.0; l],
            b_h1: vec![0.0; m],
            b_h2: vec![0.0; n],
            w1: vec![0.0; l * m],
            w2: vec![0.0; m * n],
            gamma: vec![0.0; m],
        }
    }

    /// Zero biases, weights uniform in `±1/sqrt(fan-in)`.
    pub fn init(l: usize, m: usize, n: usize, seed: u64) -> Self {
        let mut p = Self::zeros(l, m, n);
        let mut rng = init_stream(seed);
        let s1 = 1.0 / (l as f64).sqrt();
        for w in &mut p.w1 {
            *w = rng.random_range(-s1..=s1);
        }
        let s2 = 1.0 / (m as f64).sqrt();
        for w in &mut p.w2 {
            *w = rng.random_range(-s2..=s2);
        }
        p
    }

    /// Sets every `Γ_j` to `g`, or per unit when `values.len() == m`.
    pub fn with_gamma(mut self, values: &[f64]) -> Result<Self> {
        match values.len() {
            1 => self.gamma.fill(values[0]),
            k if k == self.m => self.gamma.copy_from_slice(values),
            k => return Err(Error::DimensionMismatch(format!("{k} transverse fields for {} units", self.m))),
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (l, m, n) = (self.l, self.m, self.n);
        if l == 0 || m == 0 || n == 0 {
            return Err(Error::InvalidParameter("every layer needs at least one unit".into()));
        }
        let shapes = [
            ("b_v", self.b_v.len(), l),
            ("b_h1", self.b_h1.len(), m),
            ("b_h2", self.b_h2.len(), n),
            ("w1", self.w1.len(), l * m),
            ("w2", self.w2.len(), m * n),
            ("gamma", self.gamma.len(), m),
        ];
        for (name, found, expected) in shapes {
            if found != expected {
                return Err(Error::DimensionMismatch(format!("{name} has {found} entries, expected {expected}")));
            }
        }
        if let Some((name, k)) = self.first_non_finite() {
            return Err(Error::NonFinite(format!("{name}[{k}]")));
        }
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        self.sections()
            .into_iter()
            .find_map(|(name, data)| data.iter().position(|x| !x.is_finite()).map(|k| (name, k)))
    }

    /// Named parameter arrays in checkpoint order.
    pub fn sections(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("b_v", &self.b_v),
            ("b_h1", &self.b_h1),
            ("b_h2", &self.b_h2),
            ("w1", &self.w1),
            ("w2", &self.w2),
            ("gamma", &self.gamma),
        ]
    }

    pub fn is_classical(&self) -> bool {
        self.gamma.iter().all(|&g| g == 0.0)
    }

    pub fn n_params(&self) -> usize {
        self.l + self.m + self.n + self.l * self.m + self.m * self.n + self.m
    }

    /// Equivalent `{-1,+1}` parameters for a `{0,1}` model under the
    /// spin-consistent field: `u = (1 + s)/2` gives `w' = w/4` and
    /// `b' = b/2 + Σ_neighbours w/4`. Every conditional is unchanged.
    pub fn zero_one_to_plus_minus(&self) -> Self {
        let (l, m, n) = (self.l, self.m, self.n);
        let mut out = self.clone();
        for w in out.w1.iter_mut().chain(out.w2.iter_mut()) {
            *w *= 0.25;
        }
        for a in 0..l {
            out.b_v[a] = 0.5 * self.b_v[a] + 0.25 * self.w1_row(a).iter().sum::<f64>();
        }
        for j in 0..m {
            let from_v: f64 = (0..l).map(|a| self.w1[a * m + j]).sum();
            out.b_h1[j] = 0.5 * self.b_h1[j] + 0.25 * (from_v + self.w2_row(j).iter().sum::<f64>());
        }
        for k in 0..n {
            let from_h1: f64 = (0..m).map(|j| self.w2[j * n + k]).sum();
            out.b_h2[k] = 0.5 * self.b_h2[k] + 0.25 * from_h1;
        }
        out
    }

    #[inline]
    pub fn w1_row(&self, a: usize) -> &[f64] {
        &self.w1[a * self.m..(a + 1) * self.m]
    }

    #[inline]
    pub fn w2_row(&self, j: usize) -> &[f64] {
        &self.w2[j * self.n..(j + 1) * self.n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdConfig {
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub encoding: Encoding,
    pub field: FieldConvention,
    pub mode: Mode,
    /// Experimental: follow `⟨σx⟩_data - ⟨σx⟩_model` with `Γ`.
    pub train_gamma: bool,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            k: 1,
            learning_rate: 0.001,
            batch_size: 600,
            epochs: 10,
            seed: 0,
            encoding: Encoding::ZeroOne,
            field: FieldConvention::SpinConsistent,
            mode: Mode::Qidbm,
            train_gamma: false,
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("CD needs at least one Gibbs step".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.mode == Mode::Dbm && self.train_gamma {
            return Err(Error::InvalidParameter("a classical DBM has no transverse fields to train".into()));
        }
        Ok(())
    }
}

/// One chain state.
#[derive(Clone, Debug, PartialEq)]
pub struct GibbsState {
    pub v: Vec<u8>,
    pub h1: Vec<u8>,
    /// `⟨σz⟩` of each `h1` unit at the moment it was sampled.
    pub h1_z_expect: Vec<f64>,
    pub h2: Vec<u8>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(⟨σz⟩, ⟨σx⟩)` of `exp(f σz + Γ σx)/Z`.
#[inline]
pub fn unit_expectations(field: f64, gamma: f64) -> (f64, f64) {
    if gamma == 0.0 {
        return (field.tanh(), 0.0);
    }
    let d = field.hypot(gamma);
    if d == 0.0 {
        return (0.0, 0.0);
    }
    let t = d.tanh();
    (field / d * t, gamma / d * t)
}

/// Spin field behind an activation.
#[inline]
pub fn field_of(activation: f64, encoding: Encoding, convention: FieldConvention) -> f64 {
    match (convention, encoding) {
        (FieldConvention::SpinConsistent, Encoding::ZeroOne) => 0.5 * activation,
        _ => activation,
    }
}

/// `P(unit on)` for a classical unit with the given activation.
#[inline]
pub fn classical_on_probability(activation: f64, encoding: Encoding) -> f64 {
    match encoding {
        Encoding::ZeroOne => sigmoid(activation),
        Encoding::PlusMinus => sigmoid(2.0 * activation),
    }
}

/// `P(unit on)` for an `h1` unit; at `Γ = 0` this is `sigmoid(2f)`.
#[inline]
fn quantum_on_probability(field: f64, gamma: f64) -> (f64, f64, f64) {
    if gamma == 0.0 {
        return (sigmoid(2.0 * field), field.tanh(), 0.0);
    }
    let (z, x) = unit_expectations(field, gamma);
    (0.5 * (1.0 + z), z, x)
}

#[inline]
fn values(bits: &[u8], encoding: Encoding) -> Vec<f64> {
    bits.iter().map(|&b| encoding.value(b)).collect()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> Vec<u8> {
    probs.iter().map(|&p| (rng.random::<f64>() < p) as u8).collect()
}

/// Activations of `h1` given encoded `v` and `h2` values.
pub fn h1_activations(p: &QidbmParams, v: &[f64], h2: &[f64]) -> Vec<f64> {
    let mut out = p.b_h1.clone();
    for (a, &x) in v.iter().enumerate() {
        if x != 0.0 {
            axpy(x, p.w1_row(a), &mut out);
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o += dot(p.w2_row(j), h2);
    }
    out
}

pub fn v_activations(p: &QidbmParams, h1: &[f64]) -> Vec<f64> {
    (0..p.l).map(|a| p.b_v[a] + dot(p.w1_row(a), h1)).collect()
}

pub fn h2_activations(p: &QidbmParams, h1: &[f64]) -> Vec<f64> {
    let mut out = p.b_h2.clone();
    for (j, &x) in h1.iter().enumerate() {
        if x != 0.0 {
            axpy(x, p.w2_row(j), &mut out);
        }
    }
    out
}

/// Closed-form `(⟨σz⟩, ⟨σx⟩)` of every `h1` unit given encoded `v`, `h2`.
pub fn quantum_layer_expectations(
    v: &[f64],
    h2: &[f64],
    params: &QidbmParams,
    encoding: Encoding,
    convention: FieldConvention,
) -> (Vec<f64>, Vec<f64>) {
    h1_activations(params, v, h2)
        .iter()
        .zip(&params.gamma)
        .map(|(&a, &g)| unit_expectations(field_of(a, encoding, convention), g))
        .unzip()
}

/// Samples `h1` with `P(on) = (1 + ⟨σz⟩)/2`; returns bits and `⟨σz⟩`.
pub fn sample_quantum_layer(
    v: &[f64],
    h2: &[f64],
    params: &QidbmParams,
    encoding: Encoding,
    convention: FieldConvention,
    rng: &mut impl Rng,
) -> (Vec<u8>, Vec<f64>) {
    let layer = Layer1::quantum(params, v, h2, encoding, convention);
    (draw(&layer.p_on, rng), layer.z)
}

/// Samples a classical layer from its activations.
pub fn sample_classical_layer(activations: &[f64], encoding: Encoding, rng: &mut impl Rng) -> Vec<u8> {
    let probs: Vec<f64> = activations.iter().map(|&a| classical_on_probability(a, encoding)).collect();
    draw(&probs, rng)
}

/// Conditional of `h1` given its neighbours.
struct Layer1 {
    p_on: Vec<f64>,
    z: Vec<f64>,
    x: Vec<f64>,
}

impl Layer1 {
    fn quantum(p: &QidbmParams, v: &[f64], h2: &[f64], enc: Encoding, conv: FieldConvention) -> Self {
        let act = h1_activations(p, v, h2);
        let mut out = Self { p_on: Vec::with_capacity(p.m), z: Vec::with_capacity(p.m), x: Vec::with_capacity(p.m) };
        for (&a, &g) in act.iter().zip(&p.gamma) {
            let (pr, z, x) = quantum_on_probability(field_of(a, enc, conv), g);
            out.p_on.push(pr);
            out.z.push(z);
            out.x.push(x);
        }
        out
    }

    fn classical(p: &QidbmParams, v: &[f64], h2: &[f64], enc: Encoding) -> Self {
        let p_on: Vec<f64> = h1_activations(p, v, h2).iter().map(|&a| classical_on_probability(a, enc)).collect();
        let z = p_on.iter().map(|q| 2.0 * q - 1.0).collect();
        Self { p_on, z, x: vec![0.0; p.m] }
    }

    /// Mean of the encoded unit value.
    fn mean(&self, enc: Encoding) -> Vec<f64> {
        let (off, on) = (enc.value(0), enc.value(1));
        self.p_on.iter().map(|q| off + (on - off) * q).collect()
    }
}

/// Shared view used by the samplers.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub params: &'a QidbmParams,
    pub encoding: Encoding,
    pub field: FieldConvention,
    pub mode: Mode,
}

impl<'a> Sampler<'a> {
    pub fn new(params: &'a QidbmParams, config: &CdConfig) -> Self {
        Self { params, encoding: config.encoding, field: config.field, mode: config.mode }
    }

    fn layer1(&self, v: &[f64], h2: &[f64]) -> Layer1 {
        match self.mode {
            Mode::Qidbm => Layer1::quantum(self.params, v, h2, self.encoding, self.field),
            Mode::Dbm => Layer1::classical(self.params, v, h2, self.encoding),
        }
    }

    /// `h1 | v, h2`.
    pub fn sample_h1(&self, state: &mut GibbsState, rng: &mut impl Rng) {
        let layer = self.layer1(&values(&state.v, self.encoding), &values(&state.h2, self.encoding));
        state.h1 = draw(&layer.p_on, rng);
        state.h1_z_expect = layer.z;
    }

    /// `v, h2 | h1`, visible first.
    pub fn sample_v_h2(&self, state: &mut GibbsState, rng: &mut impl Rng) {
        let h1 = values(&state.h1, self.encoding);
        state.v = sample_classical_layer(&v_activations(self.params, &h1), self.encoding, rng);
        state.h2 = sample_classical_layer(&h2_activations(self.params, &h1), self.encoding, rng);
    }

    /// One sweep: `(v, h2 | h1)` then `(h1 | v, h2)`.
    pub fn sweep(&self, state: &mut GibbsState, rng: &mut impl Rng) {
        self.sample_v_h2(state, rng);
        self.sample_h1(state, rng);
    }

    /// Deterministic mean-field reconstruction `P(v = on | E[h1 | v, h2 = 0])`.
    pub fn reconstruct(&self, v_bits: &[u8]) -> Vec<f64> {
        let v = values(v_bits, self.encoding);
        let mu = self.layer1(&v, &vec![0.0; self.params.n]).mean(self.encoding);
        v_activations(self.params, &mu).iter().map(|&a| classical_on_probability(a, self.encoding)).collect()
    }
}

/// Per-row sufficient statistics of one CD step.
struct RowStats {
    v_pos: Vec<f64>,
    mu1_pos: Vec<f64>,
    h2_pos: Vec<f64>,
    v_neg: Vec<f64>,
    h1_neg: Vec<f64>,
    h2_neg: Vec<f64>,
    x_pos: Vec<f64>,
    x_neg: Vec<f64>,
}

fn row_stats(s: &Sampler<'_>, data: &[u8], k: usize, rng: &mut impl Rng) -> RowStats {
    let enc = s.encoding;
    let v_pos = values(data, enc);
    // Positive phase: h2 enters with zero input until it has been sampled.
    let first = s.layer1(&v_pos, &vec![0.0; s.params.n]);
    let h1 = draw(&first.p_on, rng);
    let h2 = sample_classical_layer(&h2_activations(s.params, &values(&h1, enc)), enc, rng);
    let h2_pos = values(&h2, enc);
    let pos = s.layer1(&v_pos, &h2_pos);
    let mu1_pos = pos.mean(enc);

    let mut state = GibbsState { v: data.to_vec(), h1, h1_z_expect: first.z, h2 };
    for _ in 0..k {
        s.sweep(&mut state, rng);
    }
    let v_neg = values(&state.v, enc);
    let h2_neg = values(&state.h2, enc);
    let x_neg = s.layer1(&v_neg, &h2_neg).x;
    RowStats { v_pos, mu1_pos, h2_pos, v_neg, h1_neg: values(&state.h1, enc), h2_neg, x_pos: pos.x, x_neg }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CdDiagnostics {
    pub rows: usize,
    /// Mean squared difference between data and negative-phase visibles.
    pub sample_error: f64,
    /// Largest absolute weight change.
    pub max_update: f64,
}

/// One CD-k update on the listed rows of `data`. Row `r` draws from the
/// stream `(seed, epoch, batch, r)`.
pub fn cd_step(
    data: &BinaryDataset,
    rows: &[usize],
    params: &mut QidbmParams,
    config: &CdConfig,
    epoch: u64,
    batch: u64,
) -> Result<CdDiagnostics> {
    if data.d_v() != params.l {
        return Err(Error::DimensionMismatch(format!("data rows have {} bits, model has {} visible units", data.d_v(), params.l)));
    }
    if rows.is_empty() {
        return Ok(CdDiagnostics::default());
    }
    let stats: Vec<RowStats> = {
        let s = Sampler::new(params, config);
        rows.par_iter()
            .enumerate()
            .map(|(r, &i)| row_stats(&s, data.row(i), config.k, &mut row_stream(config.seed, epoch, batch, r as u64)))
            .collect()
    };
    let scale = config.learning_rate / rows.len() as f64;
    let (l, m, n) = (params.l, params.m, params.n);

    let w1_max = params
        .w1
        .par_chunks_mut(m)
        .enumerate()
        .map_init(
            || vec![0.0; m],
            |acc, (a, row)| {
                acc.fill(0.0);
                for s in &stats {
                    if s.v_pos[a] != 0.0 {
                        axpy(s.v_pos[a], &s.mu1_pos, acc);
                    }
                    if s.v_neg[a] != 0.0 {
                        axpy(-s.v_neg[a], &s.h1_neg, acc);
                    }
                }
                let mut mx = 0.0f64;
                for (w, d) in row.iter_mut().zip(acc.iter()) {
                    let delta = scale * d;
                    *w += delta;
                    mx = mx.max(delta.abs());
                }
                mx
            },
        )
        .reduce(|| 0.0, f64::max);

    let mut w2_max = 0.0f64;
    for j in 0..m {
        let mut acc = vec![0.0; n];
        for s in &stats {
            if s.mu1_pos[j] != 0.0 {
                axpy(s.mu1_pos[j], &s.h2_pos, &mut acc);
            }
            if s.h1_neg[j] != 0.0 {
                axpy(-s.h1_neg[j], &s.h2_neg, &mut acc);
            }
        }
        for (w, d) in params.w2[j * n..(j + 1) * n].iter_mut().zip(&acc) {
            let delta = scale * d;
            *w += delta;
            w2_max = w2_max.max(delta.abs());
        }
    }

    let bias_update = |b: &mut [f64], pos: &dyn Fn(&RowStats) -> &[f64], neg: &dyn Fn(&RowStats) -> &[f64]| {
        let mut acc = vec![0.0; b.len()];
        for s in &stats {
            axpy(1.0, pos(s), &mut acc);
            axpy(-1.0, neg(s), &mut acc);
        }
        for (x, d) in b.iter_mut().zip(&acc) {
            *x += scale * d;
        }
    };
    bias_update(&mut params.b_v, &|s| &s.v_pos, &|s| &s.v_neg);
    bias_update(&mut params.b_h1, &|s| &s.mu1_pos, &|s| &s.h1_neg);
    bias_update(&mut params.b_h2, &|s| &s.h2_pos, &|s| &s.h2_neg);
    if config.train_gamma {
        bias_update(&mut params.gamma, &|s| &s.x_pos, &|s| &s.x_neg);
    }

    let sample_error = stats
        .iter()
        .map(|s| s.v_pos.iter().zip(&s.v_neg).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / (rows.len() * l) as f64;
    Ok(CdDiagnostics { rows: rows.len(), sample_error, max_update: w1_max.max(w2_max) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon_error: f64,
    pub free_energy_train: f64,
    /// `NaN` when no held-out split was given.
    pub free_energy_heldout: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// Columns `epoch, recon_error, free_energy_train, free_energy_heldout[, seconds]`.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut s = String::from("epoch,recon_error,free_energy_train,free_energy_heldout");
        if with_seconds {
            s.push_str(",seconds");
        }
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}", e.epoch, e.recon_error, e.free_energy_train, e.free_energy_heldout));
            if with_seconds {
                s.push_str(&format!(",{}", e.seconds));
            }
            s.push('\n');
        }
        s
    }
}

fn check_modes(params: &QidbmParams, config: &CdConfig) -> Result<()> {
    config.validate()?;
    params.validate()?;
    if config.mode == Mode::Dbm && !params.is_classical() {
        return Err(Error::InvalidParameter("DBM mode requires every transverse field to be zero".into()));
    }
    Ok(())
}

/// Epoch loop over shuffled minibatches. `on_epoch` sees the parameters
/// after each epoch.
pub fn train(
    data: &BinaryDataset,
    heldout: Option<&BinaryDataset>,
    params: &mut QidbmParams,
    config: &CdConfig,
    on_epoch: &mut dyn FnMut(&EpochStats, &QidbmParams) -> Result<()>,
) -> Result<TrainReport> {
    check_modes(params, config)?;
    if data.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut shuffle_stream(config.seed, epoch as u64));
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            cd_step(data, rows, params, config, epoch as u64, b as u64)?;
            if let Some((name, k)) = params.first_non_finite() {
                return Err(Error::NonFinite(format!("{name}[{k}] after epoch {epoch}, batch {b}")));
            }
        }
        let s = Sampler::new(params, config);
        let stats = EpochStats {
            epoch,
            recon_error: reconstruction_error(&s, data),
            free_energy_train: mean_free_energy(&s, data),
            free_energy_heldout: heldout.map_or(f64::NAN, |h| mean_free_energy(&s, h)),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&stats, params)?;
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Mean squared error of the mean-field reconstruction.
pub fn reconstruction_error(s: &Sampler<'_>, data: &BinaryDataset) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let total: f64 = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let row = data.row(i);
            s.reconstruct(row).iter().zip(row).map(|(p, &b)| (b as f64 - p).powi(2)).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / (data.len() * data.d_v()) as f64
}

/// `ln Tr exp` of one `h1` unit, as a function of its activation.
#[inline]
fn unit_log_partition(activation: f64, gamma: f64, encoding: Encoding, convention: FieldConvention) -> f64 {
    let f = field_of(activation, encoding, convention);
    let offset = match (convention, encoding) {
        (FieldConvention::SpinConsistent, Encoding::ZeroOne) => f,
        _ => 0.0,
    };
    let d = f.hypot(gamma);
    // ln 2cosh d, stable for large d.
    offset + d + (-2.0 * d).exp().ln_1p()
}

/// `F(v, h2) = -b_vᵀv - b_h2ᵀh2 - Σ_j ln Tr exp(H_j)` with `h1` summed out.
pub fn free_energy(s: &Sampler<'_>, v_bits: &[u8], h2: &[f64]) -> f64 {
    let p = s.params;
    let v = values(v_bits, s.encoding);
    let act = h1_activations(p, &v, h2);
    let gamma = |j: usize| if s.mode == Mode::Dbm { 0.0 } else { p.gamma[j] };
    let hidden: f64 = act.iter().enumerate().map(|(j, &a)| unit_log_partition(a, gamma(j), s.encoding, s.field)).sum();
    -dot(&p.b_v, &v) - dot(&p.b_h2, h2) - hidden
}

/// Mean free energy with `h2` entering at zero input.
pub fn mean_free_energy(s: &Sampler<'_>, data: &BinaryDataset) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let zeros = vec![0.0; s.params.n];
    let f: Vec<f64> = (0..data.len()).into_par_iter().map(|i| free_energy(s, data.row(i), &zeros)).collect();
    f.iter().sum::<f64>() / data.len() as f64
}

/// Exact `-(1/N) Σ log P(v)` by enumerating `v` and `h2`.
pub fn exact_nll(params: &QidbmParams, data: &BinaryDataset, config: &CdConfig) -> Result<f64> {
    let s = Sampler::new(params, config);
    let log_p = exact_log_marginals(&s)?;
    if data.d_v() != params.l || data.is_empty() {
        return Err(Error::DimensionMismatch("held-out data does not match the model".into()));
    }
    let total: f64 = data.rows().map(|r| log_p[crate::data::basis::index_of(r) as usize]).sum();
    Ok(-total / data.len() as f64)
}

/// `log P(v)` for every visible pattern, indexed big-endian.
pub fn exact_log_marginals(s: &Sampler<'_>) -> Result<Vec<f64>> {
    let p = s.params;
    if p.l + p.n > EXACT_NLL_CAP {
        return Err(Error::QubitCap { what: "exact QiDBM likelihood".into(), qubits: p.l + p.n, cap: EXACT_NLL_CAP });
    }
    if s.field == FieldConvention::Raw && s.mode == Mode::Qidbm && s.encoding == Encoding::ZeroOne {
        return Err(Error::InvalidParameter("the raw field convention does not define a normalized model".into()));
    }
    let per_v: Vec<f64> = (0..1usize << p.l)
        .into_par_iter()
        .map(|vi| {
            let v = crate::data::basis::bits_of(vi as u64, p.l);
            let terms: Vec<f64> = (0..1u64 << p.n)
                .map(|hi| {
                    let h2 = values(&crate::data::basis::bits_of(hi, p.n), s.encoding);
                    -free_energy(s, &v, &h2)
                })
                .collect();
            log_sum_exp(&terms)
        })
        .collect();
    let log_z = log_sum_exp(&per_v);
    Ok(per_v.into_iter().map(|x| x - log_z).collect())
}

/// `n_samples` chains from uniform random states; `burn_in` sweeps, then one
/// more sweep whose visible layer is returned. Chain `c` uses its own stream.
pub fn generate(params: &QidbmParams, config: &CdConfig, n_samples: usize, burn_in: usize, seed: u64) -> Result<BinaryDataset> {
    check_modes(params, config)?;
    let s = Sampler::new(params, config);
    let rows: Vec<Vec<u8>> = (0..n_samples)
        .into_par_iter()
        .map(|c| {
            let mut rng = generate_stream(seed, c as u64);
            let mut state = GibbsState {
                v: (0..params.l).map(|_| rng.random::<bool>() as u8).collect(),
                h1: vec![0; params.m],
                h1_z_expect: vec![0.0; params.m],
                h2: (0..params.n).map(|_| rng.random::<bool>() as u8).collect(),
            };
            s.sample_h1(&mut state, &mut rng);
            for _ in 0..burn_in {
                s.sweep(&mut state, &mut rng);
            }
            s.sample_v_h2(&mut state, &mut rng);
            state.v
        })
        .collect();
    let provenance = crate::data::Provenance::new("qidbm-generate")
        .with_seed(seed)
        .with("burn_in", burn_in)
        .with("mode", format!("{:?}", config.mode).to_lowercase());
    BinaryDataset::new(params.l, rows.concat(), Encoding::ZeroOne, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use rand::SeedableRng;

    #[test]
    fn closed_form_examples() {
        let (z, x) = unit_expectations(0.8, 0.0);
        assert_eq!((z, x), (0.8f64.tanh(), 0.0));
        let (z, x) = unit_expectations(0.0, 1.3);
        assert!(z.abs() < 1e-16 && (x - 1.3f64.tanh()).abs() < 1e-16);
        let (z, x) = unit_expectations(1.0, 1.0);
        let expected = 2f64.sqrt().tanh() / 2f64.sqrt();
        assert!((z - expected).abs() < 1e-15 && (x - expected).abs() < 1e-15);
        assert!((expected - 0.628_18).abs() < 1e-5);
        assert_eq!(unit_expectations(0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn gamma_to_zero_continuity() {
        for f in [-3.0, -0.2, 0.0, 0.7, 4.0] {
            let (z, x) = unit_expectations(f, 1e-6);
            assert!((z - f64::tanh(f)).abs() < 1e-8 && x.abs() < 1e-6);
        }
    }

    #[test]
    fn classical_probabilities() {
        assert_eq!(classical_on_probability(0.0, Encoding::ZeroOne), 0.5);
        assert!((1.0 - classical_on_probability(30.0, Encoding::ZeroOne)) < 1e-13);
        // (1 + tanh t)/2 = sigmoid(2t)
        for t in [-2.0, -0.1, 0.4, 3.0] {
            assert!((quantum_on_probability(t, 0.0).0 - 0.5 * (1.0 + f64::tanh(t))).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_frequency_matches_probability() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = 0.6;
        let n = 100_000;
        let hits: usize = (0..n).map(|_| sample_classical_layer(&[a], Encoding::ZeroOne, &mut rng)[0] as usize).sum();
        let p = sigmoid(a);
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 3.0 * sd);

        let mut params = QidbmParams::zeros(1, 1, 1);
        params.gamma[0] = 0.9;
        let hits: usize = (0..n)
            .map(|_| sample_quantum_layer(&[0.0], &[0.0], &params, Encoding::ZeroOne, FieldConvention::SpinConsistent, &mut rng).0[0] as usize)
            .sum();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    fn toy_data(rows: usize, l: usize, seed: u64) -> BinaryDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bits = (0..rows * l).map(|_| rng.random::<bool>() as u8).collect();
        BinaryDataset::new(l, bits, Encoding::ZeroOne, Provenance::default()).unwrap()
    }

    #[test]
    fn saturated_model_gives_zero_update() {
        let pattern = [1u8, 0, 1];
        let data = BinaryDataset::new(3, pattern.repeat(4), Encoding::ZeroOne, Provenance::default()).unwrap();
        let mut p = QidbmParams::zeros(3, 2, 2);
        p.b_v = pattern.iter().map(|&b| if b == 1 { 50.0 } else { -50.0 }).collect();
        p.b_h1 = vec![50.0; 2];
        p.b_h2 = vec![50.0; 2];
        let before = p.clone();
        let config = CdConfig { batch_size: 4, k: 3, ..Default::default() };
        cd_step(&data, &[0, 1, 2, 3], &mut p, &config, 0, 0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn gamma_zero_matches_dbm_mode_bitwise() {
        let data = toy_data(30, 5, 1);
        let init = QidbmParams::init(5, 4, 3, 2);
        for enc in [Encoding::ZeroOne, Encoding::PlusMinus] {
            let base = CdConfig { batch_size: 7, epochs: 3, k: 2, learning_rate: 0.05, encoding: enc, ..Default::default() };
            let mut a = init.clone();
            let mut b = init.clone();
            train(&data, None, &mut a, &base, &mut |_, _| Ok(())).unwrap();
            train(&data, None, &mut b, &CdConfig { mode: Mode::Dbm, ..base.clone() }, &mut |_, _| Ok(())).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_is_replayable() {
        let data = toy_data(10, 4, 3);
        let config = CdConfig { batch_size: 3, epochs: 1, learning_rate: 0.1, ..Default::default() };
        let run = || {
            let mut p = QidbmParams::init(4, 3, 2, 5).with_gamma(&[0.5]).unwrap();
            train(&data, None, &mut p, &config, &mut |_, _| Ok(())).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_model_generates_uniform_bits() {
        let p = QidbmParams::zeros(6, 3, 2);
        let samples = generate(&p, &CdConfig::default(), 4000, 5, 1).unwrap();
        for a in 0..6 {
            let mean = samples.rows().map(|r| r[a] as f64).sum::<f64>() / 4000.0;
            assert!((mean - 0.5).abs() < 3.0 * (0.25f64 / 4000.0).sqrt());
        }
        assert_eq!(samples, generate(&p, &CdConfig::default(), 4000, 5, 1).unwrap());
    }

    #[test]
    fn exact_marginals_normalize() {
        let p = QidbmParams::init(4, 3, 2, 8).with_gamma(&[0.7]).unwrap();
        for enc in [Encoding::ZeroOne, Encoding::PlusMinus] {
            let config = CdConfig { encoding: enc, ..Default::default() };
            let lp = exact_log_marginals(&Sampler::new(&p, &config)).unwrap();
            assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let raw = CdConfig { field: FieldConvention::Raw, ..Default::default() };
        assert!(exact_log_marginals(&Sampler::new(&p, &raw)).is_err());
    }

    #[test]
    fn nan_parameters_abort_with_coordinates() {
        let data = toy_data(8, 3, 4);
        let mut p = QidbmParams::init(3, 2, 2, 1);
        let config = CdConfig { batch_size: 4, epochs: 1, learning_rate: f64::MAX, ..Default::default() };
        p.b_v[0] = f64::MAX;
        match train(&data, None, &mut p, &config, &mut |_, _| Ok(())) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch 0"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
