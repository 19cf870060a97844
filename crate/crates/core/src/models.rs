//! Parameterized Hamiltonians, Gibbs states and quantum Boltzmann machines.
//!
//! Gibbs states are `exp(+H)/Z`; a QBM carries its minus signs inside `H`:
//!
//! ```text
//! H = -Σ b_i σz_i - Σ_{i>j} w_ij σz_i σz_j - Σ Γ_i σx_i
//! ```
//!
//! Qubits are numbered from 0, visible first. Qubit 0 is the leftmost
//! Kronecker factor, and a basis index is the big-endian integer of its bits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::basis;
use crate::error::{Error, Result};
use crate::linalg::{
    direct_sum, herm_eig, kron, sigma_x, sigma_z, ComplexMatrix, DensityOperator, HermitianOperator,
    SpectralDecomposition,
};
use crate::qinfo::visible_marginal;

/// Largest qubit count handled by dense operators.
pub const EXACT_QUBIT_CAP: usize = 14;
pub const SPEC_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Z,
    X,
}

fn check_cap(what: &str, qubits: usize) -> Result<()> {
    if qubits > EXACT_QUBIT_CAP {
        return Err(Error::QubitCap { what: what.into(), qubits, cap: EXACT_QUBIT_CAP });
    }
    Ok(())
}

fn embed(total: usize, factors: &[(usize, ComplexMatrix)]) -> ComplexMatrix {
    let mut acc = ComplexMatrix::identity(1);
    for q in 0..total {
        let f = factors.iter().find(|(s, _)| *s == q).map(|(_, m)| m.clone()).unwrap_or_else(|| ComplexMatrix::identity(2));
        acc = kron(&acc, &f);
    }
    acc
}

/// `I ⊗ … ⊗ σ^axis ⊗ … ⊗ I` with the Pauli on `site` (0-based).
pub fn pauli_term(total_qubits: usize, site: usize, axis: Axis) -> Result<HermitianOperator> {
    if site >= total_qubits {
        return Err(Error::InvalidSubsystem { index: site, count: total_qubits });
    }
    check_cap("Pauli term", total_qubits)?;
    let p = match axis {
        Axis::Z => sigma_z(),
        Axis::X => sigma_x(),
    };
    Ok(HermitianOperator::from_matrix_unchecked(embed(total_qubits, &[(site, p)])))
}

/// `σz_i σz_j` as a diagonal operator.
pub fn zz_term(total_qubits: usize, i: usize, j: usize) -> Result<HermitianOperator> {
    if i >= total_qubits || j >= total_qubits || i == j {
        return Err(Error::InvalidSubsystem { index: i.max(j), count: total_qubits });
    }
    check_cap("coupling term", total_qubits)?;
    let diag: Vec<f64> =
        (0..1usize << total_qubits).map(|k| basis::spin(k, i, total_qubits) * basis::spin(k, j, total_qubits)).collect();
    Ok(HermitianOperator::from_real_diagonal(&diag))
}

/// `H(θ) = Σ_r θ_r H_r`.
#[derive(Clone, Debug)]
pub struct ParamHamiltonian {
    dims: Vec<usize>,
    terms: Vec<HermitianOperator>,
    theta: Vec<f64>,
}

impl ParamHamiltonian {
    pub fn new(dims: Vec<usize>, terms: Vec<HermitianOperator>, theta: Vec<f64>) -> Result<Self> {
        let dim: usize = dims.iter().product();
        if terms.len() != theta.len() {
            return Err(Error::DimensionMismatch(format!("{} terms but {} parameters", terms.len(), theta.len())));
        }
        if let Some(t) = terms.iter().find(|t| t.dim() != dim) {
            return Err(Error::DimensionMismatch(format!("term of dimension {} in a {dim}-dimensional model", t.dim())));
        }
        check_finite(&theta)?;
        Ok(Self { dims, terms, theta })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn terms(&self) -> &[HermitianOperator] {
        &self.terms
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch(format!("expected {} parameters, got {}", self.theta.len(), theta.len())));
        }
        check_finite(theta)?;
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_theta(theta)?;
        Ok(out)
    }

    /// Assembled `H(θ)`.
    pub fn hamiltonian(&self) -> HermitianOperator {
        let mut h = HermitianOperator::zeros(self.dim());
        for (t, &c) in self.terms.iter().zip(&self.theta) {
            if c != 0.0 {
                h.add_scaled(c, t);
            }
        }
        h
    }

    /// `Tr(ρ H_r)` for every term.
    pub fn expectations(&self, rho: &DensityOperator) -> Vec<f64> {
        self.terms.iter().map(|t| rho.operator().expectation(t)).collect()
    }
}

fn check_finite(theta: &[f64]) -> Result<()> {
    if let Some(k) = theta.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {k} = {}", theta[k])));
    }
    Ok(())
}

/// Normalized Gibbs state together with `log Z`.
#[derive(Clone, Debug)]
pub struct Gibbs {
    pub rho: DensityOperator,
    pub log_z: f64,
    pub spectrum: SpectralDecomposition,
}

/// `exp(H)/Tr exp(H)` via the spectral decomposition with a max shift.
pub fn gibbs(h: &HermitianOperator, dims: Vec<usize>) -> Result<Gibbs> {
    let spectrum = herm_eig(h)?;
    let shift = spectrum.max_eigenvalue();
    let weights: Vec<f64> = spectrum.eigenvalues.iter().map(|&l| (l - shift).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / sum).collect();
    let m = spectrum.compose(&probs).hermitian_part();
    let rho = DensityOperator::from_parts_unchecked(dims, HermitianOperator::from_matrix_unchecked(m));
    Ok(Gibbs { rho, log_z: shift + sum.ln(), spectrum })
}

pub fn gibbs_state(h: &ParamHamiltonian) -> Result<DensityOperator> {
    Ok(gibbs(&h.hamiltonian(), h.dims().to_vec())?.rho)
}

/// `log Tr exp H(θ)`.
pub fn log_partition(h: &ParamHamiltonian) -> Result<f64> {
    let spec = herm_eig(&h.hamiltonian())?;
    let shift = spec.max_eigenvalue();
    Ok(shift + spec.eigenvalues.iter().map(|&l| (l - shift).exp()).sum::<f64>().ln())
}

/// `Tr_L ρ` for a joint state over `d_v` visible qubits.
pub fn model_marginal(rho: &DensityOperator, d_v: usize) -> Result<DensityOperator> {
    if d_v == 0 || d_v >= usize::BITS as usize || rho.dim() % (1 << d_v) != 0 || rho.dim() == 1 << d_v {
        return Err(Error::DimensionMismatch(format!("{d_v} visible qubits do not split dimension {}", rho.dim())));
    }
    visible_marginal(rho, 1 << d_v)
}

/// `Tr(η_V log ρ_V)`; `-∞` when `η_V` has weight on the kernel of `ρ_V`.
pub fn log_likelihood(eta_v: &DensityOperator, rho_v: &DensityOperator) -> Result<f64> {
    if eta_v.dim() != rho_v.dim() {
        return Err(Error::DimensionMismatch(format!("η_V has dimension {}, ρ_V has {}", eta_v.dim(), rho_v.dim())));
    }
    let spec = herm_eig(rho_v.operator())?;
    let thr = spec.rank_threshold();
    let weights = spec.diagonal_in_basis(eta_v.matrix());
    let mut acc = 0.0;
    for (&l, &w) in spec.eigenvalues.iter().zip(&weights) {
        if l > thr {
            acc += w * l.ln();
        } else if w > 1e-12 {
            return Ok(f64::NEG_INFINITY);
        }
    }
    Ok(acc)
}

/// One parameter slot of a QBM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QbmTerm {
    /// `-σz_i`
    Bias(usize),
    /// `-σz_i σz_j` with `i > j`
    Coupling(usize, usize),
    /// `-σx_i`
    Transverse(usize),
}

/// Quantum Boltzmann machine with `m` visible and `n` hidden qubits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QbmSpec {
    #[serde(default = "spec_version")]
    pub version: u32,
    pub m: usize,
    pub n: usize,
    /// σz biases, length `m + n`.
    pub b: Vec<f64>,
    /// Symmetric couplings with zero diagonal, `(m + n) x (m + n)`.
    pub w: Vec<Vec<f64>>,
    /// σx biases, length `m + n`.
    pub gamma: Vec<f64>,
    pub seed: u64,
}

fn spec_version() -> u32 {
    SPEC_VERSION
}

impl QbmSpec {
    pub fn zeros(m: usize, n: usize) -> Self {
        let t = m + n;
        Self { version: SPEC_VERSION, m, n, b: vec![0.0; t], w: vec![vec![0.0; t]; t], gamma: vec![0.0; t], seed: 0 }
    }

    /// Biases and couplings uniform in `[-scale, scale]`; hidden transverse
    /// fields set to `hidden_gamma`.
    pub fn random(m: usize, n: usize, scale: f64, hidden_gamma: f64, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self::zeros(m, n);
        spec.seed = seed;
        let t = m + n;
        for i in 0..t {
            spec.b[i] = rng.random_range(-scale..=scale);
        }
        for i in 0..t {
            for j in 0..i {
                let v = rng.random_range(-scale..=scale);
                spec.w[i][j] = v;
                spec.w[j][i] = v;
            }
        }
        for g in &mut spec.gamma[m..] {
            *g = hidden_gamma;
        }
        spec
    }

    pub fn total(&self) -> usize {
        self.m + self.n
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.total();
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidParameter("a QBM needs at least one visible and one hidden qubit".into()));
        }
        if self.version != SPEC_VERSION {
            return Err(Error::InvalidParameter(format!("unsupported model spec version {}", self.version)));
        }
        if self.b.len() != t || self.gamma.len() != t {
            return Err(Error::DimensionMismatch(format!("b and gamma need {t} entries")));
        }
        if self.w.len() != t || self.w.iter().any(|r| r.len() != t) {
            return Err(Error::DimensionMismatch(format!("w must be {t}x{t}")));
        }
        for i in 0..t {
            if self.w[i][i] != 0.0 {
                return Err(Error::InvalidParameter(format!("w[{i}][{i}] must be zero")));
            }
            for j in 0..i {
                if self.w[i][j] != self.w[j][i] {
                    return Err(Error::InvalidParameter(format!("w is not symmetric at ({i}, {j})")));
                }
            }
        }
        let all = self.b.iter().chain(self.gamma.iter()).chain(self.w.iter().flatten());
        if all.clone().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("model spec parameter".into()));
        }
        Ok(())
    }

    /// True iff no visible qubit carries a transverse field.
    pub fn is_cqlvm(&self) -> bool {
        self.gamma[..self.m].iter().all(|&g| g == 0.0)
    }

    /// Every term: biases, couplings `(i, j)` for `i > j` in row order, then
    /// transverse fields.
    pub fn all_terms(&self) -> Vec<QbmTerm> {
        let t = self.total();
        let mut out: Vec<QbmTerm> = (0..t).map(QbmTerm::Bias).collect();
        for i in 0..t {
            for j in 0..i {
                out.push(QbmTerm::Coupling(i, j));
            }
        }
        out.extend((0..t).map(QbmTerm::Transverse));
        out
    }

    /// Terms of the block-diagonal family: everything except visible
    /// transverse fields.
    pub fn cqlvm_terms(&self) -> Vec<QbmTerm> {
        self.all_terms().into_iter().filter(|t| !matches!(t, QbmTerm::Transverse(i) if *i < self.m)).collect()
    }

    pub fn get(&self, term: QbmTerm) -> f64 {
        match term {
            QbmTerm::Bias(i) => self.b[i],
            QbmTerm::Coupling(i, j) => self.w[i][j],
            QbmTerm::Transverse(i) => self.gamma[i],
        }
    }

    pub fn set(&mut self, term: QbmTerm, value: f64) {
        match term {
            QbmTerm::Bias(i) => self.b[i] = value,
            QbmTerm::Coupling(i, j) => {
                self.w[i][j] = value;
                self.w[j][i] = value;
            }
            QbmTerm::Transverse(i) => self.gamma[i] = value,
        }
    }

    pub fn theta(&self, terms: &[QbmTerm]) -> Vec<f64> {
        terms.iter().map(|&t| self.get(t)).collect()
    }

    pub fn set_theta(&mut self, terms: &[QbmTerm], theta: &[f64]) {
        for (&t, &v) in terms.iter().zip(theta) {
            self.set(t, v);
        }
    }

    pub fn to_json(&self) -> String {
        crate::data::dump::to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::InvalidParameter(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn term_operator(total: usize, term: QbmTerm) -> Result<HermitianOperator> {
    Ok(match term {
        QbmTerm::Bias(i) => pauli_term(total, i, Axis::Z)?.scale(-1.0),
        QbmTerm::Coupling(i, j) => zz_term(total, i, j)?.scale(-1.0),
        QbmTerm::Transverse(i) => pauli_term(total, i, Axis::X)?.scale(-1.0),
    })
}

/// Dense QBM Hamiltonian over the given parameter slots.
pub fn build_qbm_hamiltonian_terms(spec: &QbmSpec, terms: &[QbmTerm]) -> Result<ParamHamiltonian> {
    spec.validate()?;
    let total = spec.total();
    check_cap("dense QBM", total)?;
    let ops = terms.iter().map(|&t| term_operator(total, t)).collect::<Result<Vec<_>>>()?;
    ParamHamiltonian::new(vec![2; total], ops, spec.theta(terms))
}

/// Dense QBM Hamiltonian with every parameter slot.
pub fn build_qbm_hamiltonian(spec: &QbmSpec) -> Result<ParamHamiltonian> {
    build_qbm_hamiltonian_terms(spec, &spec.all_terms())
}

/// Term of a block-diagonal model: `H_{i,r} = (Π_{s∈visible} spin_s(i)) A_r`.
#[derive(Clone, Debug)]
pub struct CqTerm {
    pub visible: Vec<usize>,
    pub hidden: HermitianOperator,
}

/// Block-diagonal QBM: one `2^n`-dimensional block per visible basis state.
#[derive(Clone, Debug)]
pub struct CqlvmModel {
    m: usize,
    n: usize,
    slots: Vec<QbmTerm>,
    terms: Vec<CqTerm>,
    theta: Vec<f64>,
}

/// Extracts the hidden-space blocks by clamping visible spins.
pub fn cqlvm_blocks(spec: &QbmSpec) -> Result<CqlvmModel> {
    spec.validate()?;
    if !spec.is_cqlvm() {
        let site = spec.gamma[..spec.m].iter().position(|&g| g != 0.0).unwrap();
        return Err(Error::NotCqlvm(format!(
            "visible qubit {site} has transverse field {}; only hidden qubits may carry σx terms",
            spec.gamma[site]
        )));
    }
    check_cap("hidden block", spec.n)?;
    let (m, n) = (spec.m, spec.n);
    let hid = |i: usize| i - m;
    let slots = spec.cqlvm_terms();
    let terms = slots
        .iter()
        .map(|&t| {
            let minus_id = || HermitianOperator::identity(1 << n).scale(-1.0);
            Ok(match t {
                QbmTerm::Bias(i) if i < m => CqTerm { visible: vec![i], hidden: minus_id() },
                QbmTerm::Bias(i) => CqTerm { visible: vec![], hidden: pauli_term(n, hid(i), Axis::Z)?.scale(-1.0) },
                QbmTerm::Coupling(i, j) if i < m => CqTerm { visible: vec![i, j], hidden: minus_id() },
                QbmTerm::Coupling(i, j) if j < m => {
                    CqTerm { visible: vec![j], hidden: pauli_term(n, hid(i), Axis::Z)?.scale(-1.0) }
                }
                QbmTerm::Coupling(i, j) => CqTerm { visible: vec![], hidden: zz_term(n, hid(i), hid(j))?.scale(-1.0) },
                QbmTerm::Transverse(i) => CqTerm { visible: vec![], hidden: pauli_term(n, hid(i), Axis::X)?.scale(-1.0) },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let theta = spec.theta(&slots);
    Ok(CqlvmModel { m, n, slots, terms, theta })
}

impl CqlvmModel {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_blocks(&self) -> usize {
        1 << self.m
    }

    pub fn hidden_dim(&self) -> usize {
        1 << self.n
    }

    pub fn slots(&self) -> &[QbmTerm] {
        &self.slots
    }

    pub fn terms(&self) -> &[CqTerm] {
        &self.terms
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch(format!("expected {} parameters, got {}", self.theta.len(), theta.len())));
        }
        check_finite(theta)?;
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    /// Sign multiplying term `r` inside block `i`.
    #[inline]
    pub fn sign(&self, r: usize, block: usize) -> f64 {
        self.terms[r].visible.iter().map(|&s| basis::spin(block, s, self.m)).product()
    }

    /// `H_i(θ)` for visible basis state `i`.
    pub fn block_hamiltonian(&self, block: usize) -> HermitianOperator {
        let mut h = HermitianOperator::zeros(self.hidden_dim());
        for (r, (t, &c)) in self.terms.iter().zip(&self.theta).enumerate() {
            if c != 0.0 {
                h.add_scaled(c * self.sign(r, block), &t.hidden);
            }
        }
        h
    }

    pub fn blocks(&self) -> Vec<HermitianOperator> {
        (0..self.n_blocks()).into_par_iter().map(|i| self.block_hamiltonian(i)).collect()
    }

    /// `⊕_i H_i`; refused above the dense cap.
    pub fn dense_hamiltonian(&self) -> Result<HermitianOperator> {
        check_cap("dense CQ-LVM", self.m + self.n)?;
        let blocks: Vec<ComplexMatrix> = self.blocks().into_iter().map(|b| b.into_matrix()).collect();
        Ok(HermitianOperator::from_matrix_unchecked(direct_sum(&blocks)?))
    }

    /// Per-block spectra and the normalized block Gibbs state.
    pub fn block_gibbs(&self) -> Result<BlockGibbs> {
        let spectra =
            (0..self.n_blocks()).into_par_iter().map(|i| herm_eig(&self.block_hamiltonian(i))).collect::<Result<Vec<_>>>()?;
        let log_tr_exp: Vec<f64> = spectra
            .iter()
            .map(|s| {
                let shift = s.max_eigenvalue();
                shift + s.eigenvalues.iter().map(|&l| (l - shift).exp()).sum::<f64>().ln()
            })
            .collect();
        let log_z = log_sum_exp(&log_tr_exp);
        Ok(BlockGibbs { m: self.m, n: self.n, spectra, log_tr_exp, log_z })
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Gibbs state `ρ = ⊕_i ρ_L(i)` of a block-diagonal model.
#[derive(Clone, Debug)]
pub struct BlockGibbs {
    m: usize,
    n: usize,
    spectra: Vec<SpectralDecomposition>,
    /// `log Tr exp H_i`.
    pub log_tr_exp: Vec<f64>,
    pub log_z: f64,
}

impl BlockGibbs {
    /// `P(v_i) = Tr ρ_L(i)`.
    pub fn visible_probabilities(&self) -> Vec<f64> {
        self.log_tr_exp.iter().map(|&l| (l - self.log_z).exp()).collect()
    }

    /// `ρ_L(i|θ) = exp(H_i) / Tr exp(H_i)`.
    pub fn conditional(&self, block: usize) -> HermitianOperator {
        let s = &self.spectra[block];
        let shift = s.max_eigenvalue();
        let w: Vec<f64> = s.eigenvalues.iter().map(|&l| (l - shift).exp()).collect();
        let sum: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / sum).collect();
        HermitianOperator::from_matrix_unchecked(s.compose(&p).hermitian_part())
    }

    /// `S(ρ_L(i|θ))` from the block spectrum.
    pub fn conditional_entropy(&self, block: usize) -> f64 {
        let s = &self.spectra[block];
        let shift = s.max_eigenvalue();
        let log_sum = self.log_tr_exp[block] - shift;
        s.eigenvalues
            .iter()
            .map(|&l| {
                let log_q = l - shift - log_sum;
                let q = log_q.exp();
                if q > 0.0 { -q * log_q } else { 0.0 }
            })
            .sum()
    }

    /// `ρ_L(i) = P(v_i) ρ_L(i|θ)`.
    pub fn block(&self, block: usize) -> HermitianOperator {
        self.conditional(block).scale((self.log_tr_exp[block] - self.log_z).exp())
    }

    /// Dense `⊕_i ρ_L(i)`; refused above the dense cap.
    pub fn dense_state(&self) -> Result<DensityOperator> {
        check_cap("dense CQ-LVM state", self.m + self.n)?;
        let blocks: Vec<ComplexMatrix> = (0..1 << self.m).map(|i| self.block(i).into_matrix()).collect();
        let m = direct_sum(&blocks)?;
        Ok(DensityOperator::from_parts_unchecked(vec![2; self.m + self.n], HermitianOperator::from_matrix_unchecked(m)))
    }

    /// `Σ_i p_i log P(v_i)`; `-∞` never occurs since every block has full rank.
    pub fn log_likelihood(&self, p_data: &[f64]) -> f64 {
        p_data
            .iter()
            .zip(&self.log_tr_exp)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * (l - self.log_z))
            .sum()
    }
}
