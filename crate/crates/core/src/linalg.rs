//! Dense complex linear algebra over finite-dimensional Hilbert spaces.
//!
//! Operators are stored densely. Subsystems of a composite space are ordered
//! visible-first, so tracing out the last factor is the common case.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Relative rank threshold: eigenvalues below `EPS_RANK_REL * max|λ|` count as zero.
pub const EPS_RANK_REL: f64 = 1e-12;
/// Relative tolerance for the Hermitian check.
pub const HERMITIAN_TOL_REL: f64 = 1e-12;
/// Absolute tolerance on the trace of a density operator.
pub const TRACE_TOL: f64 = 1e-10;
/// Most negative eigenvalue a density operator may carry.
pub const NEG_EIG_TOL: f64 = 1e-10;

const C_ZERO: C64 = C64::new(0.0, 0.0);
const C_ONE: C64 = C64::new(1.0, 0.0);

/// Rank threshold for a spectrum.
pub fn rank_threshold(eigenvalues: &[f64]) -> f64 {
    EPS_RANK_REL * eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Dense complex matrix.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    inner: DMatrix<C64>,
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows(), self.cols())?;
        for i in 0..self.rows() {
            write!(f, "  ")?;
            for j in 0..self.cols() {
                let z = self.inner[(i, j)];
                write!(f, "{:+.6}{:+.6}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { inner: DMatrix::from_element(rows, cols, C_ZERO) }
    }

    pub fn identity(n: usize) -> Self {
        Self { inner: DMatrix::identity(n, n) }
    }

    /// Builds a matrix from entries in row-major order.
    pub fn from_row_slice(rows: usize, cols: usize, entries: &[C64]) -> Result<Self> {
        if rows * cols != entries.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        Ok(Self { inner: DMatrix::from_row_slice(rows, cols, entries) })
    }

    /// Row-major real entries.
    pub fn from_real_rows(rows: usize, cols: usize, entries: &[f64]) -> Result<Self> {
        let c: Vec<C64> = entries.iter().map(|&x| C64::new(x, 0.0)).collect();
        Self::from_row_slice(rows, cols, &c)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> C64) -> Self {
        Self { inner: DMatrix::from_fn(rows, cols, f) }
    }

    pub fn from_diagonal(diag: &[C64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { C_ZERO })
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { C64::new(diag[i], 0.0) } else { C_ZERO })
    }

    pub fn from_dmatrix(inner: DMatrix<C64>) -> Self {
        Self { inner }
    }

    pub fn as_dmatrix(&self) -> &DMatrix<C64> {
        &self.inner
    }

    pub fn into_dmatrix(self) -> DMatrix<C64> {
        self.inner
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.inner[(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: C64) {
        self.inner[(i, j)] = value;
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                out.push(self.inner[(i, j)]);
            }
        }
        out
    }

    pub fn adjoint(&self) -> Self {
        Self { inner: self.inner.adjoint() }
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows().min(self.cols())).map(|i| self.inner[(i, i)]).sum()
    }

    pub fn scale(&self, c: C64) -> Self {
        Self { inner: &self.inner * c }
    }

    pub fn scale_real(&self, c: f64) -> Self {
        self.scale(C64::new(c, 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.inner.iter().fold(0.0_f64, |m, z| m.max(z.norm()))
    }

    /// Max-entry norm of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.inner.shape(), other.inner.shape(), "shape mismatch in max_abs_diff");
        self.inner
            .iter()
            .zip(other.inner.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.inner.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn try_matmul(&self, other: &Self) -> Result<Self> {
        if self.cols() != other.rows() {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        Ok(Self { inner: &self.inner * &other.inner })
    }

    /// `ab - ba`.
    pub fn commutator(a: &Self, b: &Self) -> Result<Self> {
        Ok(&a.try_matmul(b)? - &b.try_matmul(a)?)
    }

    /// `(A + A†) / 2`.
    pub fn hermitian_part(&self) -> Self {
        Self { inner: (&self.inner + self.inner.adjoint()) * C64::new(0.5, 0.0) }
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: Self) -> ComplexMatrix {
        ComplexMatrix { inner: &self.inner + &rhs.inner }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: Self) -> ComplexMatrix {
        ComplexMatrix { inner: &self.inner - &rhs.inner }
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: Self) -> ComplexMatrix {
        ComplexMatrix { inner: &self.inner * &rhs.inner }
    }
}

pub fn sigma_x() -> ComplexMatrix {
    ComplexMatrix::from_fn(2, 2, |i, j| if i != j { C_ONE } else { C_ZERO })
}

pub fn sigma_z() -> ComplexMatrix {
    ComplexMatrix::from_real_diagonal(&[1.0, -1.0])
}

/// Hermitian operator on a `dim`-dimensional space.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator {
    matrix: ComplexMatrix,
}

impl HermitianOperator {
    /// Validates squareness and `|A - A†|_max <= 1e-12 * |A|_max`.
    pub fn new(matrix: ComplexMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotSquare { rows: matrix.rows(), cols: matrix.cols() });
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("Hermitian operator entries".into()));
        }
        let deviation = matrix.max_abs_diff(&matrix.adjoint());
        if deviation > HERMITIAN_TOL_REL * matrix.max_abs() {
            return Err(Error::NotHermitian { deviation });
        }
        Ok(Self { matrix })
    }

    /// Projects a square matrix onto its Hermitian part.
    pub fn hermitized(matrix: ComplexMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotSquare { rows: matrix.rows(), cols: matrix.cols() });
        }
        Ok(Self { matrix: matrix.hermitian_part() })
    }

    pub(crate) fn from_matrix_unchecked(matrix: ComplexMatrix) -> Self {
        Self { matrix }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { matrix: ComplexMatrix::zeros(dim, dim) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { matrix: ComplexMatrix::identity(dim) }
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        Self { matrix: ComplexMatrix::from_real_diagonal(diag) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { matrix: self.matrix.scale_real(c) }
    }

    /// Real trace.
    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn eig(&self) -> Result<SpectralDecomposition> {
        herm_eig(self)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cannot add operators of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(Self { matrix: &self.matrix + &other.matrix })
    }

    /// `self + c * other`, in place.
    pub fn add_scaled(&mut self, c: f64, other: &Self) {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in add_scaled");
        self.matrix.inner += &other.matrix.inner * C64::new(c, 0.0);
    }

    /// `Tr(self · other)` as a real number.
    pub fn expectation(&self, other: &Self) -> f64 {
        trace_product_unchecked(&self.matrix, &other.matrix).re
    }
}

/// Density operator with explicit subsystem dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityOperator {
    dims: Vec<usize>,
    op: HermitianOperator,
}

fn check_dims(dims: &[usize], dim: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::InvalidDensity("no subsystem dimensions given".into()));
    }
    if let Some(d) = dims.iter().find(|&&d| d < 2) {
        return Err(Error::InvalidDensity(format!("subsystem dimension {d} is below 2")));
    }
    let prod: usize = dims.iter().product();
    if prod != dim {
        return Err(Error::DimensionMismatch(format!(
            "subsystem dims {dims:?} multiply to {prod}, operator has dimension {dim}"
        )));
    }
    Ok(())
}

impl DensityOperator {
    /// Validates trace and positivity.
    pub fn new(dims: Vec<usize>, matrix: ComplexMatrix) -> Result<Self> {
        Self::from_hermitian(dims, HermitianOperator::new(matrix)?)
    }

    pub fn from_hermitian(dims: Vec<usize>, op: HermitianOperator) -> Result<Self> {
        check_dims(&dims, op.dim())?;
        let tr = op.matrix().trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidDensity(format!("trace {tr} is not 1")));
        }
        let spec = herm_eig(&op)?;
        let min = spec.eigenvalues[0];
        if min < -NEG_EIG_TOL {
            return Err(Error::InvalidDensity(format!("negative eigenvalue {min:e}")));
        }
        Ok(Self { dims, op })
    }

    pub(crate) fn from_parts_unchecked(dims: Vec<usize>, op: HermitianOperator) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), op.dim());
        Self { dims, op }
    }

    pub fn maximally_mixed(dims: Vec<usize>) -> Result<Self> {
        let dim: usize = dims.iter().product();
        check_dims(&dims, dim)?;
        let op = HermitianOperator::identity(dim).scale(1.0 / dim as f64);
        Ok(Self { dims, op })
    }

    /// Diagonal state with the given probabilities.
    pub fn diagonal(dims: Vec<usize>, probs: &[f64]) -> Result<Self> {
        check_dims(&dims, probs.len())?;
        if let Some(p) = probs.iter().find(|p| !(**p >= -NEG_EIG_TOL)) {
            return Err(Error::InvalidDensity(format!("negative probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > TRACE_TOL {
            return Err(Error::InvalidDensity(format!("probabilities sum to {total}")));
        }
        Ok(Self { dims, op: HermitianOperator::from_real_diagonal(probs) })
    }

    /// `|ψ⟩⟨ψ|` for a normalized copy of `psi`.
    pub fn pure(dims: Vec<usize>, psi: &[C64]) -> Result<Self> {
        check_dims(&dims, psi.len())?;
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidDensity("state vector has zero or non-finite norm".into()));
        }
        let n = psi.len();
        let m = ComplexMatrix::from_fn(n, n, |i, j| psi[i] * psi[j].conj() / (norm * norm));
        Ok(Self { dims, op: HermitianOperator::hermitized(m)? })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        self.op.matrix()
    }

    pub fn operator(&self) -> &HermitianOperator {
        &self.op
    }

    pub fn trace(&self) -> f64 {
        self.op.trace()
    }

    /// Re-declares the subsystem structure without touching the matrix.
    pub fn with_dims(self, dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims, self.dim())?;
        Ok(Self { dims, op: self.op })
    }

    /// Groups the subsystems as `(d_a, dim / d_a)`.
    pub fn bipartite(self, dim_a: usize) -> Result<Self> {
        let dim = self.dim();
        if dim_a == 0 || dim % dim_a != 0 {
            return Err(Error::DimensionMismatch(format!(
                "dimension {dim_a} does not divide total dimension {dim}"
            )));
        }
        self.with_dims(vec![dim_a, dim / dim_a])
    }

    /// `self ⊗ other` with concatenated subsystem dims.
    pub fn tensor(&self, other: &Self) -> Self {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        let m = kron(self.matrix(), other.matrix());
        Self { dims, op: HermitianOperator::from_matrix_unchecked(m) }
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        Ok(herm_eig(&self.op)?.eigenvalues)
    }

    pub fn is_diagonal(&self, tol: f64) -> bool {
        let m = self.matrix();
        (0..self.dim()).all(|i| (0..self.dim()).all(|j| i == j || m.get(i, j).norm() <= tol))
    }

    pub fn diagonal_probabilities(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.matrix().get(i, i).re).collect()
    }
}

/// Eigen-decomposition `U Λ U†` with ascending eigenvalues.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns.
    pub eigenvectors: ComplexMatrix,
}

impl SpectralDecomposition {
    /// `U f(Λ) U†` for precomputed `f(λ_k)`.
    pub fn compose(&self, values: &[f64]) -> ComplexMatrix {
        let u = self.eigenvectors.as_dmatrix();
        let mut scaled = u.clone();
        for (k, &v) in values.iter().enumerate() {
            scaled.column_mut(k).scale_mut(v);
        }
        ComplexMatrix::from_dmatrix(scaled * u.adjoint())
    }

    pub fn reconstruct(&self) -> ComplexMatrix {
        self.compose(&self.eigenvalues)
    }

    pub fn rank_threshold(&self) -> f64 {
        rank_threshold(&self.eigenvalues)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().expect("empty spectrum")
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Column `k` of the eigenvector matrix.
    pub fn eigenvector(&self, k: usize) -> Vec<C64> {
        self.eigenvectors.as_dmatrix().column(k).iter().copied().collect()
    }

    /// `⟨u_k| A |u_k⟩` for every eigenvector.
    pub fn diagonal_in_basis(&self, a: &ComplexMatrix) -> Vec<f64> {
        let u = self.eigenvectors.as_dmatrix();
        let au = a.as_dmatrix() * u;
        (0..u.ncols())
            .map(|k| u.column(k).iter().zip(au.column(k).iter()).map(|(x, y)| (x.conj() * y).re).sum())
            .collect()
    }
}

fn normalize_phase(col: &mut [C64]) {
    let scale = col.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    if scale == 0.0 {
        return;
    }
    if let Some(first) = col.iter().find(|z| z.norm() > 1e-12 * scale).copied() {
        let phase = first.conj() / first.norm();
        for z in col.iter_mut() {
            *z *= phase;
        }
    }
}

fn lexicographic(a: &[C64], b: &[C64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im));
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

/// Full spectral decomposition of a Hermitian operator.
///
/// Eigenvalues ascend. Each eigenvector has its first non-negligible
/// component made real-positive; vectors inside a degenerate cluster
/// (eigenvalues within `1e-12 * max|λ|`) are ordered lexicographically.
pub fn herm_eig(h: &HermitianOperator) -> Result<SpectralDecomposition> {
    let n = h.dim();
    if n == 0 {
        return Err(Error::DimensionMismatch("empty operator".into()));
    }
    if !h.matrix().is_finite() {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    if n == 1 {
        return Ok(SpectralDecomposition {
            eigenvalues: vec![h.matrix().get(0, 0).re],
            eigenvectors: ComplexMatrix::identity(1),
        });
    }
    let eig = SymmetricEigen::try_new(h.matrix().as_dmatrix().clone(), f64::EPSILON, 10_000 * n)
        .ok_or(Error::EigenConvergence { dim: n })?;

    let mut pairs: Vec<(f64, Vec<C64>)> = (0..n)
        .map(|k| {
            let mut col: Vec<C64> = eig.eigenvectors.column(k).iter().copied().collect();
            normalize_phase(&mut col);
            (eig.eigenvalues[k], col)
        })
        .collect();
    if pairs.iter().any(|(v, c)| !v.is_finite() || c.iter().any(|z| !z.re.is_finite() || !z.im.is_finite())) {
        return Err(Error::EigenConvergence { dim: n });
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let tol = rank_threshold(&values);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && pairs[end].0 - pairs[start].0 <= tol {
            end += 1;
        }
        pairs[start..end].sort_by(|a, b| lexicographic(&a.1, &b.1));
        start = end;
    }

    let eigenvalues = pairs.iter().map(|p| p.0).collect();
    let eigenvectors = ComplexMatrix::from_fn(n, n, |i, k| pairs[k].1[i]);
    Ok(SpectralDecomposition { eigenvalues, eigenvectors })
}

/// `U f(Λ) U†`. Fails if `f` is non-finite at any eigenvalue.
pub fn mat_fn_hermitian(h: &HermitianOperator, f: impl Fn(f64) -> f64) -> Result<HermitianOperator> {
    let spec = herm_eig(h)?;
    mat_fn_spectral(&spec, f)
}

/// Same as [`mat_fn_hermitian`] on a precomputed decomposition.
pub fn mat_fn_spectral(spec: &SpectralDecomposition, f: impl Fn(f64) -> f64) -> Result<HermitianOperator> {
    let mut values = Vec::with_capacity(spec.eigenvalues.len());
    for &lambda in &spec.eigenvalues {
        let v = f(lambda);
        if !v.is_finite() {
            return Err(Error::FunctionUndefined { eigenvalue: lambda });
        }
        values.push(v);
    }
    Ok(HermitianOperator::from_matrix_unchecked(spec.compose(&values).hermitian_part()))
}

pub fn exp_hermitian(h: &HermitianOperator) -> Result<HermitianOperator> {
    mat_fn_hermitian(h, f64::exp)
}

/// Matrix logarithm; every eigenvalue must lie above the rank threshold.
pub fn log_hermitian(h: &HermitianOperator) -> Result<HermitianOperator> {
    let spec = herm_eig(h)?;
    require_full_rank(&spec)?;
    mat_fn_spectral(&spec, f64::ln)
}

/// Square root of a PSD operator; eigenvalues within the rank threshold of
/// zero are clamped.
pub fn sqrt_psd(h: &HermitianOperator) -> Result<HermitianOperator> {
    let spec = herm_eig(h)?;
    let tol = spec.rank_threshold().max(NEG_EIG_TOL);
    mat_fn_spectral(&spec, |x| if x >= 0.0 { x.sqrt() } else if x >= -tol { 0.0 } else { f64::NAN })
}

/// `A^{-1/2}` for a positive-definite operator.
pub fn inv_sqrt_pd(h: &HermitianOperator) -> Result<HermitianOperator> {
    let spec = herm_eig(h)?;
    require_full_rank(&spec)?;
    mat_fn_spectral(&spec, |x| 1.0 / x.sqrt())
}

pub(crate) fn require_full_rank(spec: &SpectralDecomposition) -> Result<()> {
    let threshold = spec.rank_threshold();
    let min = spec.min_eigenvalue();
    if min <= threshold || min <= 0.0 {
        return Err(Error::RankDeficient { min_eigenvalue: min, threshold });
    }
    Ok(())
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    ComplexMatrix::from_dmatrix(a.as_dmatrix().kronecker(b.as_dmatrix()))
}

/// Block-diagonal matrix `⊕_i blocks[i]`.
pub fn direct_sum(blocks: &[ComplexMatrix]) -> Result<ComplexMatrix> {
    if blocks.is_empty() {
        return Err(Error::DimensionMismatch("direct sum of zero blocks".into()));
    }
    if let Some(b) = blocks.iter().find(|b| !b.is_square()) {
        return Err(Error::NotSquare { rows: b.rows(), cols: b.cols() });
    }
    let n: usize = blocks.iter().map(|b| b.rows()).sum();
    let mut out = DMatrix::from_element(n, n, C_ZERO);
    let mut offset = 0;
    for b in blocks {
        let d = b.rows();
        out.view_mut((offset, offset), (d, d)).copy_from(b.as_dmatrix());
        offset += d;
    }
    Ok(ComplexMatrix::from_dmatrix(out))
}

/// Partial trace of a matrix over subsystem `subsystem` of `dims`.
pub fn partial_trace_matrix(m: &ComplexMatrix, dims: &[usize], subsystem: usize) -> Result<ComplexMatrix> {
    if subsystem >= dims.len() {
        return Err(Error::InvalidSubsystem { index: subsystem, count: dims.len() });
    }
    let total: usize = dims.iter().product();
    if m.rows() != total || m.cols() != total {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {}x{}, dims {dims:?} need {total}x{total}",
            m.rows(),
            m.cols()
        )));
    }
    let left: usize = dims[..subsystem].iter().product();
    let mid = dims[subsystem];
    let right: usize = dims[subsystem + 1..].iter().product();
    let out_dim = left * right;
    let src = m.as_dmatrix();
    let out = DMatrix::from_fn(out_dim, out_dim, |r, c| {
        let (a, cr) = (r / right, r % right);
        let (a2, cc) = (c / right, c % right);
        let mut acc = C_ZERO;
        for x in 0..mid {
            acc += src[((a * mid + x) * right + cr, (a2 * mid + x) * right + cc)];
        }
        acc
    });
    Ok(ComplexMatrix::from_dmatrix(out))
}

/// `Tr_subsystem(ρ)`; output keeps the remaining subsystem dims.
pub fn partial_trace(rho: &DensityOperator, subsystem: usize) -> Result<DensityOperator> {
    let dims = rho.dims();
    if subsystem >= dims.len() {
        return Err(Error::InvalidSubsystem { index: subsystem, count: dims.len() });
    }
    if dims.len() == 1 {
        return Err(Error::InvalidSubsystem { index: subsystem, count: 1 });
    }
    let m = partial_trace_matrix(rho.matrix(), dims, subsystem)?;
    let mut out_dims = dims.to_vec();
    out_dims.remove(subsystem);
    Ok(DensityOperator::from_parts_unchecked(out_dims, HermitianOperator::from_matrix_unchecked(m.hermitian_part())))
}

/// Traces out the trailing `dim_traced`-dimensional factor.
pub fn trace_out_last(m: &ComplexMatrix, dim_traced: usize) -> Result<ComplexMatrix> {
    if dim_traced == 0 || m.rows() % dim_traced != 0 {
        return Err(Error::DimensionMismatch(format!(
            "cannot trace a {dim_traced}-dimensional factor out of dimension {}",
            m.rows()
        )));
    }
    partial_trace_matrix(m, &[m.rows() / dim_traced, dim_traced], 1)
}

/// `Tr(a b)` without forming the product.
pub fn trace_product(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<C64> {
    if a.cols() != b.rows() || a.rows() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "trace_product of {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(trace_product_unchecked(a, b))
}

fn trace_product_unchecked(a: &ComplexMatrix, b: &ComplexMatrix) -> C64 {
    let (a, b) = (a.as_dmatrix(), b.as_dmatrix());
    let mut acc = C_ZERO;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}
