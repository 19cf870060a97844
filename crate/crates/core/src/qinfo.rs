//! Entropies, the Petz recovery map for the partial trace, and the quantum
//! information projection under the sufficiency condition.
//!
//! Bipartite inputs split as `ℋ_V ⊗ ℋ_L` with `L` last. When a function
//! receives a visible operator `ω` and a joint `ρ`, the latent dimension is
//! `dim ρ / dim ω`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{
    herm_eig, inv_sqrt_pd, kron, log_hermitian, rank_threshold, require_full_rank, sqrt_psd, trace_out_last,
    ComplexMatrix, DensityOperator, HermitianOperator, C64,
};

/// Trace drift that the Petz map may silently renormalize.
pub const PETZ_TRACE_DRIFT: f64 = 1e-9;
/// Relative tolerance for `[ω, Tr_L ρ] = 0`.
pub const COMMUTATOR_TOL_REL: f64 = 1e-9;
/// Entrywise tolerance for reassembling a certified block decomposition.
pub const REASSEMBLY_TOL: f64 = 1e-8;

const BASIS_ATTEMPTS: u64 = 3;

/// Rank and support projector of a PSD operator.
#[derive(Clone, Debug)]
pub struct SupportInfo {
    pub rank: usize,
    pub support_projector: HermitianOperator,
}

pub fn support_info(h: &HermitianOperator) -> Result<SupportInfo> {
    let spec = herm_eig(h)?;
    let thr = spec.rank_threshold();
    let mask: Vec<f64> = spec.eigenvalues.iter().map(|&l| if l > thr { 1.0 } else { 0.0 }).collect();
    let rank = mask.iter().filter(|&&m| m == 1.0).count();
    let p = spec.compose(&mask).hermitian_part();
    Ok(SupportInfo { rank, support_projector: HermitianOperator::new(p)? })
}

/// `S(ρ) = -Σ λ log λ` over eigenvalues above the rank threshold, in nats.
pub fn von_neumann_entropy(rho: &DensityOperator) -> Result<f64> {
    let values = herm_eig(rho.operator())?.eigenvalues;
    let thr = rank_threshold(&values);
    Ok(-values.iter().filter(|&&l| l > thr).map(|&l| l * l.ln()).sum::<f64>())
}

/// Umegaki relative entropy `Tr ω log ω - Tr ω log ρ`.
///
/// Returns `f64::INFINITY` when `ker ρ ⊄ ker ω` numerically.
pub fn relative_entropy(omega: &DensityOperator, rho: &DensityOperator) -> Result<f64> {
    if omega.dim() != rho.dim() {
        return Err(Error::DimensionMismatch(format!(
            "relative entropy between dimensions {} and {}",
            omega.dim(),
            rho.dim()
        )));
    }
    let so = herm_eig(omega.operator())?;
    let sr = herm_eig(rho.operator())?;
    let thr_o = so.rank_threshold();
    let thr_r = sr.rank_threshold();

    // ⟨u_k|ω|u_k⟩ in the eigenbasis of ρ.
    let weights = sr.diagonal_in_basis(omega.matrix());
    let mut cross = 0.0;
    for (&lambda, &w) in sr.eigenvalues.iter().zip(&weights) {
        if lambda > thr_r {
            cross += w * lambda.ln();
        } else if w > thr_o.max(1e-12) {
            return Ok(f64::INFINITY);
        }
    }
    let self_term: f64 = so.eigenvalues.iter().filter(|&&l| l > thr_o).map(|&l| l * l.ln()).sum();
    Ok(self_term - cross)
}

fn latent_dim(rho: &DensityOperator, omega_dim: usize) -> Result<usize> {
    if omega_dim == 0 || rho.dim() % omega_dim != 0 || rho.dim() / omega_dim < 2 {
        return Err(Error::DimensionMismatch(format!(
            "visible dimension {omega_dim} does not split joint dimension {}",
            rho.dim()
        )));
    }
    Ok(rho.dim() / omega_dim)
}

/// Splits `ρ`'s subsystem dims into a visible prefix of size `d_v` and the rest;
/// falls back to `[d_v]`, `[dim / d_v]` when no prefix matches.
fn split_dims(rho: &DensityOperator, d_v: usize) -> (Vec<usize>, Vec<usize>) {
    let dims = rho.dims();
    let mut acc = 1;
    for k in 0..dims.len() {
        if acc == d_v && k > 0 {
            return (dims[..k].to_vec(), dims[k..].to_vec());
        }
        acc *= dims[k];
    }
    (vec![d_v], vec![rho.dim() / d_v])
}

fn joint_dims(rho: &DensityOperator, d_v: usize) -> Vec<usize> {
    let (mut v, l) = split_dims(rho, d_v);
    v.extend(l);
    v
}

/// Marginal on the visible factor of dimension `d_v`.
pub fn visible_marginal(rho: &DensityOperator, d_v: usize) -> Result<DensityOperator> {
    let d_l = latent_dim(rho, d_v)?;
    let m = trace_out_last(rho.matrix(), d_l)?.hermitian_part();
    Ok(DensityOperator::from_parts_unchecked(split_dims(rho, d_v).0, HermitianOperator::from_matrix_unchecked(m)))
}

/// Petz recovery map for the partial trace:
/// `ρ^{1/2} ((ρ_V^{-1/2} ω ρ_V^{-1/2}) ⊗ I_L) ρ^{1/2}`.
pub fn petz_recovery(rho: &DensityOperator, omega: &DensityOperator) -> Result<DensityOperator> {
    let d_v = omega.dim();
    let d_l = latent_dim(rho, d_v)?;
    let spec = herm_eig(rho.operator())?;
    require_full_rank(&spec)?;
    let sqrt_rho = spec.compose(&spec.eigenvalues.iter().map(|l| l.sqrt()).collect::<Vec<_>>());

    let rho_v = HermitianOperator::from_matrix_unchecked(trace_out_last(rho.matrix(), d_l)?.hermitian_part());
    let inv = inv_sqrt_pd(&rho_v)?;
    let inner = &(inv.matrix() * omega.matrix()) * inv.matrix();
    let lifted = kron(&inner, &ComplexMatrix::identity(d_l));
    let out = (&(&sqrt_rho * &lifted) * &sqrt_rho).hermitian_part();

    let tr = out.trace().re;
    if (tr - 1.0).abs() > PETZ_TRACE_DRIFT {
        return Err(Error::InvalidDensity(format!("Petz output trace {tr} drifted beyond {PETZ_TRACE_DRIFT:e}")));
    }
    let out = out.scale_real(1.0 / tr);
    let op = HermitianOperator::from_matrix_unchecked(out);
    let min = herm_eig(&op)?.min_eigenvalue();
    if min < -1e-9 {
        return Err(Error::InvalidDensity(format!("Petz output has eigenvalue {min:e}")));
    }
    Ok(DensityOperator::from_parts_unchecked(joint_dims(rho, d_v), op))
}

/// Outcome of the saturation test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuskaiCheck {
    pub holds: bool,
    pub residual: f64,
}

/// `‖(log ω - log ρ) - (log Tr_L ω - log Tr_L ρ) ⊗ I‖_max ≤ tol`, with `L` the
/// last subsystem of `ρ`. Both operators must be full rank.
pub fn check_ruskai(omega: &DensityOperator, rho: &DensityOperator, tol: f64) -> Result<RuskaiCheck> {
    if omega.dim() != rho.dim() {
        return Err(Error::DimensionMismatch(format!("ω has dimension {}, ρ has {}", omega.dim(), rho.dim())));
    }
    let d_l = *rho.dims().last().unwrap();
    if rho.dims().len() < 2 {
        return Err(Error::InvalidSubsystem { index: 1, count: 1 });
    }
    let full_rank_log = |h: &HermitianOperator, what: &str| {
        log_hermitian(h).map_err(|e| match e {
            Error::RankDeficient { .. } => Error::SupportViolation(format!("{what} is not full rank: {e}")),
            other => other,
        })
    };
    let log_o = full_rank_log(omega.operator(), "ω")?;
    let log_r = full_rank_log(rho.operator(), "ρ")?;
    let ov = HermitianOperator::from_matrix_unchecked(trace_out_last(omega.matrix(), d_l)?.hermitian_part());
    let rv = HermitianOperator::from_matrix_unchecked(trace_out_last(rho.matrix(), d_l)?.hermitian_part());
    let log_ov = full_rank_log(&ov, "Tr_L ω")?;
    let log_rv = full_rank_log(&rv, "Tr_L ρ")?;
    let lhs = log_o.matrix() - log_r.matrix();
    let rhs = kron(&(log_ov.matrix() - log_rv.matrix()), &ComplexMatrix::identity(d_l));
    let residual = lhs.max_abs_diff(&rhs);
    Ok(RuskaiCheck { holds: residual <= tol, residual })
}

/// Evidence for (or against) the sufficiency condition.
#[derive(Clone, Debug)]
pub struct ConditionSCertificate {
    pub holds: bool,
    /// Orthonormal visible basis `{x_i}` as columns.
    pub basis: Option<ComplexMatrix>,
    pub alphas: Vec<f64>,
    pub blocks: Vec<DensityOperator>,
    pub violation_report: String,
}

impl ConditionSCertificate {
    fn fail(report: impl Into<String>) -> Self {
        Self { holds: false, basis: None, alphas: vec![], blocks: vec![], violation_report: report.into() }
    }

    /// `Σ α_i x_i x_i† ⊗ ρ_B(i)`.
    pub fn reassemble(&self) -> Option<ComplexMatrix> {
        let basis = self.basis.as_ref()?;
        let d_v = basis.rows();
        let d_l = self.blocks.first()?.dim();
        let mut acc = ComplexMatrix::zeros(d_v * d_l, d_v * d_l);
        for (i, (alpha, block)) in self.alphas.iter().zip(&self.blocks).enumerate() {
            let x = ComplexMatrix::from_fn(d_v, 1, |r, _| basis.get(r, i));
            let proj = &x * &x.adjoint();
            acc = &acc + &kron(&proj, block.matrix()).scale_real(*alpha);
        }
        Some(acc)
    }
}

fn scaled(m: &ComplexMatrix) -> ComplexMatrix {
    let s = m.max_abs();
    if s > 0.0 {
        m.scale_real(1.0 / s)
    } else {
        m.clone()
    }
}

fn random_hermitian(dim: usize, rng: &mut impl Rng) -> ComplexMatrix {
    let m = ComplexMatrix::from_fn(dim, dim, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    m.hermitian_part()
}

/// Checks the sufficiency condition for projecting onto `{ξ : Tr_L ξ = ω}`.
///
/// The basis is found by diagonalizing `Tr_L ρ + c₁ω + c₂ Tr_L[ρ(I ⊗ K)]`
/// for random `c₁, c₂` and a random Hermitian `K` on `ℋ_L`, then verified by
/// reassembly. The draws come from a fixed seed, so results are repeatable.
pub fn check_condition_s(omega: &DensityOperator, rho: &DensityOperator) -> ConditionSCertificate {
    match condition_s_inner(omega, rho) {
        Ok(cert) => cert,
        Err(e) => ConditionSCertificate::fail(e.to_string()),
    }
}

fn condition_s_inner(omega: &DensityOperator, rho: &DensityOperator) -> Result<ConditionSCertificate> {
    let d_v = omega.dim();
    let d_l = latent_dim(rho, d_v)?;

    let spec = herm_eig(rho.operator())?;
    if let Err(e) = require_full_rank(&spec) {
        return Ok(ConditionSCertificate::fail(format!("ρ is not full rank: {e}")));
    }

    let rho_v = trace_out_last(rho.matrix(), d_l)?.hermitian_part();
    let comm = ComplexMatrix::commutator(omega.matrix(), &rho_v)?;
    let comm_norm = comm.max_abs();
    let comm_tol = COMMUTATOR_TOL_REL * omega.matrix().max_abs().max(rho_v.max_abs());
    if comm_norm >= comm_tol {
        return Ok(ConditionSCertificate::fail(format!(
            "[ω, Tr_L ρ] has max entry {comm_norm:e}, tolerance {comm_tol:e}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
    let mut last_report = String::new();
    for attempt in 0..BASIS_ATTEMPTS {
        let k = random_hermitian(d_l, &mut rng);
        let twisted = trace_out_last(&(rho.matrix() * &kron(&ComplexMatrix::identity(d_v), &k)), d_l)?.hermitian_part();
        let c1 = rng.random_range(0.5..2.0);
        let c2 = rng.random_range(0.5..2.0);
        let probe = &(&scaled(&rho_v) + &scaled(omega.matrix()).scale_real(c1)) + &scaled(&twisted).scale_real(c2);
        let basis = herm_eig(&HermitianOperator::hermitized(probe)?)?.eigenvectors;

        match verify_basis(omega, rho, &basis, d_v, d_l)? {
            Ok(cert) => return Ok(cert),
            Err(report) => last_report = format!("attempt {}: {report}", attempt + 1),
        }
    }
    Ok(ConditionSCertificate::fail(last_report))
}

fn verify_basis(
    omega: &DensityOperator,
    rho: &DensityOperator,
    basis: &ComplexMatrix,
    d_v: usize,
    d_l: usize,
) -> Result<std::result::Result<ConditionSCertificate, String>> {
    let omega_in_basis = &(&basis.adjoint() * omega.matrix()) * basis;
    let omega_scale = omega.matrix().max_abs();
    for i in 0..d_v {
        for j in 0..d_v {
            if i != j && omega_in_basis.get(i, j).norm() > COMMUTATOR_TOL_REL * omega_scale.max(1e-300) {
                return Ok(Err(format!("ω is not diagonal in the block basis (entry {i},{j})")));
            }
        }
    }

    let u = kron(basis, &ComplexMatrix::identity(d_l));
    let rotated = &(&u.adjoint() * rho.matrix()) * &u;
    let mut alphas = Vec::with_capacity(d_v);
    let mut blocks = Vec::with_capacity(d_v);
    for i in 0..d_v {
        let block = ComplexMatrix::from_fn(d_l, d_l, |r, c| rotated.get(i * d_l + r, i * d_l + c)).hermitian_part();
        let alpha = block.trace().re;
        if alpha <= 0.0 {
            return Ok(Err(format!("block {i} has non-positive weight {alpha:e}")));
        }
        let normalized = HermitianOperator::from_matrix_unchecked(block.scale_real(1.0 / alpha));
        alphas.push(alpha);
        blocks.push(DensityOperator::from_parts_unchecked(vec![d_l], normalized));
    }
    let total: f64 = alphas.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Ok(Err(format!("block weights sum to {total}")));
    }
    let cert = ConditionSCertificate {
        holds: true,
        basis: Some(basis.clone()),
        alphas,
        blocks,
        violation_report: String::new(),
    };
    let residual = cert.reassemble().expect("basis present").max_abs_diff(rho.matrix());
    if residual > REASSEMBLY_TOL {
        return Ok(Err(format!("block reassembly residual {residual:e} exceeds {REASSEMBLY_TOL:e}")));
    }
    Ok(Ok(cert))
}

/// Solves `argmin_{Tr_L ξ = ω} D(ξ, ρ)` via the Petz map. Refuses unless the
/// sufficiency condition is certified.
pub fn qip_project(omega: &DensityOperator, rho: &DensityOperator) -> Result<DensityOperator> {
    let cert = check_condition_s(omega, rho);
    if !cert.holds {
        return Err(Error::ConditionS(cert.violation_report));
    }
    petz_recovery(rho, omega)
}

/// `(η_V^{1/2} τ_V^{-1/2} ⊗ I) τ (τ_V^{-1/2} η_V^{1/2} ⊗ I)`: a joint state with
/// visible marginal `η_V`, shaped by a full-rank `τ`.
pub fn feasible_extension(eta_v: &DensityOperator, tau: &DensityOperator) -> Result<DensityOperator> {
    let d_v = eta_v.dim();
    let d_l = latent_dim(tau, d_v)?;
    let tau_v = HermitianOperator::from_matrix_unchecked(trace_out_last(tau.matrix(), d_l)?.hermitian_part());
    let a = &sqrt_psd(eta_v.operator())?.into_matrix() * inv_sqrt_pd(&tau_v)?.matrix();
    let lift = kron(&a, &ComplexMatrix::identity(d_l));
    let out = (&(&lift * tau.matrix()) * &lift.adjoint()).hermitian_part();
    Ok(DensityOperator::from_parts_unchecked(joint_dims(tau, d_v), HermitianOperator::from_matrix_unchecked(out)))
}

/// Random states and sufficiency-condition instances.
pub mod random {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;

    fn gaussian(rng: &mut impl Rng) -> C64 {
        C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    }

    /// Full-rank state `G G† / Tr` with a complex Gaussian `G`.
    pub fn density(dims: Vec<usize>, rng: &mut impl Rng) -> Result<DensityOperator> {
        let n: usize = dims.iter().product();
        let g = ComplexMatrix::from_fn(n, n, |_, _| gaussian(rng));
        let m = &g * &g.adjoint();
        let tr = m.trace().re;
        DensityOperator::from_hermitian(dims, HermitianOperator::hermitized(m.scale_real(1.0 / tr))?)
    }

    /// Diagonal state with random positive weights.
    pub fn diagonal_density(dim: usize, rng: &mut impl Rng) -> Result<DensityOperator> {
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        DensityOperator::diagonal(vec![dim], &w.iter().map(|x| x / s).collect::<Vec<_>>())
    }

    /// Haar-like unitary from the QR factor of a complex Gaussian matrix.
    pub fn unitary(n: usize, rng: &mut impl Rng) -> ComplexMatrix {
        let g = ComplexMatrix::from_fn(n, n, |_, _| gaussian(rng));
        ComplexMatrix::from_dmatrix(g.into_dmatrix().qr().q())
    }

    /// `(ω, ρ)` with `ρ = Σ α_i x_i x_i† ⊗ ρ_B(i)` and `ω = Σ β_i x_i x_i†` in a
    /// random orthonormal basis.
    pub fn condition_s_pair(d_v: usize, d_l: usize, rng: &mut impl Rng) -> Result<(DensityOperator, DensityOperator)> {
        let x = unitary(d_v, rng);
        let draw = |rng: &mut dyn rand::RngCore| {
            let w: Vec<f64> = (0..d_v).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let alphas = draw(rng);
        let betas = draw(rng);
        let mut rho = ComplexMatrix::zeros(d_v * d_l, d_v * d_l);
        let mut omega = ComplexMatrix::zeros(d_v, d_v);
        for i in 0..d_v {
            let col = ComplexMatrix::from_fn(d_v, 1, |r, _| x.get(r, i));
            let proj = &col * &col.adjoint();
            let block = density(vec![d_l], rng)?;
            rho = &rho + &kron(&proj, block.matrix()).scale_real(alphas[i]);
            omega = &omega + &proj.scale_real(betas[i]);
        }
        let omega = DensityOperator::from_hermitian(vec![d_v], HermitianOperator::hermitized(omega)?)?;
        let rho = DensityOperator::from_hermitian(vec![d_v, d_l], HermitianOperator::hermitized(rho)?)?;
        Ok((omega, rho))
    }
}
