//! DO-EM: expectation-maximization over density operators.
//!
//! Each outer iteration projects the target onto the feasible set through the
//! Petz map (E-step), then climbs the minorant
//!
//! ```text
//! Q(θ) = Σ_r θ_r Tr(η H_r) - log Z(θ)
//! ```
//!
//! with backtracking gradient ascent (M-step). Two routes are provided: a
//! dense route over full operators, and a block route for models whose
//! Hamiltonian is block diagonal in the visible basis, which never builds an
//! operator larger than one hidden block.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BinaryDataset;
use crate::error::{Error, Result};
use crate::linalg::{trace_out_last, DensityOperator, HermitianOperator};
use crate::models::{
    build_qbm_hamiltonian_terms, cqlvm_blocks, gibbs, model_marginal, BlockGibbs, CqlvmModel, ParamHamiltonian,
    QbmSpec, QbmTerm,
};
use crate::qinfo::{qip_project, relative_entropy, von_neumann_entropy};

/// Slack on the M-step acceptance test.
pub const Q_SLACK: f64 = 1e-12;
/// Slack on log-likelihood ascent between outer iterations.
pub const ASCENT_SLACK: f64 = 1e-9;
pub const MAX_HALVINGS: usize = 20;
/// Marginal tolerance for QELBO inputs.
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoemConfig {
    pub max_outer_iters: usize,
    pub m_step_inner_iters: usize,
    pub learning_rate: f64,
    pub grad_tol: f64,
    pub ascent_check: bool,
    pub seed: u64,
    /// Invoke the checkpoint hook every this many iterations; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for DoemConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 200,
            m_step_inner_iters: 10,
            learning_rate: 0.1,
            grad_tol: 1e-6,
            ascent_check: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl DoemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidParameter(format!("gradient tolerance {} must be positive", self.grad_tol)));
        }
        if self.m_step_inner_iters == 0 {
            return Err(Error::InvalidParameter("M-step needs at least one inner iteration".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loglik: f64,
    pub qelbo: f64,
    pub rel_entropy: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<IterRecord>,
}

impl TrainTrace {
    /// CSV with columns `iter, loglik, qelbo, rel_entropy, grad_norm[, seconds]`.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["iter", "loglik", "qelbo", "rel_entropy", "grad_norm"];
        if with_seconds {
            header.push("seconds");
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.records {
            let mut row =
                vec![r.iter.to_string(), r.loglik.to_string(), r.qelbo.to_string(), r.rel_entropy.to_string(), r.grad_norm.to_string()];
            if with_seconds {
                row.push(r.seconds.to_string());
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    /// Wall time column only.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("iter,seconds\n");
        for r in &self.records {
            s.push_str(&format!("{},{}\n", r.iter, r.seconds));
        }
        s
    }

    pub fn loglik(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loglik).collect()
    }

    pub fn rel_entropy(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rel_entropy).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    Budget,
    /// The M-step could not improve `Q` after the maximum number of halvings.
    StepCollapse { iter: usize },
    /// Log-likelihood fell by more than the slack between two iterates.
    AscentViolated { iter: usize, before: f64, after: f64 },
}

#[derive(Clone, Debug)]
pub struct DoemResult {
    pub trace: TrainTrace,
    pub theta: Vec<f64>,
    pub stop: StopReason,
    /// Parameters at every recorded iteration.
    pub trajectory: Vec<Vec<f64>>,
}

/// Model with `ρ(θ) ∝ exp(Σ θ_r H_r)` whose moments can be evaluated exactly.
pub trait ExponentialFamily {
    fn theta(&self) -> Vec<f64>;
    fn set_theta(&mut self, theta: &[f64]) -> Result<()>;
    fn log_partition(&self) -> Result<f64>;
    /// `log Z` and `Tr(ρ(θ) H_r)` for every term.
    fn log_partition_and_moments(&self) -> Result<(f64, Vec<f64>)>;
}

impl ExponentialFamily for ParamHamiltonian {
    fn theta(&self) -> Vec<f64> {
        ParamHamiltonian::theta(self).to_vec()
    }

    fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        ParamHamiltonian::set_theta(self, theta)
    }

    fn log_partition(&self) -> Result<f64> {
        crate::models::log_partition(self)
    }

    fn log_partition_and_moments(&self) -> Result<(f64, Vec<f64>)> {
        let g = gibbs(&self.hamiltonian(), self.dims().to_vec())?;
        Ok((g.log_z, self.expectations(&g.rho)))
    }
}

impl ExponentialFamily for CqlvmModel {
    fn theta(&self) -> Vec<f64> {
        CqlvmModel::theta(self).to_vec()
    }

    fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        CqlvmModel::set_theta(self, theta)
    }

    fn log_partition(&self) -> Result<f64> {
        Ok(self.block_gibbs()?.log_z)
    }

    fn log_partition_and_moments(&self) -> Result<(f64, Vec<f64>)> {
        let bg = self.block_gibbs()?;
        let weights = bg.visible_probabilities();
        Ok((bg.log_z, block_moments(self, &bg, &weights)))
    }
}

/// `Tr(ρ_L(i|θ) A_r)` for every block `i` and term `r`.
fn block_traces(model: &CqlvmModel, bg: &BlockGibbs) -> Vec<Vec<f64>> {
    (0..model.n_blocks())
        .into_par_iter()
        .map(|i| {
            let cond = bg.conditional(i);
            model.terms().iter().map(|t| cond.expectation(&t.hidden)).collect()
        })
        .collect()
}

fn weighted_moments(model: &CqlvmModel, traces: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; model.terms().len()];
    for (i, (t, &p)) in traces.iter().zip(weights).enumerate() {
        if p == 0.0 {
            continue;
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o += p * model.sign(r, i) * t[r];
        }
    }
    out
}

/// `Σ_i w_i s_r(i) Tr(ρ_L(i|θ) A_r)`.
pub fn block_moments(model: &CqlvmModel, bg: &BlockGibbs, weights: &[f64]) -> Vec<f64> {
    weighted_moments(model, &block_traces(model, bg), weights)
}

/// Block form of the E-step output `⊕_i p_i ρ_L(i|θ^(t))`.
#[derive(Clone, Debug)]
pub struct BlockEta {
    pub weights: Vec<f64>,
    pub conditionals: Vec<HermitianOperator>,
    /// `S(ρ_L(i|θ^(t)))` per block.
    pub entropies: Vec<f64>,
    /// `Tr(η H_r)` per term.
    pub targets: Vec<f64>,
}

impl BlockEta {
    /// `Σ_i p_i S(σ_i)`.
    pub fn conditional_entropy(&self) -> f64 {
        self.weights.iter().zip(&self.entropies).filter(|(p, _)| **p > 0.0).map(|(p, s)| p * s).sum()
    }

    /// Dense `⊕_i p_i σ_i`; refused above the dense cap.
    pub fn dense(&self, m: usize, n: usize) -> Result<DensityOperator> {
        if m + n > crate::models::EXACT_QUBIT_CAP {
            return Err(Error::QubitCap { what: "dense E-step output".into(), qubits: m + n, cap: crate::models::EXACT_QUBIT_CAP });
        }
        let blocks: Vec<_> =
            self.conditionals.iter().zip(&self.weights).map(|(c, &p)| c.scale(p).into_matrix()).collect();
        let mat = crate::linalg::direct_sum(&blocks)?;
        DensityOperator::new(vec![2; m + n], mat)
    }
}

/// Dense E-step: the information projection of `η_V` onto the model's feasible set.
pub fn e_step(eta_v: &DensityOperator, model_state: &DensityOperator) -> Result<DensityOperator> {
    qip_project(eta_v, model_state)
}

/// Block E-step for a diagonal target with probabilities `p`.
pub fn e_step_blocks(p: &[f64], model: &CqlvmModel, bg: &BlockGibbs) -> Result<BlockEta> {
    if p.len() != model.n_blocks() {
        return Err(Error::DimensionMismatch(format!("{} target probabilities for {} blocks", p.len(), model.n_blocks())));
    }
    let conditionals: Vec<HermitianOperator> = (0..model.n_blocks()).into_par_iter().map(|i| bg.conditional(i)).collect();
    let traces: Vec<Vec<f64>> = conditionals
        .par_iter()
        .map(|c| model.terms().iter().map(|t| c.expectation(&t.hidden)).collect())
        .collect();
    let entropies = (0..model.n_blocks()).map(|i| bg.conditional_entropy(i)).collect();
    let targets = weighted_moments(model, &traces, p);
    Ok(BlockEta { weights: p.to_vec(), conditionals, entropies, targets })
}

/// `∂Q/∂θ_r = Tr(η H_r) - Tr(ρ(θ) H_r)`.
pub fn m_step_gradient(targets: &[f64], model_moments: &[f64]) -> Vec<f64> {
    targets.iter().zip(model_moments).map(|(c, m)| c - m).collect()
}

/// Gradient of `Q` at the model's current parameters.
pub fn m_step_gradient_at<M: ExponentialFamily>(targets: &[f64], model: &M) -> Result<Vec<f64>> {
    Ok(m_step_gradient(targets, &model.log_partition_and_moments()?.1))
}

/// `Q(θ) = θ·c - log Z(θ)`.
pub fn q_value(theta: &[f64], targets: &[f64], log_z: f64) -> f64 {
    dot(theta, targets) - log_z
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MStepOutcome {
    /// `Q` after each accepted step, starting with the entry value.
    pub q_values: Vec<f64>,
    pub collapsed: bool,
}

/// Backtracking gradient ascent on `Q` for `config.m_step_inner_iters` steps.
pub fn m_step<M: ExponentialFamily>(model: &mut M, targets: &[f64], config: &DoemConfig) -> Result<MStepOutcome> {
    let mut theta = model.theta();
    let (mut log_z, mut moments) = model.log_partition_and_moments()?;
    let mut q = q_value(&theta, targets, log_z);
    let mut q_values = vec![q];
    let mut collapsed = false;
    for _ in 0..config.m_step_inner_iters {
        let grad = m_step_gradient(targets, &moments);
        if max_norm(&grad) < config.grad_tol {
            break;
        }
        let mut step = config.learning_rate;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
            model.set_theta(&trial)?;
            let (lz, mom) = model.log_partition_and_moments()?;
            let q_trial = q_value(&trial, targets, lz);
            if q_trial >= q - Q_SLACK {
                theta = trial;
                log_z = lz;
                moments = mom;
                q = q_trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            model.set_theta(&theta)?;
            collapsed = true;
            break;
        }
        q_values.push(q);
    }
    let _ = log_z;
    Ok(MStepOutcome { q_values, collapsed })
}

/// `Tr(η log ρ(θ)) + S(η) - S(η_V)` for a dense feasible `η`.
pub fn qelbo(eta: &DensityOperator, model: &ParamHamiltonian, eta_v: &DensityOperator) -> Result<f64> {
    if eta.dim() != model.dim() || eta.dim() % eta_v.dim() != 0 {
        return Err(Error::DimensionMismatch(format!("η has dimension {}, model {}", eta.dim(), model.dim())));
    }
    let marginal = trace_out_last(eta.matrix(), eta.dim() / eta_v.dim())?;
    let gap = marginal.max_abs_diff(eta_v.matrix());
    if gap > FEASIBILITY_TOL {
        return Err(Error::InfeasibleExtension(format!("Tr_L η differs from η_V by {gap:e}")));
    }
    let log_z = crate::models::log_partition(model)?;
    let cross = eta.operator().expectation(&model.hamiltonian()) - log_z;
    Ok(cross + von_neumann_entropy(eta)? - von_neumann_entropy(eta_v)?)
}

/// QELBO of a block E-step output at the model's current parameters.
pub fn qelbo_blocks(eta: &BlockEta, model: &CqlvmModel) -> Result<f64> {
    let log_z = model.block_gibbs()?.log_z;
    Ok(dot(model.theta(), &eta.targets) + eta.conditional_entropy() - log_z)
}

fn shannon(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

type Hook<'a> = dyn FnMut(usize, &[f64]) -> Result<()> + 'a;

struct Loop<'a> {
    config: &'a DoemConfig,
    trace: TrainTrace,
    trajectory: Vec<Vec<f64>>,
    start: Instant,
}

impl<'a> Loop<'a> {
    fn new(config: &'a DoemConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, trace: TrainTrace::default(), trajectory: Vec::new(), start: Instant::now() })
    }

    /// Records an iterate; returns a stop reason when the loop should end
    /// before the M-step.
    fn record(&mut self, iter: usize, loglik: f64, qelbo: f64, rel_entropy: f64, grad: &[f64], theta: &[f64]) -> Option<StopReason> {
        let grad_norm = max_norm(grad);
        let seconds = self.start.elapsed().as_secs_f64();
        let prev = self.trace.records.last().map(|r| r.loglik);
        self.trace.records.push(IterRecord { iter, loglik, qelbo, rel_entropy, grad_norm, seconds });
        self.trajectory.push(theta.to_vec());
        if let Some(before) = prev {
            if self.config.ascent_check && loglik < before - ASCENT_SLACK {
                return Some(StopReason::AscentViolated { iter, before, after: loglik });
            }
        }
        if grad_norm < self.config.grad_tol {
            return Some(StopReason::Converged);
        }
        if iter >= self.config.max_outer_iters {
            return Some(StopReason::Budget);
        }
        None
    }

    fn hook(&self, iter: usize, theta: &[f64], hook: &mut Hook<'_>) -> Result<()> {
        let every = self.config.checkpoint_every;
        if every > 0 && iter > 0 && iter % every == 0 {
            hook(iter, theta)?;
        }
        Ok(())
    }

    fn finish(self, theta: Vec<f64>, stop: StopReason) -> DoemResult {
        DoemResult { trace: self.trace, theta, stop, trajectory: self.trajectory }
    }
}

/// Block-diagonal DO-EM for a diagonal target `p` over `2^m` visible states.
pub fn run_doem_blocks(
    p: &[f64],
    model: &mut CqlvmModel,
    config: &DoemConfig,
    hook: &mut Hook<'_>,
) -> Result<DoemResult> {
    let mut lp = Loop::new(config)?;
    let target_entropy = shannon(p);
    let mut iter = 0;
    loop {
        let theta = ExponentialFamily::theta(model);
        let bg = model.block_gibbs()?;
        let loglik = bg.log_likelihood(p);
        let eta = e_step_blocks(p, model, &bg)?;
        let moments = block_moments(model, &bg, &bg.visible_probabilities());
        let grad = m_step_gradient(&eta.targets, &moments);
        let qelbo = dot(&theta, &eta.targets) + eta.conditional_entropy() - bg.log_z;
        let rel = -target_entropy - loglik;
        if let Some(stop) = lp.record(iter, loglik, qelbo, rel, &grad, &theta) {
            return Ok(lp.finish(theta, stop));
        }
        let out = m_step(model, &eta.targets, config)?;
        iter += 1;
        let theta = ExponentialFamily::theta(model);
        lp.hook(iter, &theta, hook)?;
        if out.collapsed && out.q_values.len() == 1 {
            return Ok(lp.finish(theta, StopReason::StepCollapse { iter }));
        }
    }
}

/// Dense DO-EM. Condition S is certified at every iterate.
pub fn run_doem_dense(
    eta_v: &DensityOperator,
    model: &mut ParamHamiltonian,
    config: &DoemConfig,
    hook: &mut Hook<'_>,
) -> Result<DoemResult> {
    let mut lp = Loop::new(config)?;
    let d_v = eta_v.dim();
    if d_v == 0 || !d_v.is_power_of_two() {
        return Err(Error::DimensionMismatch(format!("visible dimension {d_v} is not a qubit register")));
    }
    let visible_qubits = d_v.trailing_zeros() as usize;
    let s_target = von_neumann_entropy(eta_v)?;
    let mut iter = 0;
    loop {
        let theta = ExponentialFamily::theta(model);
        let h = model.hamiltonian();
        let g = gibbs(&h, model.dims().to_vec())?;
        let rho_v = model_marginal(&g.rho, visible_qubits)?;
        let loglik = crate::models::log_likelihood(eta_v, &rho_v)?;
        let eta = e_step(eta_v, &g.rho).map_err(|e| match e {
            Error::ConditionS(report) => Error::ConditionS(format!("lost at iteration {iter}: {report}")),
            other => other,
        })?;
        let targets = model.expectations(&eta);
        let moments = model.expectations(&g.rho);
        let grad = m_step_gradient(&targets, &moments);
        let qelbo = dot(&theta, &targets) - g.log_z + von_neumann_entropy(&eta)? - s_target;
        let rel = relative_entropy(eta_v, &rho_v)?;
        if let Some(stop) = lp.record(iter, loglik, qelbo, rel, &grad, &theta) {
            return Ok(lp.finish(theta, stop));
        }
        let out = m_step(model, &targets, config)?;
        iter += 1;
        let theta = ExponentialFamily::theta(model);
        lp.hook(iter, &theta, hook)?;
        if out.collapsed && out.q_values.len() == 1 {
            return Ok(lp.finish(theta, StopReason::StepCollapse { iter }));
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DoemPath {
    /// Block route for block-diagonal models, dense otherwise.
    #[default]
    Auto,
    Dense,
    Blocks,
}

/// Trains a QBM on a dataset, updating `spec` in place.
pub fn run_doem(
    dataset: &BinaryDataset,
    spec: &mut QbmSpec,
    config: &DoemConfig,
    path: DoemPath,
    hook: &mut Hook<'_>,
) -> Result<DoemResult> {
    spec.validate()?;
    if dataset.d_v() != spec.m {
        return Err(Error::DimensionMismatch(format!("dataset has {} visible bits, model has {}", dataset.d_v(), spec.m)));
    }
    let empirical = dataset.empirical()?;
    let use_blocks = match path {
        DoemPath::Auto => spec.is_cqlvm(),
        DoemPath::Blocks => true,
        DoemPath::Dense => false,
    };
    let terms: Vec<QbmTerm> = if spec.is_cqlvm() { spec.cqlvm_terms() } else { spec.all_terms() };
    let result = if use_blocks {
        let mut model = cqlvm_blocks(spec)?;
        let p = empirical.dense()?;
        run_doem_blocks(&p, &mut model, config, hook)?
    } else {
        let mut model = build_qbm_hamiltonian_terms(spec, &terms)?;
        let eta_v = empirical.density()?;
        run_doem_dense(&eta_v, &mut model, config, hook)?
    };
    spec.set_theta(&terms, &result.theta);
    Ok(result)
}

/// No-op checkpoint hook.
pub fn no_hook(_: usize, _: &[f64]) -> Result<()> {
    Ok(())
}
