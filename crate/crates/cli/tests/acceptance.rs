//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances are pinned next to each check.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use doem_core::data::basis;
use doem_core::data::encode::{binarize_1bit, encode_8bit_planes};
use doem_core::data::idx::{read_idx, ImageSet};
use doem_core::data::mixture::{gen_bernoulli_mixture, BernoulliMixtureSpec};
use doem_core::data::{BinaryDataset, Encoding, Provenance};
use doem_core::doem::{
    e_step, m_step_gradient_at, no_hook, q_value, qelbo, run_doem, DoemConfig, DoemPath, StopReason, MAX_HALVINGS,
    Q_SLACK,
};
use doem_core::linalg::{sigma_x, sigma_z, ComplexMatrix, HermitianOperator};
use doem_core::models::{
    build_qbm_hamiltonian_terms, gibbs, gibbs_state, log_likelihood, log_partition, model_marginal, pauli_term, Axis,
    QbmSpec,
};
use doem_core::qidbm::{
    exact_nll, quantum_layer_expectations, train, unit_expectations, CdConfig, FieldConvention, Mode, QidbmParams,
};
use doem_core::qinfo::{check_ruskai, feasible_extension, qip_project, random, relative_entropy, visible_marginal};
use doem_core::rng::{row_stream, shuffle_stream};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Allocation audit.

struct Audit;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK_LIVE: AtomicUsize = AtomicUsize::new(0);
static LARGEST: AtomicUsize = AtomicUsize::new(0);

fn note_alloc(size: usize) {
    let live = LIVE.fetch_add(size, Ordering::Relaxed) + size;
    PEAK_LIVE.fetch_max(live, Ordering::Relaxed);
    LARGEST.fetch_max(size, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for Audit {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note_alloc(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note_alloc(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
        note_alloc(new_size);
        System.realloc(ptr, layout, new_size)
    }
}

#[global_allocator]
static GLOBAL: Audit = Audit;

fn reset_audit() -> usize {
    let live = LIVE.load(Ordering::Relaxed);
    PEAK_LIVE.store(live, Ordering::Relaxed);
    LARGEST.store(0, Ordering::Relaxed);
    live
}

// ---------------------------------------------------------------------------
// Shared helpers.

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mixture(n_bits: usize, n_modes: usize, n_samples: usize, seed: u64) -> BinaryDataset {
    let spec = BernoulliMixtureSpec { n_bits, n_modes, p: 0.9, n_samples, seed };
    gen_bernoulli_mixture(&spec).unwrap().0
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// 1. Ascent at desk scale.

fn ascent() -> Outcome {
    let start = Instant::now();
    let ds = mixture(4, 3, 500, 1);
    let mut spec = QbmSpec::random(4, 3, 0.5, 0.8, 11);
    let config = DoemConfig { max_outer_iters: 200, grad_tol: 1e-14, ascent_check: false, ..DoemConfig::default() };
    let res = run_doem(&ds, &mut spec, &config, DoemPath::Auto, &mut no_hook).map_err(|e| e.to_string())?;
    let ll = res.trace.loglik();
    let worst = ll.windows(2).map(|w| w[0] - w[1]).fold(f64::MIN, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let iters = ll.len() - 1;
    check(
        iters == 200 && res.stop == StopReason::Budget && worst <= 1e-9 && secs < 60.0,
        format!("{iters} iterations, largest drop {worst:.3e} (slack 1e-9), loglik {:.6} -> {:.6}, {secs:.1}s", ll[0], ll[iters]),
    )
}

// ---------------------------------------------------------------------------
// 2. QELBO saturation at every E-step output.

fn qelbo_saturation() -> Outcome {
    let ds = BinaryDataset::new(2, vec![0, 0, 0, 1, 1, 1, 1, 1, 0, 1, 1, 0, 1, 1], Encoding::ZeroOne, Provenance::new("c2"))
        .unwrap();
    let eta_v = ds.empirical().unwrap().density().unwrap();
    let template = QbmSpec::random(2, 2, 0.6, 0.7, 5);
    let terms = template.cqlvm_terms();
    let mut spec = template.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_gap, mut worst_slack, mut checkpoints) = (0.0f64, f64::MIN, 0);
    let mut hook = |_: usize, theta: &[f64]| -> doem_core::Result<()> {
        let mut s = template.clone();
        s.set_theta(&terms, theta);
        let model = build_qbm_hamiltonian_terms(&s, &terms)?;
        let rho = gibbs_state(&model)?;
        let ll = log_likelihood(&eta_v, &model_marginal(&rho, 2)?)?;
        let eta = e_step(&eta_v, &rho)?;
        worst_gap = worst_gap.max((qelbo(&eta, &model, &eta_v)? - ll).abs());
        for _ in 0..100 {
            let tau = random::density(vec![4, 4], &mut rng)?;
            let other = feasible_extension(&eta_v, &tau)?.with_dims(vec![2; 4])?;
            worst_slack = worst_slack.max(qelbo(&other, &model, &eta_v)? - ll);
        }
        checkpoints += 1;
        Ok(())
    };
    let config = DoemConfig { max_outer_iters: 25, checkpoint_every: 1, ..DoemConfig::default() };
    let res = run_doem(&ds, &mut spec, &config, DoemPath::Dense, &mut hook).map_err(|e| e.to_string())?;
    let trace_gap = res.trace.records.iter().map(|r| (r.qelbo - r.loglik).abs()).fold(0.0, f64::max);
    check(
        checkpoints > 0 && worst_gap < 1e-8 && trace_gap < 1e-8 && worst_slack <= 1e-9,
        format!(
            "{checkpoints} checkpoints, |QELBO - loglik| max {:.2e} (trace {trace_gap:.2e}, tol 1e-8), \
             random feasible η max excess {worst_slack:.2e} (tol 1e-9)",
            worst_gap
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Petz map and projection on sufficiency instances.

fn petz_projection() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut tr, mut marg, mut d_gap, mut ruskai) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in 0..50 {
        let (d_v, d_l) = [(2, 2), (4, 2), (4, 4)][k % 3];
        let (omega, rho) = random::condition_s_pair(d_v, d_l, &mut rng).unwrap();
        let eta = qip_project(&omega, &rho).map_err(|e| e.to_string())?;
        tr = tr.max((eta.trace() - 1.0).abs());
        marg = marg.max(visible_marginal(&eta, d_v).unwrap().matrix().max_abs_diff(omega.matrix()));
        let lhs = relative_entropy(&eta, &rho).unwrap();
        let rhs = relative_entropy(&omega, &visible_marginal(&rho, d_v).unwrap()).unwrap();
        d_gap = d_gap.max((lhs - rhs).abs());
        ruskai = ruskai.max(check_ruskai(&eta, &rho, 1e-7).unwrap().residual);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        tr < 1e-9 && marg < 1e-9 && d_gap < 1e-7 && ruskai < 1e-7 && secs < 10.0,
        format!(
            "50 instances: |Tr-1| {tr:.1e}, marginal {marg:.1e} (tol 1e-9), divergence gap {d_gap:.1e}, \
             Ruskai residual {ruskai:.1e} (tol 1e-7), {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Classical reduction against enumeration-based EM.

/// Classical EM on a fully visible-hidden Boltzmann machine by enumeration,
/// with the same inner ascent and backtracking rule as the M-step.
struct ClassicalBm {
    t: usize,
    m: usize,
    features: Vec<Vec<f64>>,
}

impl ClassicalBm {
    fn new(m: usize, n: usize) -> Self {
        let t = m + n;
        let features = (0..1usize << t)
            .map(|k| {
                let s: Vec<f64> = (0..t).map(|i| basis::spin(k, i, t)).collect();
                let mut f: Vec<f64> = s.iter().map(|x| -x).collect();
                for i in 0..t {
                    for j in 0..i {
                        f.push(-s[i] * s[j]);
                    }
                }
                f
            })
            .collect();
        Self { t, m, features }
    }

    fn joint(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        let logw: Vec<f64> = self.features.iter().map(|f| f.iter().zip(theta).map(|(a, b)| a * b).sum()).collect();
        let max = logw.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logw.iter().map(|x| (x - max).exp()).sum();
        (logw.iter().map(|x| (x - max).exp() / z).collect(), max + z.ln())
    }

    fn moments(&self, probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.features[0].len()];
        for (p, f) in probs.iter().zip(&self.features) {
            for (o, x) in out.iter_mut().zip(f) {
                *o += p * x;
            }
        }
        out
    }

    fn posterior_targets(&self, theta: &[f64], p_data: &[f64]) -> Vec<f64> {
        let (joint, _) = self.joint(theta);
        let per = 1usize << (self.t - self.m);
        let completed: Vec<f64> = joint
            .chunks(per)
            .zip(p_data)
            .flat_map(|(c, &p)| {
                let s: f64 = c.iter().sum();
                c.iter().map(move |x| p * x / s).collect::<Vec<_>>()
            })
            .collect();
        self.moments(&completed)
    }

    fn run(&self, theta0: &[f64], p_data: &[f64], config: &DoemConfig, iters: usize) -> Vec<Vec<f64>> {
        let mut theta = theta0.to_vec();
        let mut out = vec![theta.clone()];
        for _ in 0..iters {
            let c = self.posterior_targets(&theta, p_data);
            let (joint, mut log_z) = self.joint(&theta);
            let mut moments = self.moments(&joint);
            let mut q = q_value(&theta, &c, log_z);
            for _ in 0..config.m_step_inner_iters {
                let grad: Vec<f64> = c.iter().zip(&moments).map(|(a, b)| a - b).collect();
                if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < config.grad_tol {
                    break;
                }
                let mut step = config.learning_rate;
                let mut accepted = false;
                for _ in 0..=MAX_HALVINGS {
                    let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
                    let (j, lz) = self.joint(&trial);
                    let q_trial = q_value(&trial, &c, lz);
                    if q_trial >= q - Q_SLACK {
                        theta = trial;
                        log_z = lz;
                        moments = self.moments(&j);
                        q = q_trial;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            let _ = log_z;
            out.push(theta.clone());
        }
        out
    }
}

fn classical_reduction() -> Outcome {
    let (m, n) = (4, 3);
    let ds = mixture(m, 3, 400, 4);
    let p_data = ds.empirical().unwrap().dense().unwrap();
    let mut spec = QbmSpec::random(m, n, 0.5, 0.0, 44);
    let config = DoemConfig { max_outer_iters: 50, grad_tol: 1e-14, ..DoemConfig::default() };
    let start_theta = spec.theta(&spec.cqlvm_terms());
    let res = run_doem(&ds, &mut spec, &config, DoemPath::Auto, &mut no_hook).map_err(|e| e.to_string())?;
    let classical_dim = (m + n) + (m + n) * (m + n - 1) / 2;
    let reference = ClassicalBm::new(m, n).run(&start_theta[..classical_dim], &p_data, &config, 50);
    if res.trajectory.len() != reference.len() {
        return Err(format!("trajectory lengths {} vs {}", res.trajectory.len(), reference.len()));
    }
    let dist = res.trajectory.iter().zip(&reference).map(|(a, b)| max_abs_diff(&a[..classical_dim], b)).fold(0.0, f64::max);
    let transverse = res.trajectory.iter().flat_map(|a| a[classical_dim..].iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    check(
        dist <= 1e-8 && transverse <= 1e-8,
        format!("50 iterations, max parameter distance {dist:.2e} (tol 1e-8), hidden transverse drift {transverse:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 5. Relative entropy reduction on the Bernoulli mixture.

fn mixture_reduction() -> Outcome {
    let start = Instant::now();
    let config = DoemConfig { max_outer_iters: 300, m_step_inner_iters: 10, learning_rate: 0.3, ..DoemConfig::default() };
    let (mut initial, mut last, mut monotone) = (0.0, 0.0, true);
    for seed in 0..10u64 {
        let ds = mixture(8, 8, 1000, seed);
        let mut spec = QbmSpec::random(8, 2, 0.1, 0.5, seed + 100);
        let res = run_doem(&ds, &mut spec, &config, DoemPath::Blocks, &mut no_hook).map_err(|e| e.to_string())?;
        let re = res.trace.rel_entropy();
        monotone &= re.windows(2).all(|w| w[1] <= w[0] + 1e-9);
        initial += re[0] / 10.0;
        last += re[re.len() - 1] / 10.0;
    }
    let ratio = last / initial;
    let secs = start.elapsed().as_secs_f64();
    check(
        monotone && ratio < 0.25 && secs < 300.0,
        format!("10 runs, mean relative entropy {initial:.4} -> {last:.4} (ratio {ratio:.3}, bound 0.25), monotone {monotone}, {secs:.0}s"),
    )
}

// ---------------------------------------------------------------------------
// 6. Closed-form single-unit expectations.

fn unit_formulas() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (sz, sx) = (HermitianOperator::new(sigma_z()).unwrap(), HermitianOperator::new(sigma_x()).unwrap());
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (b, g) = (rng.random_range(-5.0..=5.0), rng.random_range(-5.0..=5.0));
        let h = sz.scale(b).add(&sx.scale(g)).unwrap();
        let rho = gibbs(&h, vec![2]).unwrap().rho;
        let (z, x) = unit_expectations(b, g);
        worst = worst.max((rho.operator().expectation(&sz) - z).abs()).max((rho.operator().expectation(&sx) - x).abs());
    }
    check(worst < 1e-12, format!("10^4 pairs, max deviation {worst:.2e} (tol 1e-12)"))
}

// ---------------------------------------------------------------------------
// 7. Clamped conditional of the quantum layer.

/// A unit is "on" when its qubit is in basis state 0; qubit order v, h1, h2.
fn unit_value(index: usize, site: usize, width: usize, enc: Encoding) -> f64 {
    let on = (index >> (width - 1 - site)) & 1 == 0;
    match enc {
        Encoding::ZeroOne => on as u8 as f64,
        Encoding::PlusMinus => if on { 1.0 } else { -1.0 },
    }
}

fn dense_qidbm_hamiltonian(p: &QidbmParams, enc: Encoding) -> HermitianOperator {
    let (l, m, n) = (p.l, p.m, p.n);
    let t = l + m + n;
    let diag: Vec<f64> = (0..1usize << t)
        .map(|k| {
            let u = |s: usize| unit_value(k, s, t, enc);
            let mut e = 0.0;
            for a in 0..l {
                e += p.b_v[a] * u(a) + (0..m).map(|j| p.w1[a * m + j] * u(a) * u(l + j)).sum::<f64>();
            }
            for j in 0..m {
                e += p.b_h1[j] * u(l + j) + (0..n).map(|k2| p.w2[j * n + k2] * u(l + j) * u(l + m + k2)).sum::<f64>();
            }
            e + (0..n).map(|k2| p.b_h2[k2] * u(l + m + k2)).sum::<f64>()
        })
        .collect();
    let mut h = HermitianOperator::from_real_diagonal(&diag);
    for j in 0..m {
        h.add_scaled(p.gamma[j], &pauli_term(t, l + j, Axis::X).unwrap());
    }
    h
}

fn clamped_conditional() -> Outcome {
    let (l, m, n) = (2, 2, 2);
    let t = l + m + n;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for draw in 0..20 {
        let enc = if draw % 2 == 0 { Encoding::ZeroOne } else { Encoding::PlusMinus };
        let mut p = QidbmParams::zeros(l, m, n);
        for x in p.b_v.iter_mut().chain(&mut p.b_h1).chain(&mut p.b_h2).chain(&mut p.w1).chain(&mut p.w2) {
            *x = rng.random_range(-1.5..1.5);
        }
        for g in &mut p.gamma {
            *g = rng.random_range(0.1..2.0);
        }
        let h = dense_qidbm_hamiltonian(&p, enc);
        for v in 0..1usize << l {
            for h2 in 0..1usize << n {
                let idx = |h1: usize| (v << (m + n)) | (h1 << n) | h2;
                let block = ComplexMatrix::from_fn(1 << m, 1 << m, |r, c| h.matrix().get(idx(r), idx(c)));
                let cond = gibbs(&HermitianOperator::new(block).unwrap(), vec![2; m]).unwrap().rho.diagonal_probabilities();
                let vv: Vec<f64> = (0..l).map(|a| unit_value(idx(0), a, t, enc)).collect();
                let hh: Vec<f64> = (0..n).map(|k| unit_value(idx(0), l + m + k, t, enc)).collect();
                let (z, _) = quantum_layer_expectations(&vv, &hh, &p, enc, FieldConvention::SpinConsistent);
                let tv: f64 = cond
                    .iter()
                    .enumerate()
                    .map(|(r, &pr)| {
                        let prod: f64 = (0..m)
                            .map(|j| if (r >> (m - 1 - j)) & 1 == 0 { 0.5 * (1.0 + z[j]) } else { 0.5 * (1.0 - z[j]) })
                            .product();
                        0.5 * (pr - prod).abs()
                    })
                    .sum();
                worst = worst.max(tv);
            }
        }
    }
    check(worst < 1e-10, format!("20 draws x 16 clampings, max total variation {worst:.2e} (tol 1e-10)"))
}

// ---------------------------------------------------------------------------
// 8. Analytic gradient against central differences.

fn gradient_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    let (mut worst, mut smallest) = (0.0f64, f64::MAX);
    for k in 0..10u64 {
        let mut spec = QbmSpec::random(2, 1, 1.0, 0.0, 800 + k);
        for g in &mut spec.gamma {
            *g = rng.random_range(-1.0..1.0);
        }
        let terms = spec.all_terms();
        let model = build_qbm_hamiltonian_terms(&spec, &terms).unwrap();
        let eta = random::density(vec![2; 3], &mut rng).unwrap();
        let targets = model.expectations(&eta);
        let grad = m_step_gradient_at(&targets, &model).unwrap();
        let theta = model.theta().to_vec();
        for r in 0..theta.len() {
            let q = |d: f64| {
                let mut th = theta.clone();
                th[r] += d;
                q_value(&th, &targets, log_partition(&model.with_theta(&th).unwrap()).unwrap())
            };
            let fd = (q(h) - q(-h)) / (2.0 * h);
            worst = worst.max((grad[r] - fd).abs() / grad[r].abs().max(fd.abs()));
            smallest = smallest.min(grad[r].abs());
        }
    }
    check(
        worst < 1e-5,
        format!("10 QBM(2,1) instances, {} components each, max relative error {worst:.2e} (tol 1e-5), smallest |g| {smallest:.2e}", 3 + 3 + 3),
    )
}

// ---------------------------------------------------------------------------
// 9. Classical limit of CD.

/// Independently coded classical DBM CD-k on `{0,1}` units. Consumes the
/// per-row streams in the same order as the library.
fn reference_dbm_epoch(data: &BinaryDataset, p: &mut QidbmParams, cfg: &CdConfig, epoch: u64) {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (l, m, n) = (p.l, p.m, p.n);
    let bern = |probs: Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        probs.into_iter().map(|q| if rng.random::<f64>() < q { 1.0 } else { 0.0 }).collect()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut shuffle_stream(cfg.seed, epoch));
    for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
        let up1 = |p: &QidbmParams, v: &[f64], h2: &[f64]| -> Vec<f64> {
            (0..m)
                .map(|j| {
                    let mut a = p.b_h1[j];
                    for i in 0..l {
                        a += v[i] * p.w1[i * m + j];
                    }
                    for k in 0..n {
                        a += p.w2[j * n + k] * h2[k];
                    }
                    sig(a)
                })
                .collect()
        };
        let down = |p: &QidbmParams, h1: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let v = (0..l).map(|i| sig(p.b_v[i] + (0..m).map(|j| p.w1[i * m + j] * h1[j]).sum::<f64>())).collect();
            let h2 = (0..n).map(|k| sig(p.b_h2[k] + (0..m).map(|j| p.w2[j * n + k] * h1[j]).sum::<f64>())).collect();
            (v, h2)
        };
        let mut dw1 = vec![0.0; l * m];
        let mut dw2 = vec![0.0; m * n];
        let (mut dv, mut dh1, mut dh2) = (vec![0.0; l], vec![0.0; m], vec![0.0; n]);
        for (r, &row) in rows.iter().enumerate() {
            let mut rng = row_stream(cfg.seed, epoch, b as u64, r as u64);
            let v0: Vec<f64> = data.row(row).iter().map(|&x| x as f64).collect();
            let mut h1 = bern(up1(p, &v0, &vec![0.0; n]), &mut rng);
            let h2_0 = bern(down(p, &h1).1, &mut rng);
            let mu = up1(p, &v0, &h2_0);
            let (mut v, mut h2) = (v0.clone(), h2_0.clone());
            for _ in 0..cfg.k {
                let (pv, ph2) = down(p, &h1);
                v = bern(pv, &mut rng);
                h2 = bern(ph2, &mut rng);
                h1 = bern(up1(p, &v, &h2), &mut rng);
            }
            for i in 0..l {
                for j in 0..m {
                    dw1[i * m + j] += v0[i] * mu[j] - v[i] * h1[j];
                }
                dv[i] += v0[i] - v[i];
            }
            for j in 0..m {
                for k in 0..n {
                    dw2[j * n + k] += mu[j] * h2_0[k] - h1[j] * h2[k];
                }
                dh1[j] += mu[j] - h1[j];
            }
            for k in 0..n {
                dh2[k] += h2_0[k] - h2[k];
            }
        }
        let s = cfg.learning_rate / rows.len() as f64;
        let apply = |x: &mut [f64], d: &[f64]| x.iter_mut().zip(d).for_each(|(a, b)| *a += s * b);
        apply(&mut p.w1, &dw1);
        apply(&mut p.w2, &dw2);
        apply(&mut p.b_v, &dv);
        apply(&mut p.b_h1, &dh1);
        apply(&mut p.b_h2, &dh2);
    }
}

fn cd_classical_limit() -> Outcome {
    let data = mixture(12, 4, 100, 9);
    let init = QidbmParams::init(12, 8, 4, 9);
    let cfg = |mode| CdConfig { k: 2, learning_rate: 0.05, batch_size: 20, epochs: 1, seed: 9, mode, ..CdConfig::default() };
    let (mut q, mut d, mut r) = (init.clone(), init.clone(), init.clone());
    let (mut identical, mut ref_gap) = (true, 0.0f64);
    for epoch in 0..5u64 {
        let run = |p: &mut QidbmParams, mode| {
            let c = cfg(mode);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut shuffle_stream(c.seed, epoch));
            for (b, rows) in order.chunks(c.batch_size).enumerate() {
                doem_core::qidbm::cd_step(&data, rows, p, &c, epoch, b as u64).unwrap();
            }
        };
        run(&mut q, Mode::Qidbm);
        run(&mut d, Mode::Dbm);
        reference_dbm_epoch(&data, &mut r, &cfg(Mode::Dbm), epoch);
        identical &= q.sections().iter().zip(d.sections().iter()).all(|(a, b)| {
            a.1.iter().zip(b.1).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        for (a, b) in d.sections().iter().zip(r.sections().iter()) {
            ref_gap = ref_gap.max(max_abs_diff(a.1, b.1));
        }
    }
    // The library training loop must agree with the per-batch replay above.
    let mut via_train = init.clone();
    let c = CdConfig { epochs: 5, ..cfg(Mode::Qidbm) };
    train(&data, None, &mut via_train, &c, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
    let loop_same = via_train == q;
    check(
        identical && loop_same && ref_gap < 1e-12,
        format!(
            "5 epochs on 100 rows: QiDBM(Γ=0) vs DBM bit-identical {identical}, training loop replay {loop_same}, \
             independent reference max gap {ref_gap:.1e} (tol 1e-12)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Desk-scale comparison on 8x8 digits.

fn digits() -> BinaryDataset {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/digits8x8-images-idx3-ubyte.gz");
    let images = ImageSet::try_from(read_idx(&path).unwrap()).unwrap();
    binarize_1bit(&images, 128, Provenance::new("digits8x8")).unwrap()
}

/// Highest-variance columns of the training split.
fn top_variance_columns(ds: &BinaryDataset, k: usize) -> Vec<usize> {
    let n = ds.len() as f64;
    let mut var: Vec<(usize, f64)> = (0..ds.d_v())
        .map(|c| {
            let p = ds.rows().map(|r| r[c] as f64).sum::<f64>() / n;
            (c, p * (1.0 - p))
        })
        .collect();
    var.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut cols: Vec<usize> = var[..k].iter().map(|x| x.0).collect();
    cols.sort_unstable();
    cols
}

fn digits_comparison() -> Outcome {
    let start = Instant::now();
    let all = digits();
    let (train_set, heldout) = (all.slice(0, 1500), all.slice(1500, all.len()));
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, mode, gamma) in [("qidbm", Mode::Qidbm, 1.0), ("dbm", Mode::Dbm, 0.0)] {
        for seed in 0..3u64 {
            let cfg = CdConfig { k: 1, learning_rate: 0.05, batch_size: 50, epochs: 50, seed, mode, ..CdConfig::default() };
            let mut p = QidbmParams::init(64, 32, 16, seed).with_gamma(&[gamma]).unwrap();
            let report = match train(&train_set, Some(&heldout), &mut p, &cfg, &mut |_, _| Ok(())) {
                Ok(r) => r,
                Err(e) => {
                    ok = false;
                    lines.push(format!("{name} seed {seed}: {e}"));
                    continue;
                }
            };
            let re: Vec<f64> = report.epochs.iter().map(|e| e.recon_error).collect();
            let decreasing = re.windows(2).all(|w| w[1] < w[0]);
            ok &= decreasing && re.len() == 50;
            lines.push(format!("{name}/{seed} recon {:.4}->{:.4}{}", re[0], re[re.len() - 1], if decreasing { "" } else { " NOT DECREASING" }));
        }
    }
    let cols = top_variance_columns(&train_set, 10);
    let (tr10, ho10) = (train_set.select_columns(&cols).unwrap(), heldout.select_columns(&cols).unwrap());
    for (name, mode, gamma) in [("qidbm", Mode::Qidbm, 1.0), ("dbm", Mode::Dbm, 0.0)] {
        for seed in 0..3u64 {
            let cfg = CdConfig { k: 1, learning_rate: 0.05, batch_size: 50, epochs: 50, seed, mode, ..CdConfig::default() };
            let mut p = QidbmParams::init(10, 8, 4, seed).with_gamma(&[gamma]).unwrap();
            let before = exact_nll(&p, &ho10, &cfg).unwrap();
            let res = train(&tr10, Some(&ho10), &mut p, &cfg, &mut |_, _| Ok(()));
            match res.and_then(|_| exact_nll(&p, &ho10, &cfg)) {
                Ok(after) if after.is_finite() => lines.push(format!("{name}/{seed} 10-unit NLL {before:.3}->{after:.3}")),
                other => {
                    ok = false;
                    lines.push(format!("{name}/{seed} 10-unit NLL failed: {other:?}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 1800.0;
    let params = QidbmParams::init(64, 32, 16, 0);
    let trainable = params.n_params() - params.m;
    check(ok, format!("64-32-16, {trainable} trainable parameters each, {secs:.0}s; {}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 11. Memory contract at MNIST scale.

fn bit_plane_data(rows: usize) -> BinaryDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pixels: Vec<u8> = (0..rows * 784).map(|_| rng.random()).collect();
    encode_8bit_planes(&ImageSet::new(rows, 28, 28, pixels).unwrap(), Provenance::new("noise")).unwrap()
}

fn memory_contract() -> Outcome {
    let data = bit_plane_data(2);
    let (l, m, n) = (data.d_v(), 6272, 1);
    let limit = l.max(m).max(n).pow(2) * std::mem::size_of::<f64>();
    let mut lines = Vec::new();
    let mut ok = l == 6272;
    let mut peaks = Vec::new();
    for (name, mode, gamma) in [("qidbm", Mode::Qidbm, 1.0), ("dbm", Mode::Dbm, 0.0)] {
        let base = reset_audit();
        let mut p = QidbmParams::init(l, m, n, 1).with_gamma(&[gamma]).unwrap();
        let cfg = CdConfig { batch_size: 2, epochs: 1, mode, ..CdConfig::default() };
        let report = train(&data, None, &mut p, &cfg, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
        let largest = LARGEST.load(Ordering::Relaxed);
        let peak = PEAK_LIVE.load(Ordering::Relaxed) - base;
        drop(p);
        ok &= largest <= limit && report.epochs.len() == 1 && report.epochs[0].recon_error.is_finite();
        peaks.push(peak);
        lines.push(format!("{name}: largest allocation {:.1} MiB, peak {:.1} MiB", largest as f64 / 1048576.0, peak as f64 / 1048576.0));
    }
    // Same footprint as the classical machine, up to per-unit vectors.
    let extra = peaks[0] as f64 - peaks[1] as f64;
    ok &= extra <= 1048576.0;
    check(
        ok,
        format!(
            "6272-6272-1, one batch; limit {:.1} MiB (6272^2 f64); {}; QiDBM minus DBM peak {:.3} MiB",
            limit as f64 / 1048576.0,
            lines.join("; "),
            extra / 1048576.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 12. Deterministic CLI outputs.

fn doem(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_doem"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("doem {}: {}", args.join(" "), String::from_utf8_lossy(&status.stderr)))
    }
}

/// Every file under `dir` except wall-clock timings, as (relative name, bytes).
fn primary_outputs(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.csv" {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let digits = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/digits8x8-images-idx3-ubyte.gz");
    let digits = digits.to_str().unwrap();
    let d = |name: &str| root.join("a").join(name).to_string_lossy().into_owned();
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gen-bernoulli", "gen-data bernoulli --n 6 --modes 3 --samples 300 --seed 5".split(' ').map(String::from).collect()),
        ("gen-digits", format!("gen-data mnist --input {digits} --bits 1 --limit 400").split(' ').map(String::from).collect()),
        (
            "train-doem",
            format!("train-doem --data {} --hidden 2 --iters 20 --checkpoint-every 5 --seed 3", d("gen-bernoulli/data.bin"))
                .split(' ')
                .map(String::from)
                .collect(),
        ),
        (
            "train-cd",
            format!(
                "train-cd --data {} --holdout-rows 50 --hidden 16 8 --epochs 3 --batch 25 --lr 0.05 --seed 4 --checkpoint-every 1",
                d("gen-digits/data.bin")
            )
            .split(' ')
            .map(String::from)
            .collect(),
        ),
        (
            "eval-qbm",
            format!("eval --model {} --data {} --table {}", d("train-doem/model.json"), d("gen-bernoulli/data.bin"), d("gen-bernoulli/table.csv"))
                .split(' ')
                .map(String::from)
                .collect(),
        ),
        (
            "eval-qidbm",
            format!("eval --model {} --data {} --n-samples 16 --seed 2", d("train-cd/model.bin"), d("gen-digits/data.bin"))
                .split(' ')
                .map(String::from)
                .collect(),
        ),
        (
            "sample",
            format!("sample --model {} --n 16 --burn-in 50 --seed 8", d("train-cd/model.bin")).split(' ').map(String::from).collect(),
        ),
    ];
    let mut compared = 0;
    for (name, args) in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (first, second, replay) = (root.join("a").join(name), root.join("b").join(name), root.join("c").join(name));
        doem(&args, &first)?;
        doem(&args, &second)?;
        let config = first.join("config.toml");
        doem(&["run", "--config", config.to_str().unwrap()], &replay)?;
        let reference = primary_outputs(&first);
        for other in [&second, &replay] {
            if primary_outputs(other) != reference {
                return Err(format!("{name}: outputs in {} differ from {}", other.display(), first.display()));
            }
        }
        compared += reference.len();
    }
    check(true, format!("{} commands run twice and replayed from config.toml, {compared} files byte-identical", commands.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("1 ascent at desk scale", ascent),
        ("2 QELBO saturation", qelbo_saturation),
        ("3 Petz map and projection", petz_projection),
        ("4 classical reduction", classical_reduction),
        ("5 mixture relative entropy", mixture_reduction),
        ("6 single-unit formulas", unit_formulas),
        ("7 clamped conditional", clamped_conditional),
        ("8 gradient exactness", gradient_exactness),
        ("9 CD classical limit", cd_classical_limit),
        ("10 digits comparison", digits_comparison),
        ("11 memory contract", memory_contract),
        ("12 determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
