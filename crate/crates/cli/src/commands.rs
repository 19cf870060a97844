//! Command implementations. Each takes a resolved config and an output
//! directory and returns a JSON summary.

use std::fs;
use std::path::{Path, PathBuf};

use doem_core::container::MAGIC;
use doem_core::data::dump::{load_dataset, pgm_grid, rows_to_images, save_dataset, to_json, DatasetManifest, ImageShape};
use doem_core::data::encode::{binarize_1bit, downscale_28_to_8, encode_8bit_planes};
use doem_core::data::idx::{read_idx, verify_sha256, ImageSet};
use doem_core::data::mixture::{gen_bernoulli_mixture, MixtureTable, EXACT_TABLE_CAP};
use doem_core::data::{BinaryDataset, Provenance};
use doem_core::doem::run_doem;
use doem_core::models::{build_qbm_hamiltonian, cqlvm_blocks, gibbs_state, model_marginal, QbmSpec};
use doem_core::qidbm::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
use doem_core::qidbm::{
    exact_log_marginals, generate, reconstruction_error, train, CdConfig, EpochStats, Mode, QidbmParams, Sampler,
    EXACT_NLL_CAP,
};
use doem_core::qinfo::relative_entropy;
use doem_core::linalg::DensityOperator;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{EvalConfig, GenDataConfig, MnistConfig, RunConfig, SampleConfig, TrainCdConfig, TrainDoemConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn write(out: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = out.join(name);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn load_data(path: &Path) -> Result<(BinaryDataset, Option<DatasetManifest>)> {
    Ok(load_dataset(path)?)
}

/// Runs one resolved config, writing `config.toml` first.
pub fn execute(config: &RunConfig, out: &Path) -> Result<Value> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(out, crate::config::CONFIG_FILE, config.to_toml())?;
    let hash = config.hash();
    match config {
        RunConfig::GenData(c) => gen_data(c, out),
        RunConfig::TrainDoem(c) => train_doem(c, out),
        RunConfig::TrainCd(c) => train_cd(c, out, &hash),
        RunConfig::Eval(c) => eval(c, out),
        RunConfig::Sample(c) => sample(c, out),
    }
}

fn gen_data(c: &GenDataConfig, out: &Path) -> Result<Value> {
    match c {
        GenDataConfig::Bernoulli(spec) => {
            let (ds, table) = gen_bernoulli_mixture(spec)?;
            let data = out.join("data.bin");
            save_dataset(&data, &ds, None)?;
            let mut summary = json!({ "data": data, "rows": ds.len(), "d_v": ds.d_v() });
            if let Some(t) = table {
                summary["table"] = json!(write(out, "table.csv", t.to_csv()?)?);
            }
            Ok(summary)
        }
        GenDataConfig::Mnist(m) => gen_mnist(m, out),
    }
}

fn gen_mnist(c: &MnistConfig, out: &Path) -> Result<Value> {
    if let Some(hash) = &c.sha256 {
        verify_sha256(&c.input, hash)?;
    }
    let mut images = ImageSet::try_from(read_idx(&c.input)?)?;
    if let Some(n) = c.limit {
        images = images.take(n);
    }
    if c.downscale {
        images = downscale_28_to_8(&images)?;
    }
    let provenance = Provenance::new(c.input.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned()));
    let ds = match c.bits {
        1 => binarize_1bit(&images, c.threshold, provenance)?,
        8 => encode_8bit_planes(&images, provenance)?,
        b => return Err(CliError::validation(format!("--bits must be 1 or 8, got {b}"))),
    };
    let mut shape = Some(ImageShape { rows: images.rows, cols: images.cols, bits: c.bits });
    let ds = match &c.columns {
        Some(cols) => {
            shape = None;
            ds.select_columns(cols)?
        }
        None => ds,
    };
    let data = out.join("data.bin");
    save_dataset(&data, &ds, shape)?;
    Ok(json!({ "data": data, "rows": ds.len(), "d_v": ds.d_v() }))
}

fn train_doem(c: &TrainDoemConfig, out: &Path) -> Result<Value> {
    if c.visible_gamma != 0.0 {
        return Err(CliError::validation(format!(
            "refusing visible transverse field {}: DO-EM needs a CQ-LVM, and a σx term on a visible qubit \
             mixes visible basis states so the Hamiltonian is no longer block diagonal in the visible basis \
             (the CQ-LVM condition: Γ_i = 0 for every visible unit)",
            c.visible_gamma
        )));
    }
    let (ds, _) = load_data(&c.data)?;
    let mut spec = QbmSpec::random(ds.d_v(), c.hidden, c.init_scale, c.gamma, c.doem.seed);
    let template = spec.clone();
    let mut saved = Vec::new();
    let mut hook = |iter: usize, theta: &[f64]| -> doem_core::Result<()> {
        let mut s = template.clone();
        let terms = s.cqlvm_terms();
        s.set_theta(&terms, theta);
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| doem_core::Error::io(&dir, e))?;
        let name = format!("iter-{iter:06}.json");
        let path = dir.join(&name);
        fs::write(&path, s.to_json()).map_err(|e| doem_core::Error::io(&path, e))?;
        saved.push(format!("checkpoints/{name}"));
        Ok(())
    };
    let result = run_doem(&ds, &mut spec, &c.doem, c.path, &mut hook)?;
    write(out, "trace.csv", result.trace.to_csv(false))?;
    write(out, "timing.csv", result.trace.timing_csv())?;
    write(out, "model.json", spec.to_json())?;
    let last = result.trace.records.last();
    let summary = json!({
        "stop": result.stop,
        "iterations": last.map_or(0, |r| r.iter),
        "loglik": last.map(|r| r.loglik),
        "rel_entropy": last.map(|r| r.rel_entropy),
        "checkpoints": saved,
    });
    write(out, "summary.json", to_json(&summary))?;
    Ok(summary)
}

fn metrics_csv(epochs: &[EpochStats], nll: Option<&[f64]>) -> String {
    let mut s = String::from("epoch,recon_error,free_energy_train,free_energy_heldout");
    if nll.is_some() {
        s.push_str(",nll_heldout");
    }
    s.push('\n');
    for (k, e) in epochs.iter().enumerate() {
        s.push_str(&format!("{},{},{},{}", e.epoch, e.recon_error, e.free_energy_train, e.free_energy_heldout));
        if let Some(v) = nll {
            s.push_str(&format!(",{}", v[k]));
        }
        s.push('\n');
    }
    s
}

fn train_cd(c: &TrainCdConfig, out: &Path, hash: &str) -> Result<Value> {
    let (data, manifest) = load_data(&c.data)?;
    let image = manifest.as_ref().and_then(|m| m.image);
    if let Some(bits) = c.bits {
        match image {
            Some(shape) if shape.bits == bits => {}
            Some(shape) => {
                return Err(CliError::validation(format!("data has {} bit(s) per pixel, --bits says {bits}", shape.bits)))
            }
            None => return Err(CliError::validation(format!("--bits {bits} given but {} is not image data", c.data.display()))),
        }
    }
    let (train_set, heldout) = match &c.heldout {
        Some(path) => (data, Some(load_data(path)?.0)),
        None if c.holdout_rows > 0 => {
            if c.holdout_rows >= data.len() {
                return Err(CliError::validation(format!("cannot hold out {} of {} rows", c.holdout_rows, data.len())));
            }
            let cut = data.len() - c.holdout_rows;
            (data.slice(0, cut), Some(data.slice(cut, data.len())))
        }
        None => (data, None),
    };
    let [m, n] = c.hidden;
    let mut params = QidbmParams::init(train_set.d_v(), m, n, c.cd.seed).with_gamma(&c.gamma)?;
    if c.exact_nll {
        if heldout.is_none() {
            return Err(CliError::validation("exact NLL needs a held-out split"));
        }
        if params.l + params.n > EXACT_NLL_CAP {
            return Err(CliError::from(doem_core::Error::QubitCap {
                what: "exact held-out NLL".into(),
                qubits: params.l + params.n,
                cap: EXACT_NLL_CAP,
            }));
        }
    }
    let mut manifest = CheckpointManifest::for_params(&params);
    manifest.seed = c.cd.seed;
    manifest.config_hash = hash.to_string();
    manifest.encoding = c.cd.encoding;
    manifest.field = c.cd.field;
    manifest.image = image;

    let mut nll = Vec::new();
    let mut on_epoch = |stats: &EpochStats, p: &QidbmParams| -> doem_core::Result<()> {
        if c.exact_nll {
            let h = heldout.as_ref().expect("checked above");
            nll.push(doem_core::qidbm::exact_nll(p, h, &c.cd)?);
        }
        let epoch = stats.epoch + 1;
        if c.checkpoint_every > 0 && epoch % c.checkpoint_every == 0 {
            let mut man = manifest.clone();
            man.epoch = epoch;
            let dir = out.join("checkpoints");
            fs::create_dir_all(&dir).map_err(|e| doem_core::Error::io(&dir, e))?;
            save_checkpoint(&dir.join(format!("epoch-{epoch:04}.bin")), p, &man)?;
        }
        Ok(())
    };
    let report = train(&train_set, heldout.as_ref(), &mut params, &c.cd, &mut on_epoch)?;
    write(out, "metrics.csv", metrics_csv(&report.epochs, c.exact_nll.then_some(nll.as_slice())))?;
    let mut timing = String::from("epoch,seconds\n");
    for e in &report.epochs {
        timing.push_str(&format!("{},{}\n", e.epoch, e.seconds));
    }
    write(out, "timing.csv", timing)?;
    manifest.epoch = c.cd.epochs;
    let model = out.join("model.bin");
    save_checkpoint(&model, &params, &manifest)?;
    let last = report.epochs.last();
    let summary = json!({
        "model": "model.bin",
        "epochs": report.epochs.len(),
        "recon_error": last.map(|e| e.recon_error),
        "nll_heldout": nll.last(),
    });
    write(out, "summary.json", to_json(&summary))?;
    Ok(summary)
}

/// Either model family, detected from the file contents.
enum Model {
    Qbm(QbmSpec),
    Qidbm(QidbmParams, CheckpointManifest),
}

fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.starts_with(&MAGIC) {
        let (p, m) = load_checkpoint(path)?;
        return Ok(Model::Qidbm(p, m));
    }
    let text = String::from_utf8(bytes).map_err(|_| CliError::validation(format!("{} is neither a checkpoint nor a model spec", path.display())))?;
    Ok(Model::Qbm(QbmSpec::from_json(&text)?))
}

fn cd_config_for(manifest: &CheckpointManifest, seed: u64) -> CdConfig {
    CdConfig { encoding: manifest.encoding, field: manifest.field, mode: Mode::Qidbm, seed, ..CdConfig::default() }
}

#[derive(Serialize, Default)]
struct Report {
    model: String,
    visible_units: usize,
    exact: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    kl_table: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rel_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recon_error: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    files: Vec<String>,
}

/// `Σ t ln(t/p)` over the support of `t`.
fn kl(t: &[f64], p: &[f64]) -> f64 {
    t.iter().zip(p).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

fn read_table(path: &Path, width: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let t = MixtureTable::from_csv(&text)?;
    if t.len() != 1 << width {
        return Err(CliError::validation(format!("table has {} rows, model needs {}", t.len(), 1usize << width)));
    }
    Ok(t)
}

/// Fills the exact metrics from visible probabilities `p`.
fn exact_metrics(report: &mut Report, p: &[f64], c: &EvalConfig, data: Option<&BinaryDataset>, width: usize) -> Result<()> {
    report.exact = true;
    if let Some(path) = &c.table {
        report.kl_table = Some(kl(&read_table(path, width)?, p));
    }
    if let Some(ds) = data {
        let emp = ds.empirical()?;
        let ll: f64 = emp.counts.iter().map(|(&i, &n)| n as f64 * p[i as usize].ln()).sum::<f64>() / emp.total as f64;
        report.nll = Some(-ll);
        report.rel_entropy = Some(-emp.entropy() - ll);
    }
    Ok(())
}

fn eval(c: &EvalConfig, out: &Path) -> Result<Value> {
    let data = c.data.as_deref().map(load_data).transpose()?.map(|d| d.0);
    let mut report = Report::default();
    match load_model(&c.model)? {
        Model::Qbm(spec) => {
            report.model = "qbm".into();
            report.visible_units = spec.m;
            if let Some(ds) = &data {
                if ds.d_v() != spec.m {
                    return Err(CliError::validation(format!("data has {} bits, model has {} visible units", ds.d_v(), spec.m)));
                }
            }
            if spec.is_cqlvm() {
                if spec.m > EXACT_TABLE_CAP {
                    return Err(doem_core::Error::QubitCap { what: "exact visible distribution".into(), qubits: spec.m, cap: EXACT_TABLE_CAP }.into());
                }
                let p = cqlvm_blocks(&spec)?.block_gibbs()?.visible_probabilities();
                exact_metrics(&mut report, &p, c, data.as_ref(), spec.m)?;
            } else {
                // Visible transverse fields: the marginal is not diagonal.
                let rho_v = model_marginal(&gibbs_state(&build_qbm_hamiltonian(&spec)?)?, spec.m)?;
                report.exact = true;
                if let Some(path) = &c.table {
                    let t = DensityOperator::diagonal(vec![2; spec.m], &read_table(path, spec.m)?)?;
                    report.kl_table = Some(relative_entropy(&t, &rho_v)?);
                }
                if let Some(ds) = &data {
                    let eta = ds.empirical()?.density()?;
                    let ll = doem_core::models::log_likelihood(&eta, &rho_v)?;
                    report.nll = Some(-ll);
                    report.rel_entropy = Some(relative_entropy(&eta, &rho_v)?);
                }
            }
        }
        Model::Qidbm(params, manifest) => {
            report.model = "qidbm".into();
            report.visible_units = params.l;
            let cfg = cd_config_for(&manifest, c.seed);
            let s = Sampler::new(&params, &cfg);
            if let Some(ds) = &data {
                if ds.d_v() != params.l {
                    return Err(CliError::validation(format!("data has {} bits, model has {} visible units", ds.d_v(), params.l)));
                }
                report.recon_error = Some(reconstruction_error(&s, ds));
            }
            if params.l + params.n <= EXACT_NLL_CAP {
                let p: Vec<f64> = exact_log_marginals(&s)?.into_iter().map(f64::exp).collect();
                exact_metrics(&mut report, &p, c, data.as_ref(), params.l)?;
            } else if c.exact || c.table.is_some() {
                return Err(doem_core::Error::QubitCap {
                    what: "exact QiDBM metrics".into(),
                    qubits: params.l + params.n,
                    cap: EXACT_NLL_CAP,
                }
                .into());
            } else {
                report.files = dump_samples(&params, &manifest, &cfg, c.n_samples, c.burn_in, c.seed, out)?;
            }
        }
    }
    let path = write(out, "report.json", to_json(&report))?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    v["report"] = json!(path);
    Ok(v)
}

fn dump_samples(
    params: &QidbmParams,
    manifest: &CheckpointManifest,
    cfg: &CdConfig,
    n: usize,
    burn_in: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<String>> {
    let samples = generate(params, cfg, n, burn_in, seed)?;
    let bin = out.join("samples.bin");
    save_dataset(&bin, &samples, manifest.image)?;
    let mut files = vec!["samples.bin".to_string()];
    if let Some(shape) = manifest.image {
        let images = rows_to_images(&samples, shape)?;
        let per_row = (n as f64).sqrt().ceil() as usize;
        write(out, "samples.pgm", pgm_grid(&images, per_row))?;
        files.push("samples.pgm".into());
    }
    Ok(files)
}

fn sample(c: &SampleConfig, out: &Path) -> Result<Value> {
    let Model::Qidbm(params, manifest) = load_model(&c.model)? else {
        return Err(CliError::validation("sampling needs a QiDBM checkpoint; use eval for QBM models"));
    };
    let cfg = cd_config_for(&manifest, c.seed);
    let files = dump_samples(&params, &manifest, &cfg, c.n, c.burn_in, c.seed, out)?;
    Ok(json!({ "rows": c.n, "files": files }))
}
