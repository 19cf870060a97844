use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use doem_cli::config::{EvalConfig, GenDataConfig, MnistConfig, SampleConfig, TrainCdConfig, TrainDoemConfig};
use doem_cli::{execute, CliError, RunConfig};
use doem_core::data::mixture::BernoulliMixtureSpec;
use doem_core::doem::{DoemConfig, DoemPath};
use doem_core::qidbm::{CdConfig, FieldConvention, Mode};
use doem_core::data::Encoding;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "doem", version, about = "Density-operator EM and quantum-interleaved Boltzmann machines")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "DOEM_OUT_DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest a dataset.
    GenData {
        #[command(subcommand)]
        source: GenSource,
    },
    /// Train a QBM with DO-EM.
    TrainDoem(TrainDoemArgs),
    /// Train a QiDBM or DBM with contrastive divergence.
    TrainCd(TrainCdArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Draw samples from a QiDBM checkpoint.
    Sample(SampleArgs),
    /// Replay a resolved config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum GenSource {
    /// Mixture of Bernoulli distributions around random modes.
    Bernoulli {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        modes: usize,
        #[arg(long, default_value_t = 0.9)]
        p: f64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// IDX image file (raw or gzip).
    Mnist {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        bits: u8,
        #[arg(long, default_value_t = 128)]
        threshold: u8,
        /// 28x28 to 8x8 before encoding.
        #[arg(long)]
        downscale: bool,
        #[arg(long)]
        limit: Option<usize>,
        /// Expected SHA-256 of the input file.
        #[arg(long)]
        sha256: Option<String>,
        /// Comma-separated visible columns to keep.
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<usize>>,
    },
}

#[derive(Args)]
struct TrainDoemArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    hidden: usize,
    /// Transverse field on the hidden qubits.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Transverse field on the visible qubits (refused unless zero).
    #[arg(long, default_value_t = 0.0)]
    visible_gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    init_scale: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    inner: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    #[arg(long)]
    no_ascent_check: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// auto, dense or blocks.
    #[arg(long, default_value = "auto", value_parser = kebab::<DoemPath>)]
    path: DoemPath,
}

#[derive(Args)]
struct TrainCdArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Trailing rows of the data held out for evaluation.
    #[arg(long, default_value_t = 0)]
    holdout_rows: usize,
    #[arg(long, num_args = 2, value_names = ["M", "N"], default_values_t = [500, 1000])]
    hidden: Vec<usize>,
    /// One value for every h1 unit, or one per unit (default 1 for qidbm, 0 for dbm).
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    /// qidbm or dbm.
    #[arg(long, default_value = "qidbm", value_parser = kebab::<Mode>)]
    mode: Mode,
    /// zero-one or plus-minus.
    #[arg(long, default_value = "zero-one", value_parser = kebab::<Encoding>)]
    encoding: Encoding,
    /// spin-consistent or raw.
    #[arg(long, default_value = "spin-consistent", value_parser = kebab::<FieldConvention>)]
    field: FieldConvention,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 600)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_gamma: bool,
    /// Expected bits per pixel of the data (1 or 8).
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    exact_nll: bool,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    table: Option<PathBuf>,
    /// Refuse rather than fall back when exact metrics are out of reach.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 64)]
    n_samples: usize,
    #[arg(long, default_value_t = 100)]
    burn_in: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses a kebab-case enum through its serde representation.
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn resolve(command: Command) -> Result<RunConfig, CliError> {
    Ok(match command {
        Command::GenData { source: GenSource::Bernoulli { n, modes, p, samples, seed } } => {
            RunConfig::GenData(GenDataConfig::Bernoulli(BernoulliMixtureSpec {
                n_bits: n,
                n_modes: modes,
                p,
                n_samples: samples,
                seed,
            }))
        }
        Command::GenData { source: GenSource::Mnist { input, bits, threshold, downscale, limit, sha256, columns } } => {
            RunConfig::GenData(GenDataConfig::Mnist(MnistConfig { input, bits, threshold, downscale, limit, sha256, columns }))
        }
        Command::TrainDoem(a) => RunConfig::TrainDoem(TrainDoemConfig {
            data: a.data,
            hidden: a.hidden,
            gamma: a.gamma,
            visible_gamma: a.visible_gamma,
            init_scale: a.init_scale,
            path: a.path,
            doem: DoemConfig {
                max_outer_iters: a.iters,
                m_step_inner_iters: a.inner,
                learning_rate: a.lr,
                grad_tol: a.grad_tol,
                ascent_check: !a.no_ascent_check,
                seed: a.seed,
                checkpoint_every: a.checkpoint_every,
            },
        }),
        Command::TrainCd(a) => {
            let gamma = a.gamma.unwrap_or_else(|| vec![if a.mode == Mode::Dbm { 0.0 } else { 1.0 }]);
            RunConfig::TrainCd(TrainCdConfig {
                data: a.data,
                heldout: a.heldout,
                holdout_rows: a.holdout_rows,
                hidden: [a.hidden[0], a.hidden[1]],
                gamma,
                bits: a.bits,
                exact_nll: a.exact_nll,
                checkpoint_every: a.checkpoint_every,
                cd: CdConfig {
                    k: a.k,
                    learning_rate: a.lr,
                    batch_size: a.batch,
                    epochs: a.epochs,
                    seed: a.seed,
                    encoding: a.encoding,
                    field: a.field,
                    mode: a.mode,
                    train_gamma: a.train_gamma,
                },
            })
        }
        Command::Eval(a) => RunConfig::Eval(EvalConfig {
            model: a.model,
            data: a.data,
            table: a.table,
            exact: a.exact,
            n_samples: a.n_samples,
            burn_in: a.burn_in,
            seed: a.seed,
        }),
        Command::Sample(a) => RunConfig::Sample(SampleConfig { model: a.model, n: a.n, burn_in: a.burn_in, seed: a.seed }),
        Command::Run { config } => RunConfig::load(&config)?,
    })
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::validation(format!("--threads {n}: {e}")))?;
    }
    let out = cli.out.ok_or_else(|| CliError::validation("no output directory: pass --out or set DOEM_OUT_DIR"))?;
    let mut config = resolve(cli.command)?;
    config.resolve_paths()?;
    execute(&config, &out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
