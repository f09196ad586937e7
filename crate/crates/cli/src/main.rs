//! `lsg`: train, sweep, inspect and account differentially private runs.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or config errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsg_core::accountant::{calibrate_sigma, PrivacyLedger};
use lsg_core::experiment::{self, ExperimentConfig, RunManifest, SweepConfig};
use lsg_core::model::Checkpoint;
use lsg_core::Error;

const DEFAULT_CONFIG: &str = include_str!("../../../configs/mnist-mlp.toml");

#[derive(Parser)]
#[command(
    name = "lsg",
    version,
    about = "Differentially private training with low-rank and sparse gradients"
)]
struct Cli {
    /// Directory that relative data paths are resolved against.
    #[arg(long, global = true, env = "LSG_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, checkpoint and manifest.
    Train(TrainArgs),
    /// Run every (method, r, p, ε) cell of a grid over several seeds.
    Sweep(SweepArgs),
    /// Dump |W|, |∂W| and importance CSVs for one layer of a checkpoint.
    Inspect(InspectArgs),
    /// Print ε for a Poisson-subsampled Gaussian schedule.
    Account(AccountArgs),
    /// Print the smallest σ that meets a target ε.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; the built-in MNIST preset when omitted.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Rerun the configuration recorded in a run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    method: Option<String>,
    #[arg(long = "r", alias = "rank")]
    rank: Option<usize>,
    #[arg(long = "p", alias = "sparsity")]
    sparsity: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    /// global | per-tensor
    #[arg(long)]
    clip_scope: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long = "eps", alias = "epsilon")]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// sgd | momentum | adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// poisson | fixed-size
    #[arg(long)]
    sampling: Option<String>,
    /// weights | factors
    #[arg(long)]
    importance: Option<String>,
    /// importance | random
    #[arg(long)]
    sparsify: Option<String>,
    #[arg(long)]
    sparsify_after: Option<usize>,
    #[arg(long)]
    warm_start: bool,
    /// same | dpsgd | frozen
    #[arg(long)]
    head: Option<String>,
    /// Network, e.g. mlp:128 or cnn:4-8.
    #[arg(long)]
    arch: Option<String>,
    /// Start from the weights of this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Extra `key=value` settings for the [train] table (TOML values).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), Error> {
        use toml::Value;
        let mut t = toml::Table::new();
        let mut put = |k: &str, v: Value| {
            t.insert(k.to_string(), v);
        };
        if let Some(m) = &self.method {
            let method: lsg_core::trainer::Method = m.parse()?;
            put("method", Value::String(m.clone()));
            // drop settings the new method does not take
            if !method.factorizes() && self.rank.is_none() {
                cfg.train.rank = None;
            }
            if !method.sparsifies() && self.sparsity.is_none() {
                cfg.train.sparsity = None;
            }
            if !method.is_private() {
                cfg.train.sigma = None;
                cfg.train.epsilon = None;
            }
        }
        if let Some(v) = self.rank {
            put("rank", Value::Integer(v as i64));
        }
        if let Some(v) = self.sparsity {
            put("sparsity", Value::Float(v));
        }
        if let Some(v) = self.clip {
            put("clip", Value::Float(v));
        }
        if let Some(v) = &self.clip_scope {
            put("clip_scope", Value::String(v.clone()));
        }
        match (self.sigma, self.epsilon) {
            (Some(s), e) => {
                put("sigma", Value::Float(s));
                if let Some(e) = e {
                    put("epsilon", Value::Float(e));
                }
            }
            (None, Some(e)) => {
                // a new target means σ is recalibrated
                cfg.train.sigma = None;
                put("epsilon", Value::Float(e));
            }
            (None, None) => {}
        }
        if let Some(v) = self.delta {
            put("delta", Value::Float(v));
        }
        if let Some(v) = self.batch_size {
            put("batch_size", Value::Integer(v as i64));
        }
        if let Some(v) = self.epochs {
            put("epochs", Value::Integer(v as i64));
        }
        if let Some(v) = &self.optimizer {
            put("optimizer", Value::String(v.clone()));
        }
        if let Some(v) = self.lr {
            put("lr", Value::Float(v));
        }
        if let Some(v) = self.seed {
            put("seed", Value::Integer(v as i64));
        }
        if let Some(v) = &self.sampling {
            put("sampling", Value::String(v.clone()));
        }
        if let Some(v) = &self.importance {
            put("importance", Value::String(v.clone()));
        }
        if let Some(v) = &self.sparsify {
            put("sparsify", Value::String(v.clone()));
        }
        if let Some(v) = self.sparsify_after {
            put("sparsify_after", Value::Integer(v as i64));
        }
        if self.warm_start {
            put("warm_start", Value::Boolean(true));
        }
        if let Some(v) = &self.head {
            put("head", Value::String(v.clone()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            let parsed: toml::Table = format!("v = {v}")
                .parse()
                .or_else(|_| format!("v = \"{v}\"").parse())
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            put(k.trim(), parsed["v"].clone());
        }
        if let Some(a) = &self.arch {
            cfg.model.architecture = a.clone();
            cfg.architecture()?;
        }
        if let Some(p) = &self.init {
            cfg.model.init = Some(p.clone());
        }
        cfg.set_train_values(&t)
    }
}

#[derive(Args)]
struct SweepArgs {
    /// TOML config with [train], [data], [model] and [sweep] tables.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip runs whose manifest records a completed run.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Run directory holding manifest.json and checkpoint.json.
    #[arg(long, required_unless_present = "checkpoint")]
    run: Option<PathBuf>,
    /// Checkpoint file; needs --config for the data.
    #[arg(long, requires = "config", conflicts_with = "run")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layer: String,
    /// Records used for the batch gradient.
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long)]
    q: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long = "eps", alias = "epsilon")]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long)]
    q: f64,
    #[arg(long)]
    steps: u64,
}

/// Separates usage/config mistakes (exit 2) from runtime failures (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownLayer(_) => {
                Failure::Usage(e.into())
            }
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::from_toml(DEFAULT_CONFIG),
    }
}

fn cmd_train(data_dir: &Path, args: TrainArgs) -> Result<(), Failure> {
    let (mut cfg, data_dir) = match &args.manifest {
        Some(m) => {
            let manifest = RunManifest::load(m)?;
            (manifest.config, manifest.data_dir)
        }
        None => (load_config(args.config.as_deref())?, data_dir.to_path_buf()),
    };
    args.overrides.apply(&mut cfg)?;
    let result = experiment::run(&cfg, &data_dir, &args.out)?;
    let last = result.history.last();
    println!(
        "run {} finished: epochs={} test_accuracy={} epsilon={} sigma={}",
        args.out.display(),
        result.history.len(),
        last.map_or("n/a".into(), |r| r.test_accuracy.to_string()),
        experiment::format_epsilon(result.manifest.epsilon),
        result
            .manifest
            .sigma
            .map_or("none".into(), |s| s.to_string()),
    );
    Ok(())
}

fn cmd_sweep(data_dir: &Path, args: SweepArgs) -> Result<(), Failure> {
    let cfg = SweepConfig::load(&args.config)?;
    let cells = experiment::sweep(&cfg, data_dir, &args.out, args.resume)?;
    println!("cell,runs,failed,mean_accuracy,std_accuracy");
    let mut failed = 0;
    for c in &cells {
        failed += c.failures.len();
        println!(
            "{},{},{},{},{}",
            c.cell.name(),
            c.accuracies.len(),
            c.failures.len(),
            c.mean(),
            c.std()
        );
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{failed} run(s) failed; see {}",
            args.out.join(experiment::SUMMARY).display()
        )));
    }
    Ok(())
}

fn cmd_inspect(data_dir: &Path, args: InspectArgs) -> Result<(), Failure> {
    let (checkpoint, cfg, data_dir) = match (&args.run, &args.checkpoint) {
        (Some(run), _) => {
            let m = RunManifest::load(&run.join(experiment::MANIFEST))?;
            (run.join(&m.checkpoint), m.config, m.data_dir)
        }
        (None, Some(ck)) => (
            ck.clone(),
            load_config(args.config.as_deref())?,
            data_dir.to_path_buf(),
        ),
        (None, None) => unreachable!("clap requires one of --run/--checkpoint"),
    };
    let ck = Checkpoint::load(&checkpoint)?;
    let net = ck.to_network()?;
    let (train, _) = cfg.data.load(&data_dir)?;
    if ck.normalization.is_some() && train.normalization() != ck.normalization.as_ref() {
        log::warn!("checkpoint normalization differs from the data config's");
    }
    let out = experiment::inspect(&net, &train, &args.layer, args.batch, &args.out)?;
    println!(
        "wrote {}x{} grids to {}",
        out.weight_abs.rows(),
        out.weight_abs.cols(),
        args.out.display()
    );
    Ok(())
}

fn cmd_account(args: AccountArgs) -> Result<(), Failure> {
    let mut ledger = PrivacyLedger::new(args.q, args.sigma)?;
    ledger.step_n(args.steps);
    let (eps, alpha) = ledger.epsilon_and_order(args.delta)?;
    println!("epsilon={eps} alpha={alpha}");
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), Failure> {
    let sigma = calibrate_sigma(args.epsilon, args.delta, args.q, args.steps)?;
    println!("sigma={sigma}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&cli.data_dir, a),
        Command::Sweep(a) => cmd_sweep(&cli.data_dir, a),
        Command::Inspect(a) => cmd_inspect(&cli.data_dir, a),
        Command::Account(a) => cmd_account(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
