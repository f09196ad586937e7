//! Config files, run directories, sweeps and weight/gradient inspection.
//!
//! A run directory holds exactly one `manifest.json` next to the files it
//! describes (`metrics.csv`, `checkpoint.json`). Config files are TOML with
//! `[train]`, `[data]` and `[model]` tables; sweep files add a `[sweep]`
//! table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState};
use crate::model::{Architecture, Checkpoint, LayerSpec, Network};
use crate::sparsity::{importance_of, UnitLayout};
use crate::trainer::{streams, train_with, EpochMetrics, Method, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const SUMMARY: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `mlp:128`, `cnn:4-8/tanh`, ...
    pub architecture: String,
    /// Checkpoint to start from instead of a random init. Its layers must
    /// match `architecture` on this dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.model.architecture.parse()
    }

    /// Applies `key = value` overrides to the `[train]` table, e.g.
    /// `("lr", "0.5")`, `("method", "lsg")`.
    pub fn set_train_values(&mut self, values: &toml::Table) -> Result<()> {
        self.train = merge(&self.train, values)?;
        self.train.validate()
    }
}

fn merge<T: Serialize + for<'de> Deserialize<'de>>(base: &T, values: &toml::Table) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in values {
        table.insert(k.clone(), v.clone());
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// Everything needed to trace and rerun one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub metrics: String,
    pub checkpoint: String,
    pub started: String,
    pub finished: Option<String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub sigma: Option<f64>,
    pub epsilon: Option<f64>,
    pub steps: Option<u64>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// `inf` for non-private runs, `uncertified` when no guarantee applies.
pub fn format_epsilon(eps: Option<f64>) -> String {
    match eps {
        None => "uncertified".into(),
        Some(e) if e.is_infinite() => "inf".into(),
        Some(e) => e.to_string(),
    }
}

fn metrics_writer(path: &Path, layers: &[String]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "epoch",
        "train_loss",
        "test_loss",
        "test_accuracy",
        "epsilon",
    ]
    .map(String::from)
    .to_vec();
    header.extend(layers.iter().map(|l| format!("kept_{l}")));
    w.write_record(&header)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(w)
}

fn metrics_record(row: &EpochMetrics) -> Vec<String> {
    let mut rec = vec![
        row.epoch.to_string(),
        row.train_loss.to_string(),
        row.test_loss.to_string(),
        row.test_accuracy.to_string(),
        format_epsilon(row.epsilon),
    ];
    rec.extend(row.kept.iter().map(|(_, k)| k.to_string()));
    rec
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub history: Vec<EpochMetrics>,
}

impl RunResult {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.history.last().map(|r| r.test_accuracy)
    }
}

/// Trains one configuration and writes its run directory.
pub fn run(config: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<RunResult> {
    config.train.validate()?;
    let arch = config.architecture()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = RunManifest {
        config: config.clone(),
        seed: config.train.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        data_dir: data_dir.to_path_buf(),
        output_dir: out_dir.to_path_buf(),
        metrics: METRICS.into(),
        checkpoint: CHECKPOINT.into(),
        started: now(),
        finished: None,
        status: RunStatus::Running,
        error: None,
        sigma: None,
        epsilon: None,
        steps: None,
        train_size: None,
        test_size: None,
    };
    manifest.save(out_dir)?;

    let result = (|| {
        let (train_set, test_set) = config.data.load(data_dir)?;
        manifest.train_size = Some(train_set.len());
        manifest.test_size = Some(test_set.len());
        let mut rng = RngState::with_stream(config.train.seed, streams::INIT);
        let mut net = arch.build(train_set.shape(), train_set.classes(), &mut rng)?;
        if let Some(path) = &config.model.init {
            net = init_from(path, &net)?;
        }
        let names: Vec<String> = net
            .trainable_layers()
            .iter()
            .map(|&i| net.layers()[i].name().to_string())
            .collect();
        let metrics_path = out_dir.join(METRICS);
        let mut writer = metrics_writer(&metrics_path, &names)?;
        let mut write_err = None;
        let outcome = train_with(net, &config.train, &train_set, &test_set, |row| {
            let r = writer
                .write_record(metrics_record(row))
                .map_err(Error::from)
                .and_then(|_| writer.flush().map_err(|e| Error::io(&metrics_path, e)));
            if let Err(e) = r {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(e);
        }
        Checkpoint::from_network(&outcome.network, train_set.normalization().cloned())
            .save(&out_dir.join(CHECKPOINT))?;
        Ok(outcome)
    })();

    manifest.finished = Some(now());
    match result {
        Ok(outcome) => {
            manifest.status = RunStatus::Completed;
            manifest.sigma = config.train.method.is_private().then_some(outcome.sigma);
            manifest.epsilon = outcome.epsilon;
            manifest.steps = Some(outcome.steps);
            manifest.save(out_dir)?;
            Ok(RunResult {
                manifest,
                history: outcome.history,
            })
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            manifest.save(out_dir)?;
            Err(e)
        }
    }
}

/// Loads a checkpoint and checks it has the layout `like` was built with.
pub fn init_from(path: &Path, like: &Network) -> Result<Network> {
    let ck = Checkpoint::load(path)?;
    if ck.input != like.input_shape() || ck.layers != like.specs() {
        return Err(Error::Config(format!(
            "{}: checkpoint layers do not match the configured architecture",
            path.display()
        )));
    }
    ck.to_network()
}

/// Reruns the configuration stored in a manifest into `out_dir`.
pub fn rerun(manifest: &Path, out_dir: &Path) -> Result<RunResult> {
    let m = RunManifest::load(manifest)?;
    run(&m.config, &m.data_dir, out_dir)
}

/// Reads the `test_accuracy` column of the last row of a metrics CSV.
pub fn final_accuracy(metrics: &Path) -> Result<Option<f64>> {
    let mut r = csv::Reader::from_path(metrics)?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "test_accuracy")
        .ok_or_else(|| Error::Format {
            path: metrics.to_path_buf(),
            msg: "no test_accuracy column".into(),
        })?;
    let mut last = None;
    for rec in r.records() {
        let rec = rec?;
        last = Some(rec[col].parse::<f64>().map_err(|_| Error::Format {
            path: metrics.to_path_buf(),
            msg: format!("bad accuracy `{}`", &rec[col]),
        })?);
    }
    Ok(last)
}

/// Grid of a sweep. Methods without a rank or sparsity ignore those axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    #[serde(default)]
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub sparsities: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Per-method `[train]` overrides, keyed by method name.
    #[serde(default)]
    pub overrides: BTreeMap<String, toml::Table>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    pub sweep: SweepSpec,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub method: Method,
    pub rank: Option<usize>,
    pub sparsity: Option<f64>,
    pub epsilon: f64,
}

impl SweepCell {
    pub fn name(&self) -> String {
        let mut s = self.method.to_string();
        if let Some(r) = self.rank {
            s += &format!("_r{r}");
        }
        if let Some(p) = self.sparsity {
            s += &format!("_p{p}");
        }
        if self.method.is_private() {
            s += &format!("_eps{}", self.epsilon);
        }
        s
    }
}

impl SweepSpec {
    /// Distinct cells in grid order.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells: Vec<SweepCell> = Vec::new();
        for &method in &self.methods {
            let ranks: Vec<Option<usize>> = if method.factorizes() {
                self.ranks.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            let sparsities: Vec<Option<f64>> = if method.sparsifies() {
                self.sparsities.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            let epsilons: Vec<f64> = if method.is_private() {
                self.epsilons.clone()
            } else {
                vec![f64::INFINITY]
            };
            for &rank in &ranks {
                for &sparsity in &sparsities {
                    for &epsilon in &epsilons {
                        let cell = SweepCell {
                            method,
                            rank,
                            sparsity,
                            epsilon,
                        };
                        if !cells.contains(&cell) {
                            cells.push(cell);
                        }
                    }
                }
            }
        }
        cells
    }

    fn cell_config(
        &self,
        base: &ExperimentConfig,
        cell: &SweepCell,
        seed: u64,
    ) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        if let Some(values) = self.overrides.get(cell.method.as_str()) {
            cfg.train = merge(&cfg.train, values)?;
        }
        let t = &mut cfg.train;
        t.method = cell.method;
        t.rank = cell.rank;
        t.sparsity = cell.sparsity;
        t.seed = seed;
        if cell.method.is_private() {
            t.epsilon = Some(cell.epsilon);
            t.sigma = None;
        } else {
            t.epsilon = None;
            t.sigma = None;
        }
        t.validate()?;
        Ok(cfg)
    }
}

/// Per-cell aggregate written to `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub cell: SweepCell,
    pub accuracies: Vec<f64>,
    pub failures: Vec<String>,
    pub skipped: usize,
}

impl CellSummary {
    pub fn mean(&self) -> f64 {
        mean(&self.accuracies)
    }

    pub fn std(&self) -> f64 {
        sample_std(&self.accuracies)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); 0 for a single value.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return if v.is_empty() { f64::NAN } else { 0.0 };
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn completed(dir: &Path) -> bool {
    RunManifest::load(&dir.join(MANIFEST)).is_ok_and(|m| m.status == RunStatus::Completed)
        && dir.join(METRICS).exists()
}

/// Runs every cell × seed into `out_dir/<cell>/seed<k>/` and writes
/// `out_dir/summary.csv`. Failed runs are recorded and the sweep continues.
/// With `resume`, runs whose manifest says completed are not repeated.
pub fn sweep(
    config: &SweepConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<Vec<CellSummary>> {
    let spec = &config.sweep;
    if spec.seeds.is_empty() || spec.methods.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one method and one seed".into(),
        ));
    }
    if spec.methods.iter().any(|m| m.factorizes()) && spec.ranks.is_empty() {
        return Err(Error::Config(
            "sweep over factorised methods needs ranks".into(),
        ));
    }
    if spec.methods.iter().any(|m| m.sparsifies()) && spec.sparsities.is_empty() {
        return Err(Error::Config(
            "sweep over sparse methods needs sparsities".into(),
        ));
    }
    if spec.methods.iter().any(|m| m.is_private()) && spec.epsilons.is_empty() {
        return Err(Error::Config(
            "sweep over private methods needs epsilons".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summaries = Vec::new();
    for cell in spec.cells() {
        let mut s = CellSummary {
            cell: cell.clone(),
            accuracies: Vec::new(),
            failures: Vec::new(),
            skipped: 0,
        };
        for &seed in &spec.seeds {
            let dir = out_dir.join(cell.name()).join(format!("seed{seed}"));
            if resume && completed(&dir) {
                s.skipped += 1;
                match final_accuracy(&dir.join(METRICS))? {
                    Some(a) => s.accuracies.push(a),
                    None => s.failures.push(format!("seed {seed}: empty metrics")),
                }
                continue;
            }
            let outcome = spec
                .cell_config(&config.base, &cell, seed)
                .and_then(|cfg| run(&cfg, data_dir, &dir));
            match outcome {
                Ok(r) => match r.final_accuracy() {
                    Some(a) => s.accuracies.push(a),
                    None => s.failures.push(format!("seed {seed}: no epochs run")),
                },
                Err(e) => {
                    log::warn!("{} seed {seed} failed: {e}", cell.name());
                    s.failures.push(format!("seed {seed}: {e}"));
                }
            }
        }
        summaries.push(s);
        write_summary(&out_dir.join(SUMMARY), &summaries)?;
    }
    write_summary(&out_dir.join(SUMMARY), &summaries)?;
    Ok(summaries)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary(path: &Path, cells: &[CellSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cell",
        "method",
        "rank",
        "sparsity",
        "epsilon",
        "runs",
        "failed",
        "mean_accuracy",
        "std_accuracy",
        "errors",
    ])?;
    for c in cells {
        w.write_record([
            c.cell.name(),
            c.cell.method.to_string(),
            opt(c.cell.rank),
            opt(c.cell.sparsity),
            format_epsilon(Some(c.cell.epsilon)),
            c.accuracies.len().to_string(),
            c.failures.len().to_string(),
            c.mean().to_string(),
            c.std().to_string(),
            c.failures.join("; "),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Files written by [`inspect`].
#[derive(Clone, Debug)]
pub struct Inspection {
    pub weight_abs: Matrix,
    pub grad_abs: Matrix,
    pub input_importance: Vec<f64>,
    pub output_importance: Vec<f64>,
}

fn write_grid(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["row".to_string()];
    header.extend((0..m.cols()).map(|j| format!("col{j}")));
    w.write_record(&header)?;
    for i in 0..m.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `weight_abs.csv` (`|W|`), `grad_abs.csv` (`|∂W|` of the mean loss
/// over the first `batch` records) and `importance.csv` for one layer, in
/// its matrix view (conv kernels flattened to `out × in·k²`).
pub fn inspect(
    net: &Network,
    data: &Dataset,
    layer: &str,
    batch: usize,
    out_dir: &Path,
) -> Result<Inspection> {
    let idx = net
        .layer_index(layer)
        .map_err(|_| Error::UnknownLayer(layer.to_string()))?;
    let Some(params) = net.layers()[idx].params() else {
        return Err(Error::UnknownLayer(format!("{layer} (no weights)")));
    };
    let layout = match net.layers()[idx].spec() {
        LayerSpec::Conv2d { .. } => UnitLayout::Conv {
            kernel_area: net.layers()[idx].kernel_area(),
        },
        _ => UnitLayout::Dense,
    };
    let w = &params.weight;
    let n = batch.clamp(1, data.len());
    let indices: Vec<usize> = (0..n).collect();
    let (x, y) = data.batch(&indices);
    let grads = net.per_sample_gradients(&x, &y)?;
    let pos = net
        .trainable_layers()
        .iter()
        .position(|&i| i == idx)
        .expect("layer has params");
    let grad_abs = grads.layers[pos].weight.sum().map(|v| (v / n as f64).abs());
    let weight_abs = w.map(f64::abs);
    let iv = importance_of(w, layout);

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_grid(&out_dir.join("weight_abs.csv"), &weight_abs)?;
    write_grid(&out_dir.join("grad_abs.csv"), &grad_abs)?;
    let path = out_dir.join("importance.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["axis", "index", "importance"])?;
    for (axis, v) in [("input", &iv.input), ("output", &iv.output)] {
        for (i, x) in v.iter().enumerate() {
            wtr.write_record([axis.to_string(), i.to_string(), x.to_string()])?;
        }
    }
    wtr.flush().map_err(|e| Error::io(&path, e))?;
    Ok(Inspection {
        weight_abs,
        grad_abs,
        input_importance: iv.input,
        output_importance: iv.output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
[train]
method = "lsg"
rank = 2
sparsity = 0.5
sigma = 1.0
batch_size = 40
epochs = 2
lr = 0.2

[data]
kind = "blobs"
classes = 3
dim = 4
n = 200

[model]
architecture = "mlp:8"
"#;

    #[test]
    fn config_round_trip_and_overrides() {
        let mut c = ExperimentConfig::from_toml(CONFIG).unwrap();
        assert_eq!(c.train.method, Method::Lsg);
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
        let mut o = toml::Table::new();
        o.insert("lr".into(), toml::Value::Float(0.05));
        c.set_train_values(&o).unwrap();
        assert_eq!(c.train.lr, 0.05);
        o.insert("bogus".into(), toml::Value::Integer(1));
        assert!(c.set_train_values(&o).is_err());
        assert!(ExperimentConfig::from_toml("[train]\nmethod = \"x\"").is_err());
    }

    #[test]
    fn run_writes_directory_and_rerun_matches() {
        let c = ExperimentConfig::from_toml(CONFIG).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let r = run(&c, Path::new("."), &a).unwrap();
        assert_eq!(r.manifest.status, RunStatus::Completed);
        let csv_a = fs::read_to_string(a.join(METRICS)).unwrap();
        assert!(csv_a
            .starts_with("epoch,train_loss,test_loss,test_accuracy,epsilon,kept_fc1,kept_fc2\n"));
        assert_eq!(csv_a.lines().count(), 3);
        let b = dir.path().join("b");
        rerun(&a.join(MANIFEST), &b).unwrap();
        assert_eq!(csv_a, fs::read_to_string(b.join(METRICS)).unwrap());
        assert!(Checkpoint::load(&a.join(CHECKPOINT))
            .unwrap()
            .normalization
            .is_some());
    }

    #[test]
    fn failed_run_is_recorded() {
        let mut c = ExperimentConfig::from_toml(CONFIG).unwrap();
        c.data.source = crate::data::DataSource::Csv {
            train: "missing.csv".into(),
            test: None,
            label: "label".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(run(&c, dir.path(), dir.path()).is_err());
        let m = RunManifest::load(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert!(m.error.is_some());
    }

    #[test]
    fn sweep_cells_are_deduplicated() {
        let spec = SweepSpec {
            methods: vec![Method::Lsg, Method::Rgp, Method::Dpsgd, Method::Sgd],
            ranks: vec![2, 4],
            sparsities: vec![0.1, 0.5],
            epsilons: vec![1.0, 3.0],
            seeds: vec![0],
            overrides: BTreeMap::new(),
        };
        let cells = spec.cells();
        // lsg 2·2·2, rgp 2·2, dpsgd 2, sgd 1
        assert_eq!(cells.len(), 8 + 4 + 2 + 1);
        assert_eq!(cells[0].name(), "lsg_r2_p0.1_eps1");
        assert_eq!(cells.last().unwrap().name(), "sgd");
    }

    #[test]
    fn statistics() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(sample_std(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(sample_std(&[4.0]), 0.0);
    }
}
