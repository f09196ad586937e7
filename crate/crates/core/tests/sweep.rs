//! Sweep layout, summary statistics and resumption.

use std::fs;
use std::path::Path;

use lsg_core::experiment::{
    final_accuracy, mean, sample_std, sweep, SweepConfig, MANIFEST, METRICS, SUMMARY,
};

const SWEEP: &str = r#"
[train]
sigma = 1.0
batch_size = 40
epochs = 2
lr = 0.3

[data]
kind = "blobs"
classes = 3
dim = 4
n = 200

[model]
architecture = "mlp:6"

[sweep]
methods = ["lsg"]
ranks = [1, 2]
sparsities = [0.2, 0.5]
epsilons = [4.0]
seeds = [0, 1]

[sweep.overrides.lsg]
lr = 0.2
"#;

#[test]
fn grid_runs_every_cell_and_seed() {
    let cfg: SweepConfig = toml::from_str(SWEEP).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cells = sweep(&cfg, Path::new("."), dir.path(), false).unwrap();
    assert_eq!(cells.len(), 4);

    let mut runs = 0;
    for c in &cells {
        assert!(c.failures.is_empty(), "{:?}", c.failures);
        let mut accs = Vec::new();
        for seed in 0..2 {
            let run = dir.path().join(c.cell.name()).join(format!("seed{seed}"));
            assert!(run.join(MANIFEST).exists());
            accs.push(final_accuracy(&run.join(METRICS)).unwrap().unwrap());
            runs += 1;
        }
        assert_eq!(accs, c.accuracies);
    }
    assert_eq!(runs, 8);

    let text = fs::read_to_string(dir.path().join(SUMMARY)).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for (row, c) in rows.iter().zip(&cells) {
        assert_eq!(&row[0], c.cell.name());
        assert_eq!(&row[5], "2");
        let m: f64 = row[7].parse().unwrap();
        let s: f64 = row[8].parse().unwrap();
        assert_eq!(m, mean(&c.accuracies));
        assert_eq!(s, sample_std(&c.accuracies));
    }
    assert!(rows.iter().any(|r| &r[0] == "lsg_r2_p0.5_eps4"));

    // resuming repeats nothing and reproduces the summary
    let again = sweep(&cfg, Path::new("."), dir.path(), true).unwrap();
    assert!(again.iter().all(|c| c.skipped == 2));
    assert_eq!(text, fs::read_to_string(dir.path().join(SUMMARY)).unwrap());
}

#[test]
fn resume_reruns_incomplete_runs() {
    let mut cfg: SweepConfig = toml::from_str(SWEEP).unwrap();
    cfg.sweep.ranks = vec![2];
    cfg.sweep.sparsities = vec![0.5];
    let dir = tempfile::tempdir().unwrap();
    sweep(&cfg, Path::new("."), dir.path(), false).unwrap();
    let run = dir.path().join("lsg_r2_p0.5_eps4").join("seed1");
    let before = fs::read(run.join(METRICS)).unwrap();
    fs::remove_file(run.join(METRICS)).unwrap();
    let cells = sweep(&cfg, Path::new("."), dir.path(), true).unwrap();
    assert_eq!(cells[0].skipped, 1);
    assert_eq!(before, fs::read(run.join(METRICS)).unwrap());
}
