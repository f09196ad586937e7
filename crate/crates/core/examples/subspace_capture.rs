//! How much gradient energy the rank-r projection keeps along a training run.
//!
//! For every trainable layer and at the start of each epoch, the current
//! weight is decomposed with a fresh sketch and the probe-batch gradient `G`
//! is projected onto `P_L G + G P_R − P_L G P_R`. The table reports the kept
//! fraction `‖P(G)‖² / ‖G‖²` for the mean gradient and averaged over samples,
//! next to `(r(m+n) − r²) / mn`, the fraction a random subspace keeps.
//! A ratio near 1 means the factorisation sees no more signal than chance,
//! so cutting the noise dimension to `r(m+n)` leaves the signal-to-noise
//! ratio where full-rank DPSGD has it.
//!
//! Usage: cargo run --release -p lsg-core --example subspace_capture --
//!        <config.toml> <data dir> <method: dpsgd|sgd|rgp> [rank] [epochs]

use std::path::Path;

use lsg_core::experiment::{init_from, ExperimentConfig};
use lsg_core::linalg::{Matrix, RngState};
use lsg_core::reparam::{decompose, factor_gradients, reconstruct_gradient};
use lsg_core::trainer::{streams, HeadMode, Method, Trainer};

fn kept_fraction(g: &Matrix, w: &Matrix, r: usize, rng: &mut RngState) -> f64 {
    let f = decompose(w, r, rng).unwrap();
    let (dl, dr) = factor_gradients(g, &f).unwrap();
    let p = reconstruct_gradient(&dl, &dr, &f).unwrap();
    p.squared_norm() / g.squared_norm().max(1e-300)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 4 {
        eprintln!(
            "usage: subspace_capture <config.toml> <data dir> <dpsgd|sgd|rgp> [rank] [epochs]"
        );
        std::process::exit(2);
    }
    let mut cfg = ExperimentConfig::load(Path::new(&args[1])).unwrap();
    let (train_set, _) = cfg.data.load(Path::new(&args[2])).unwrap();
    let method: Method = args[3].parse().unwrap();
    let rank: usize = args.get(4).map_or(8, |s| s.parse().unwrap());
    let epochs: usize = args.get(5).map_or(10, |s| s.parse().unwrap());

    let arch = cfg.architecture().unwrap();
    let t = &mut cfg.train;
    t.method = method;
    t.epochs = epochs;
    t.rank = method.factorizes().then_some(rank);
    t.sparsity = None;
    if method == Method::Sgd {
        t.sigma = None;
        t.epsilon = None;
        t.lr = 0.1;
    } else {
        t.epsilon = Some(1.0);
        t.sigma = None;
        t.lr = 0.5;
        // the settings used by the trend sweep
        if method.factorizes() {
            t.clip = 2.0;
            t.head = HeadMode::Dpsgd;
        } else {
            t.clip = 1.0;
        }
    }
    let mut net = arch
        .build(
            train_set.shape(),
            train_set.classes(),
            &mut RngState::with_stream(t.seed, streams::INIT),
        )
        .unwrap();
    if let Some(path) = &cfg.model.init {
        net = init_from(path, &net).unwrap();
    }
    let steps = t.steps_per_epoch(train_set.len());
    let mut trainer = Trainer::new(net, &cfg.train, &train_set).unwrap();

    let probe: Vec<usize> = (0..500).collect();
    let (x, y) = train_set.batch(&probe);
    let mut rng = RngState::new(12345);
    println!("epoch,layer,random_subspace,mean_gradient,per_sample,mean_ratio,per_sample_ratio");
    for epoch in 0..=epochs {
        let net = trainer.network();
        let grads = net.per_sample_gradients(&x, &y).unwrap();
        for g in &grads.layers {
            let w = &net.params(g.layer).weight;
            let (m, n) = w.shape();
            let r = rank.min(m.min(n));
            let base = (r * (m + n) - r * r) as f64 / (m * n) as f64;
            let mean = kept_fraction(&g.weight.sum(), w, r, &mut rng);
            let per: f64 = (0..probe.len())
                .map(|s| kept_fraction(&g.weight.sample(s), w, r, &mut rng))
                .sum::<f64>()
                / probe.len() as f64;
            println!(
                "{epoch},{},{base:.4},{mean:.4},{per:.4},{:.2},{:.2}",
                net.layers()[g.layer].name(),
                mean / base,
                per / base
            );
        }
        if epoch < epochs {
            for _ in 0..steps {
                trainer.step(epoch).unwrap();
            }
        }
    }
}
