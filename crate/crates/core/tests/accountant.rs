//! Accountant monotonicity and calibration against the quadrature oracle.

use lsg_core::accountant::{calibrate_sigma, epsilon, epsilon_from_rdp, quadrature};

const DELTA: f64 = 1e-5;

fn increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] < w[1])
}

#[test]
fn epsilon_is_monotone_in_every_argument() {
    let by_sigma: Vec<f64> = [0.6, 0.8, 1.0, 1.5, 2.0, 4.0]
        .iter()
        .map(|&s| epsilon(0.05, s, 200, DELTA).unwrap())
        .collect();
    assert!(by_sigma.windows(2).all(|w| w[0] > w[1]), "{by_sigma:?}");

    let by_q: Vec<f64> = [0.001, 0.01, 0.05, 0.2, 0.5, 1.0]
        .iter()
        .map(|&q| epsilon(q, 1.2, 100, DELTA).unwrap())
        .collect();
    assert!(increasing(&by_q), "{by_q:?}");

    let by_steps: Vec<f64> = [1, 10, 100, 1000, 10_000]
        .iter()
        .map(|&t| epsilon(0.01, 1.0, t, DELTA).unwrap())
        .collect();
    assert!(increasing(&by_steps), "{by_steps:?}");

    let by_delta: Vec<f64> = [1e-3, 1e-5, 1e-7, 1e-9]
        .iter()
        .map(|&d| epsilon(0.05, 1.0, 400, d).unwrap())
        .collect();
    assert!(increasing(&by_delta), "{by_delta:?}");
}

/// ε from the integrated moments over a coarser order grid.
fn oracle_epsilon(q: f64, sigma: f64, steps: u64) -> f64 {
    let mut orders = vec![1.25, 1.5, 1.75, 2.5, 3.5, 4.5, 5.5];
    orders.extend((2..=64).map(f64::from));
    let rdp: Vec<f64> = orders
        .iter()
        .map(|&a| steps as f64 * quadrature::rdp(q, sigma, a, 4000))
        .collect();
    epsilon_from_rdp(&orders, &rdp, DELTA).unwrap().0
}

#[test]
fn calibration_agrees_with_quadrature_oracle() {
    let (q, steps, target) = (0.05, 400, 3.3);
    let sigma = calibrate_sigma(target, DELTA, q, steps).unwrap();
    let (mut lo, mut hi) = (0.3, 10.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if oracle_epsilon(q, mid, steps) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!(
        (sigma - hi).abs() / hi < 0.01,
        "calibrated {sigma}, oracle {hi}"
    );
}

#[test]
fn subsampled_epsilon_matches_quadrature() {
    for &(q, sigma, steps) in &[(0.01, 1.0, 1000), (0.05, 2.0, 400), (0.1, 0.8, 50)] {
        let series = epsilon(q, sigma, steps, DELTA).unwrap();
        let oracle = oracle_epsilon(q, sigma, steps);
        assert!(
            (series - oracle).abs() / oracle < 0.05,
            "{series} vs {oracle}"
        );
    }
}
