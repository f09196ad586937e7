//! Rényi-DP accounting for Poisson-subsampled Gaussian releases.
//!
//! Every step releases a sum of clipped per-sample gradients plus
//! `N(0, σ²C²)` noise over a batch where each record is included with
//! probability `q`. The Rényi divergence of order `α` of one such step is
//! `log A_α / (α − 1)` with
//!
//! ```text
//! A_α = E_{z∼N(0,σ²)} [ (1 − q + q·exp((2z − 1) / (2σ²)))^α ]
//! ```
//!
//! evaluated in closed form for integer `α` (binomial expansion) and by the
//! usual two-sided erfc series for fractional `α`. Steps compose additively
//! per order, and `(ε, δ)` is read off with
//! `ε = min_α rdp_α + ln((α−1)/α) − (ln δ + ln α)/(α − 1)`.
//!
//! The bound is valid but not tight: numerical (PRV/FFT) accountants report
//! smaller `ε` for the same `(q, σ, T)`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Orders used unless a ledger is built with its own grid.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.1, 1.25, 1.5, 1.75, 2.25, 2.5, 2.75, 3.5, 4.5, 5.5];
    orders.extend((2..=64).map(f64::from));
    orders.extend(
        [
            72, 80, 96, 112, 128, 160, 192, 256, 384, 512, 768, 1024, 1536, 2048, 3072, 4096, 6144,
            8192, 12288, 16384, 32768, 65536,
        ]
        .map(f64::from),
    );
    orders.sort_by(f64::total_cmp);
    orders
}

/// How minibatches are drawn; only Poisson sampling is covered by the bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    Poisson,
    FixedSize,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(Sampling::Poisson),
            "fixed" | "fixed-size" => Ok(Sampling::FixedSize),
            other => Err(Error::Config(format!("unknown sampling `{other}`"))),
        }
    }
}

/// Anything that can track the privacy cost of a sequence of releases.
pub trait Accountant {
    /// Records one release.
    fn step(&mut self);
    fn steps(&self) -> u64;
    fn epsilon(&self, delta: f64) -> Result<f64>;
}

/// Accumulated RDP curve of identical subsampled-Gaussian steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    q: f64,
    sigma: f64,
    sampling: Sampling,
    steps: u64,
    orders: Vec<f64>,
    step_rdp: Vec<f64>,
    rdp: Vec<f64>,
}

impl PrivacyLedger {
    /// `sigma` is the effective multiplier: noise std divided by the step's
    /// L2 sensitivity.
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        Self::with_orders(q, sigma, default_orders())
    }

    pub fn with_orders(q: f64, sigma: f64, orders: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidArgument(format!(
                "sampling rate must lie in [0, 1], got {q}"
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier must be non-negative, got {sigma}"
            )));
        }
        if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument(
                "RDP orders must be finite and greater than 1".into(),
            ));
        }
        let step_rdp = orders.iter().map(|&a| compute_rdp(q, sigma, a)).collect();
        let rdp = vec![0.0; orders.len()];
        Ok(Self {
            q,
            sigma,
            sampling: Sampling::Poisson,
            steps: 0,
            orders,
            step_rdp,
            rdp,
        })
    }

    /// Marks the ledger as tracking batches that were not Poisson-sampled;
    /// `epsilon` then refuses to report a guarantee.
    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        if sampling != Sampling::Poisson {
            log::warn!("fixed-size batches are not covered by the Poisson amplification bound");
        }
        self.sampling = sampling;
        self
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    pub fn step_n(&mut self, n: u64) {
        for (acc, &s) in self.rdp.iter_mut().zip(&self.step_rdp) {
            *acc += n as f64 * s;
        }
        self.steps += n;
    }

    /// `(ε, α*)` for the given `δ`, ignoring the sampling certification.
    pub fn epsilon_and_order(&self, delta: f64) -> Result<(f64, f64)> {
        epsilon_from_rdp(&self.orders, &self.rdp, delta)
    }
}

impl Accountant for PrivacyLedger {
    fn step(&mut self) {
        self.step_n(1);
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn epsilon(&self, delta: f64) -> Result<f64> {
        if self.sampling != Sampling::Poisson {
            return Err(Error::Uncertified(
                "batches were drawn with fixed size, not Poisson sampling".into(),
            ));
        }
        Ok(self.epsilon_and_order(delta)?.0)
    }
}

/// Converts an RDP curve into `(ε, α*)`.
pub fn epsilon_from_rdp(orders: &[f64], rdp: &[f64], delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if orders.len() != rdp.len() || orders.is_empty() {
        return Err(Error::shape(
            "epsilon_from_rdp",
            format!("{} orders, {} values", orders.len(), rdp.len()),
        ));
    }
    if rdp.iter().all(|&r| r == 0.0) {
        return Ok((0.0, orders[0]));
    }
    let mut best = (f64::INFINITY, orders[0]);
    for (&a, &r) in orders.iter().zip(rdp) {
        let eps = r + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    best.0 = best.0.max(0.0);
    Ok(best)
}

/// RDP of one Poisson-subsampled Gaussian step at order `alpha`.
pub fn compute_rdp(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    log_a / (alpha - 1.0)
}

/// ε after `steps` identical steps.
pub fn epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64> {
    let mut ledger = PrivacyLedger::new(q, sigma)?;
    ledger.step_n(steps);
    ledger.epsilon(delta)
}

const SIGMA_MAX: f64 = 1e6;

/// Smallest σ (to within 0.1% in ε) whose ε after `steps` steps is at most
/// `target`.
pub fn calibrate_sigma(target: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target epsilon must be positive and finite, got {target}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if steps == 0 || q == 0.0 {
        return Ok(0.0);
    }
    let eps = |sigma: f64| epsilon(q, sigma, steps, delta);

    let mut hi = 1.0;
    while eps(hi)? > target {
        hi *= 2.0;
        if hi > SIGMA_MAX {
            return Err(Error::Unattainable {
                target,
                reason: format!(
                    "epsilon is still {:.4e} at sigma = {SIGMA_MAX:e}",
                    eps(SIGMA_MAX)?
                ),
            });
        }
    }
    let mut lo = hi / 2.0;
    while eps(lo)? <= target {
        hi = lo;
        lo /= 2.0;
        if lo < 1e-6 {
            return Ok(hi);
        }
    }
    // invariant: eps(lo) > target >= eps(hi)
    for _ in 0..200 {
        let e_hi = eps(hi)?;
        if (target - e_hi) / target < 1e-3 {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if eps(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(exp(a) − exp(b))`; terms that would go negative through rounding
/// are treated as cancelling to zero.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if b >= a {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = 2.0 * sigma * sigma;
    let mut log_a = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = i as f64;
        let term = ln_binomial(alpha, i) + fi * lq + (alpha - i) as f64 * l1q + (fi * fi - fi) / s2;
        log_a = log_add(log_a, term);
    }
    log_a
}

/// `ln erfc(x)`, switching to the asymptotic series where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        erfc(x).ln()
    } else {
        let x2 = x * x;
        -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + (-0.5 / x2 + 0.75 / (x2 * x2)).ln_1p()
    }
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = 2.0 * sigma * sigma;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    // generalised binomial coefficient C(α, i), tracked as sign and log-magnitude
    let (mut log_coef, mut positive) = (0.0_f64, true);
    let mut i = 0.0_f64;
    loop {
        let j = alpha - i;
        let log_t0 = log_coef + i * lq + j * l1q;
        let log_t1 = log_coef + j * lq + i * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((i - z0) / sqrt2s);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / sqrt2s);
        let log_s0 = log_t0 + (i * i - i) / s2 + log_e0;
        let log_s1 = log_t1 + (j * j - j) / s2 + log_e1;
        if positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 || i > 100_000.0 {
            break;
        }
        let factor = alpha - i;
        log_coef += factor.abs().ln() - (i + 1.0).ln();
        if factor < 0.0 {
            positive = !positive;
        }
        i += 1.0;
    }
    log_add(log_a0, log_a1)
}

/// Direct numerical integration of the subsampled-Gaussian moment, kept
/// independent of the series above so the two can check each other.
pub mod quadrature {
    use super::log_add;

    /// `ln A_α` by composite Simpson on `[lo, hi]` in log space.
    pub fn log_moment(q: f64, sigma: f64, alpha: f64, intervals: usize) -> f64 {
        let s2 = sigma * sigma;
        let log_integrand = |z: f64| {
            let log_mu0 = -z * z / (2.0 * s2) - (2.0 * std::f64::consts::PI * s2).sqrt().ln();
            // ln(1 − q + q·e^t) computed stably for either sign of t
            let t = (2.0 * z - 1.0) / (2.0 * s2);
            let log_ratio = if t > 0.0 {
                t + q.ln() + ((1.0 - q) * (-t).exp() / q).ln_1p()
            } else {
                (q * t.exp_m1()).ln_1p()
            };
            log_mu0 + alpha * log_ratio
        };
        // the integrand peaks near z = ασ²·(slope) at most; cover generously
        let lo = -40.0 * sigma;
        let hi = 40.0 * sigma + alpha + 1.0;
        let n = intervals + intervals % 2;
        let h = (hi - lo) / n as f64;
        let mut acc = f64::NEG_INFINITY;
        for k in 0..=n {
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc = log_add(acc, (w as f64).ln() + log_integrand(lo + k as f64 * h));
        }
        acc + (h / 3.0).ln()
    }

    /// RDP of one step at `alpha` from the integrated moment.
    pub fn rdp(q: f64, sigma: f64, alpha: f64, intervals: usize) -> f64 {
        log_moment(q, sigma, alpha, intervals) / (alpha - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_matches_gaussian_closed_form() {
        let (sigma, delta) = (1.3, 1e-5);
        let eps = epsilon(1.0, sigma, 1, delta).unwrap();
        let oracle = default_orders()
            .into_iter()
            .map(|a| {
                a / (2.0 * sigma * sigma) + (1.0 - 1.0 / a).ln() - (delta.ln() + a.ln()) / (a - 1.0)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((eps - oracle).abs() < 1e-6, "{eps} vs {oracle}");
    }

    #[test]
    fn integer_and_fractional_series_agree_with_quadrature() {
        for &(q, sigma) in &[(0.01, 1.0), (0.05, 0.8), (0.2, 2.0)] {
            for &a in &[1.5, 2.0, 3.0, 4.5, 8.0, 16.0] {
                let series = compute_rdp(q, sigma, a);
                let quad = quadrature::rdp(q, sigma, a, 20_000);
                let rel = (series - quad).abs() / quad.abs().max(1e-300);
                assert!(rel < 1e-6, "q={q} σ={sigma} α={a}: {series} vs {quad}");
            }
        }
    }

    #[test]
    fn fractional_orders_interpolate_integers() {
        let (q, sigma) = (0.05, 1.0);
        let r2 = compute_rdp(q, sigma, 2.0);
        let r25 = compute_rdp(q, sigma, 2.5);
        let r3 = compute_rdp(q, sigma, 3.0);
        assert!(r2 <= r25 && r25 <= r3);
    }

    #[test]
    fn sentinels() {
        assert_eq!(epsilon(0.0, 1.0, 10_000, 1e-5).unwrap(), 0.0);
        assert_eq!(epsilon(0.3, 1.0, 0, 1e-5).unwrap(), 0.0);
        assert!(epsilon(0.3, 0.0, 1, 1e-5).unwrap().is_infinite());
        assert!(epsilon(1.0, 1e6, 10_000, 1e-5).unwrap() < 1e-3);
        assert!(epsilon(0.5, 1.0, 1, 0.0).is_err());
        assert!(epsilon(0.5, 1.0, 1, 1.0).is_err());
        assert!(PrivacyLedger::new(1.5, 1.0).is_err());
    }

    #[test]
    fn fixed_size_sampling_is_uncertified() {
        let mut l = PrivacyLedger::new(0.1, 1.0)
            .unwrap()
            .with_sampling(Sampling::FixedSize);
        l.step();
        assert!(matches!(l.epsilon(1e-5), Err(Error::Uncertified(_))));
        assert!(l.epsilon_and_order(1e-5).unwrap().0 > 0.0);
    }

    #[test]
    fn calibration_round_trip() {
        let (q, steps, delta) = (0.05, 400, 1e-5);
        for &target in &[1.0, 3.3] {
            let sigma = calibrate_sigma(target, delta, q, steps).unwrap();
            let eps = epsilon(q, sigma, steps, delta).unwrap();
            assert!(eps <= target && (target - eps) / target < 1e-3, "{eps}");
        }
        let s1 = calibrate_sigma(1.0, delta, q, steps).unwrap();
        let s3 = calibrate_sigma(3.0, delta, q, steps).unwrap();
        assert!(s3 < s1);
        assert!(matches!(
            calibrate_sigma(1e-9, delta, 1.0, 1_000_000),
            Err(Error::Unattainable { .. })
        ));
    }

    #[test]
    fn composition_is_order_independent() {
        let mut a = PrivacyLedger::new(0.02, 1.1).unwrap();
        let mut b = a.clone();
        for _ in 0..37 {
            a.step();
        }
        b.step_n(20);
        b.step_n(17);
        for (x, y) in a.rdp().iter().zip(b.rdp()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
