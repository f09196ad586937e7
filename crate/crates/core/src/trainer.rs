//! Per-step training loop for every supported method.
//!
//! One private step, for each trainable layer:
//!
//! 1. row/column importance of the current weight and the kept unit sets;
//! 2. a fresh rank-`r` factorisation `W ≈ L R` (factorised methods);
//! 3. a Poisson minibatch and its per-sample gradients;
//! 4. per-sample factor gradients `∂L = ∂W Rᵀ`, `∂R = Lᵀ ∂W` with frozen
//!    rows of `∂L` and columns of `∂R` zeroed;
//! 5. joint clipping of everything a sample releases, summation, and
//!    Gaussian noise on the kept coordinates only;
//! 6. reconstruction of `∂W` and an optimizer update in weight space;
//! 7. one accountant step.
//!
//! `dpsgd` skips the factorisation, `sparse-dpsgd` masks `∂W` directly
//! (entry `(i, j)` is released iff row `i` and column `j` are kept), and
//! `sgd` releases unclipped, noise-free gradients.

use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, Accountant, PrivacyLedger, Sampling};
use crate::data::{fixed_size_sample, poisson_sample, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState};
use crate::model::{LayerSpec, Network, SampleFactors};
use crate::privacy::{sanitize, ClipConfig, ClipScope, ClippedSum, GradTerm, NoiseConfig, Support};
use crate::reparam::{decompose, decompose_from, reconstruct_gradient, LowRankFactors};
use crate::sparsity::{
    apply_mask_in_place, build_mask, importance_from_factors, importance_of, masked_vector,
    random_mask, FactorMask, ImportanceSource, SparsifyMode, SparsityMask, UnitLayout,
};

/// RNG stream ids derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SAMPLING: u64 = 1;
    pub const DECOMPOSE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const MASK: u64 = 4;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lsg,
    Rgp,
    SparseDpsgd,
    #[default]
    Dpsgd,
    Sgd,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Lsg,
        Method::Rgp,
        Method::SparseDpsgd,
        Method::Dpsgd,
        Method::Sgd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lsg => "lsg",
            Method::Rgp => "rgp",
            Method::SparseDpsgd => "sparse-dpsgd",
            Method::Dpsgd => "dpsgd",
            Method::Sgd => "sgd",
        }
    }

    pub fn is_private(self) -> bool {
        self != Method::Sgd
    }

    pub fn factorizes(self) -> bool {
        matches!(self, Method::Lsg | Method::Rgp)
    }

    pub fn sparsifies(self) -> bool {
        matches!(self, Method::Lsg | Method::SparseDpsgd)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Treatment of the last trainable layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Same as every other layer.
    #[default]
    Same,
    /// Full-rank, unmasked noisy gradient whatever the method.
    Dpsgd,
    /// Not trained.
    Frozen,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(HeadMode::Same),
            "dpsgd" => Ok(HeadMode::Dpsgd),
            "frozen" => Ok(HeadMode::Frozen),
            other => Err(Error::Config(format!("unknown head mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Factorisation rank `r`; clamped per layer to the smaller matrix side.
    pub rank: Option<usize>,
    /// Fraction `p` of frozen units per side.
    pub sparsity: Option<f64>,
    pub clip: f64,
    pub clip_scope: ClipScope,
    /// Noise multiplier; calibrated from `epsilon` when absent.
    pub sigma: Option<f64>,
    /// Target privacy budget. With an explicit `sigma` training stops before
    /// the budget would be exceeded.
    pub epsilon: Option<f64>,
    pub delta: f64,
    /// Expected batch size; the sampling rate is `batch_size / N`.
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Zero-based epochs at whose start the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub sampling: Sampling,
    pub importance: ImportanceSource,
    pub sparsify: SparsifyMode,
    /// Train without freezing for this many epochs first.
    pub sparsify_after: usize,
    /// Seed each factorisation with the previous step's `R`.
    pub warm_start: bool,
    pub head: HeadMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dpsgd,
            rank: None,
            sparsity: None,
            clip: 1.0,
            clip_scope: ClipScope::Global,
            sigma: None,
            epsilon: None,
            delta: 1e-5,
            batch_size: 256,
            epochs: 10,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            seed: 0,
            sampling: Sampling::Poisson,
            importance: ImportanceSource::Weights,
            sparsify: SparsifyMode::Importance,
            sparsify_after: 0,
            warm_start: false,
            head: HeadMode::Same,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = self.method;
        match (m.factorizes(), self.rank) {
            (true, None) => return bad(format!("method {m} needs a rank")),
            (true, Some(0)) => return bad("rank must be at least 1".into()),
            (false, Some(_)) => return bad(format!("method {m} takes no rank")),
            _ => {}
        }
        match (m.sparsifies(), self.sparsity) {
            (true, None) => return bad(format!("method {m} needs a sparsity")),
            (true, Some(p)) if !(0.0..1.0).contains(&p) => {
                return bad(format!("sparsity must lie in [0, 1), got {p}"))
            }
            (false, Some(p)) if !(m == Method::Rgp && p == 0.0) => {
                return bad(format!("method {m} takes no sparsity"))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive".into());
        }
        if m.is_private() {
            if !(self.clip > 0.0) || !self.clip.is_finite() {
                return bad(format!(
                    "clip must be positive and finite, got {}",
                    self.clip
                ));
            }
            if !(self.delta > 0.0 && self.delta < 1.0) {
                return bad(format!("delta must lie in (0, 1), got {}", self.delta));
            }
            match (self.sigma, self.epsilon) {
                (None, None) => return bad(format!("method {m} needs sigma or epsilon")),
                (Some(s), _) if !(s >= 0.0) || !s.is_finite() => {
                    return bad(format!("sigma must be finite and non-negative, got {s}"))
                }
                (_, Some(e)) if !(e > 0.0) => {
                    return bad(format!("epsilon must be positive, got {e}"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn sampling_rate(&self, n: usize) -> f64 {
        (self.batch_size as f64 / n as f64).min(1.0)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        (n / self.batch_size).max(1)
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        (self.epochs * self.steps_per_epoch(n)) as u64
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    fn sparsity_value(&self) -> f64 {
        if self.method.sparsifies() {
            self.sparsity.unwrap_or(0.0)
        } else {
            0.0
        }
    }
}

/// First/second moment buffers of one tensor.
#[derive(Clone, Debug, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Optimizer {
    fn from_config(c: &TrainConfig) -> Self {
        Self {
            kind: c.optimizer,
            momentum: c.momentum,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }

    /// One update; `t` is the 1-based update count (Adam bias correction).
    fn update(&self, param: &mut [f64], grad: &[f64], m: &mut Moments, lr: f64, t: u64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Momentum => {
                if m.first.is_empty() {
                    m.first = vec![0.0; param.len()];
                }
                for ((p, g), v) in param.iter_mut().zip(grad).zip(m.first.iter_mut()) {
                    *v = self.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                if m.first.is_empty() {
                    m.first = vec![0.0; param.len()];
                    m.second = vec![0.0; param.len()];
                }
                let c1 = 1.0 - self.beta1.powi(t as i32);
                let c2 = 1.0 - self.beta2.powi(t as i32);
                for (k, (p, g)) in param.iter_mut().zip(grad).enumerate() {
                    m.first[k] = self.beta1 * m.first[k] + (1.0 - self.beta1) * g;
                    m.second[k] = self.beta2 * m.second[k] + (1.0 - self.beta2) * g * g;
                    let mh = m.first[k] / c1;
                    let vh = m.second[k] / c2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Factor,
    Full,
    Frozen,
}

#[derive(Clone, Debug)]
struct LayerState {
    index: usize,
    name: String,
    layout: UnitLayout,
    role: Role,
    rank: usize,
    /// Whether this layer's units are subject to freezing.
    sparse: bool,
    prev_right: Option<Matrix>,
    weight_moments: Moments,
    bias_moments: Moments,
}

impl LayerState {
    fn units(&self, w: &Matrix) -> (usize, usize) {
        match self.layout {
            UnitLayout::Dense => w.shape(),
            UnitLayout::Conv { kernel_area } => (w.cols() / kernel_area, w.rows()),
        }
    }
}

enum Plan {
    Factor {
        factors: LowRankFactors,
        mask: FactorMask,
    },
    Full {
        mask: FactorMask,
    },
    Frozen,
}

/// What one step did, per trainable layer where applicable.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub batch_size: usize,
    pub loss_sum: f64,
    /// Released (noised) coordinates per trainable layer, biases included.
    pub noised: Vec<usize>,
    /// Kept unit sets per trainable layer; `None` for frozen layers.
    pub masks: Vec<Option<SparsityMask>>,
    /// `true` when the sampled batch was empty and no update was made.
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    /// Mean per-sample loss over the batches of this epoch, before each update.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// `Some(inf)` for non-private runs, `None` when the accountant cannot
    /// certify the sampling scheme.
    pub epsilon: Option<f64>,
    /// `(layer name, released coordinates in the epoch's last step)`.
    pub kept: Vec<(String, usize)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochMetrics>,
    pub epsilon: Option<f64>,
    pub sigma: f64,
    pub steps: u64,
    /// Training ended before the epoch budget because of the ε budget.
    pub stopped_early: bool,
}

/// Mutable state of one training run.
pub struct Trainer<'a> {
    config: TrainConfig,
    net: Network,
    data: &'a Dataset,
    layers: Vec<LayerState>,
    optimizer: Optimizer,
    ledger: Option<PrivacyLedger>,
    sigma: f64,
    q: f64,
    sampling_rng: RngState,
    decompose_rng: RngState,
    noise_rng: RngState,
    mask_rng: RngState,
    steps: u64,
    updates: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(net: Network, config: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if net.input_shape() != data.shape() || net.classes() < data.classes() {
            return Err(Error::Config(format!(
                "network expects {:?} with {} classes, data is {:?} with {}",
                net.input_shape(),
                net.classes(),
                data.shape(),
                data.classes()
            )));
        }
        let method = config.method;
        let trainable = net.trainable_layers();
        let head = net.head_layer();
        let mut layers = Vec::with_capacity(trainable.len());
        for &index in &trainable {
            let layer = &net.layers()[index];
            let layout = match layer.spec() {
                LayerSpec::Conv2d { .. } => UnitLayout::Conv {
                    kernel_area: layer.kernel_area(),
                },
                _ => UnitLayout::Dense,
            };
            let base = if method.factorizes() {
                Role::Factor
            } else {
                Role::Full
            };
            let (role, sparse) = if index == head {
                match config.head {
                    HeadMode::Same => (base, method.sparsifies()),
                    HeadMode::Dpsgd => (Role::Full, false),
                    HeadMode::Frozen => (Role::Frozen, false),
                }
            } else {
                (base, method.sparsifies())
            };
            let (rows, cols) = net.params(index).weight.shape();
            let rank = config.rank.unwrap_or(0).min(rows.min(cols));
            if role == Role::Factor && config.rank.is_some_and(|r| r > rank) {
                log::info!(
                    "layer {}: rank {} clamped to {rank}",
                    layer.name(),
                    config.rank.unwrap_or(0)
                );
            }
            layers.push(LayerState {
                index,
                name: layer.name().to_string(),
                layout,
                role,
                rank,
                sparse,
                prev_right: None,
                weight_moments: Moments::default(),
                bias_moments: Moments::default(),
            });
        }

        let n = data.len();
        let q = config.sampling_rate(n);
        let (ledger, sigma) = if method.is_private() {
            // tensors released per sample, for per-tensor clipping
            let tensors: usize = layers
                .iter()
                .map(|l| match l.role {
                    Role::Factor => 3,
                    Role::Full => 2,
                    Role::Frozen => 0,
                })
                .sum();
            let factor = config.clip_scope.sensitivity_factor(tensors);
            let sigma = match config.sigma {
                Some(s) => s,
                None => {
                    let target = config.epsilon.expect("validated");
                    calibrate_sigma(target, config.delta, q, config.total_steps(n))? * factor
                }
            };
            let ledger = PrivacyLedger::new(q, sigma / factor)?.with_sampling(config.sampling);
            (Some(ledger), sigma)
        } else {
            (None, 0.0)
        };

        let seed = config.seed;
        Ok(Self {
            optimizer: Optimizer::from_config(config),
            config: config.clone(),
            net,
            data,
            layers,
            ledger,
            sigma,
            q,
            sampling_rng: RngState::with_stream(seed, streams::SAMPLING),
            decompose_rng: RngState::with_stream(seed, streams::DECOMPOSE),
            noise_rng: RngState::with_stream(seed, streams::NOISE),
            mask_rng: RngState::with_stream(seed, streams::MASK),
            steps: 0,
            updates: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn ledger(&self) -> Option<&PrivacyLedger> {
        self.ledger.as_ref()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sampling_rate(&self) -> f64 {
        self.q
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// ε spent so far: `Some(inf)` without privacy, `None` if uncertified.
    pub fn epsilon(&self) -> Option<f64> {
        match &self.ledger {
            None => Some(f64::INFINITY),
            Some(l) => l.epsilon(self.config.delta).ok(),
        }
    }

    /// Whether one more step would exceed the configured ε budget.
    pub fn budget_exhausted(&self) -> bool {
        let (Some(ledger), Some(target)) = (&self.ledger, self.config.epsilon) else {
            return false;
        };
        let mut next = ledger.clone();
        next.step();
        next.epsilon_and_order(self.config.delta)
            .map(|(e, _)| e > target)
            .unwrap_or(true)
    }

    fn kept_units(
        &mut self,
        layer: usize,
        w: &Matrix,
        factors: Option<&LowRankFactors>,
        epoch: usize,
    ) -> Result<SparsityMask> {
        let st = &self.layers[layer];
        let (inputs, outputs) = st.units(w);
        let p = self.config.sparsity_value();
        if !st.sparse || p == 0.0 || epoch < self.config.sparsify_after {
            return Ok(SparsityMask::full(inputs, outputs));
        }
        match self.config.sparsify {
            SparsifyMode::Random => random_mask(inputs, outputs, p, &mut self.mask_rng),
            SparsifyMode::Importance => {
                let iv = match (self.config.importance, factors) {
                    (ImportanceSource::Factors, Some(f)) => importance_from_factors(f, st.layout),
                    _ => importance_of(w, st.layout),
                };
                build_mask(&iv, p)
            }
        }
    }

    fn plan(&mut self, epoch: usize) -> Result<(Vec<Plan>, Vec<Option<SparsityMask>>)> {
        let mut plans = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        for k in 0..self.layers.len() {
            let st = &self.layers[k];
            let w = self.net.params(st.index).weight.clone();
            match st.role {
                Role::Frozen => {
                    plans.push(Plan::Frozen);
                    masks.push(None);
                }
                Role::Full => {
                    let units = self.kept_units(k, &w, None, epoch)?;
                    let mask = units.factor_mask(self.layers[k].layout);
                    plans.push(Plan::Full { mask });
                    masks.push(Some(units));
                }
                Role::Factor => {
                    let by_factors = self.config.importance == ImportanceSource::Factors;
                    let units_first = if by_factors {
                        None
                    } else {
                        Some(self.kept_units(k, &w, None, epoch)?)
                    };
                    let st = &self.layers[k];
                    let factors = match (&st.prev_right, self.config.warm_start) {
                        (Some(r), true) => decompose_from(&w, r, &mut self.decompose_rng)?,
                        _ => decompose(&w, st.rank, &mut self.decompose_rng)?,
                    };
                    let units = match units_first {
                        Some(u) => u,
                        None => self.kept_units(k, &w, Some(&factors), epoch)?,
                    };
                    let mask = units.factor_mask(self.layers[k].layout);
                    if self.config.warm_start {
                        self.layers[k].prev_right = Some(factors.right().clone());
                    }
                    plans.push(Plan::Factor { factors, mask });
                    masks.push(Some(units));
                }
            }
        }
        Ok((plans, masks))
    }

    fn sample_batch(&mut self) -> Result<Vec<usize>> {
        let n = self.data.len();
        match self.config.sampling {
            Sampling::Poisson => poisson_sample(n, self.q, &mut self.sampling_rng),
            Sampling::FixedSize => {
                fixed_size_sample(n, self.config.batch_size.min(n), &mut self.sampling_rng)
            }
        }
    }

    /// Runs one step at the given zero-based epoch.
    pub fn step(&mut self, epoch: usize) -> Result<StepReport> {
        let (plans, masks) = self.plan(epoch)?;

        // tensor shapes and noise supports, layer by layer
        let mut shapes = Vec::new();
        let mut supports = Vec::new();
        let mut noised = Vec::with_capacity(plans.len());
        for (st, plan) in self.layers.iter().zip(&plans) {
            let params = self.net.params(st.index);
            let (m, n) = params.weight.shape();
            let b = params.bias.len();
            let before = supports.len();
            match plan {
                Plan::Frozen => {}
                Plan::Factor { factors, mask } => {
                    let r = factors.rank();
                    shapes.extend([(m, r), (r, n), (1, b)]);
                    supports.extend([
                        Support::Rows(mask.rows.clone()),
                        Support::Cols(mask.cols.clone()),
                        Support::All,
                    ]);
                }
                Plan::Full { mask } => {
                    shapes.extend([(m, n), (1, b)]);
                    supports.push(if st.sparse {
                        Support::Grid {
                            rows: mask.rows.clone(),
                            cols: mask.cols.clone(),
                        }
                    } else {
                        Support::All
                    });
                    supports.push(Support::All);
                }
            }
            noised.push(
                supports[before..]
                    .iter()
                    .zip(&shapes[before..])
                    .map(|(s, &(r, c))| s.count(r, c))
                    .sum(),
            );
        }

        let batch = self.sample_batch()?;
        let private = self.config.method.is_private();
        if batch.is_empty() {
            if let Some(l) = self.ledger.as_mut() {
                l.step();
            }
            self.steps += 1;
            return Ok(StepReport {
                batch_size: 0,
                loss_sum: 0.0,
                noised,
                masks,
                skipped: true,
            });
        }

        let (x, y) = self.data.batch(&batch);
        let grads = self.net.per_sample_gradients(&x, &y)?;
        let loss_sum: f64 = grads.losses.iter().sum();
        if !loss_sum.is_finite() {
            return Err(self.diverged(epoch, "non-finite training loss"));
        }

        let clip = if private {
            ClipConfig::new(self.config.clip, self.config.clip_scope)?
        } else {
            ClipConfig {
                norm: f64::INFINITY,
                scope: ClipScope::Global,
            }
        };
        let mut acc = ClippedSum::new(clip, &shapes);

        // batched pieces of the dense factor gradients: Δ Rᵀ and A L
        let trainable: Vec<_> = self.layers.iter().map(|l| l.index).collect();
        let mut projected = Vec::with_capacity(plans.len());
        for (g, plan) in grads.layers.iter().zip(&plans) {
            debug_assert!(trainable.contains(&g.layer));
            projected.push(match (plan, &g.weight) {
                (Plan::Factor { factors, .. }, SampleFactors::Outer { left, right }) => Some((
                    right.matmul_t(factors.right())?,
                    left.matmul(factors.left())?,
                )),
                _ => None,
            });
        }

        for s in 0..batch.len() {
            let mut terms = Vec::with_capacity(shapes.len());
            for ((g, plan), proj) in grads.layers.iter().zip(&plans).zip(&projected) {
                match (plan, &g.weight) {
                    (Plan::Frozen, _) => continue,
                    (Plan::Factor { mask, .. }, SampleFactors::Outer { left, right }) => {
                        let (rd, la) = proj.as_ref().expect("computed above");
                        terms.push(GradTerm::Outer {
                            left: masked_vector(left.row(s), &mask.rows),
                            right: rd.row(s).to_vec(),
                        });
                        terms.push(GradTerm::Outer {
                            left: la.row(s).to_vec(),
                            right: masked_vector(right.row(s), &mask.cols),
                        });
                    }
                    (Plan::Factor { factors, mask }, SampleFactors::Unfolded { left, right }) => {
                        let mut dl = left[s].t_matmul(&right[s].matmul_t(factors.right())?)?;
                        let mut dr = left[s].matmul(factors.left())?.t_matmul(&right[s])?;
                        apply_mask_in_place(&mut dl, &mut dr, mask)?;
                        terms.push(GradTerm::Matrix(dl));
                        terms.push(GradTerm::Matrix(dr));
                    }
                    (Plan::Full { mask }, SampleFactors::Outer { left, right }) => {
                        terms.push(GradTerm::Outer {
                            left: masked_vector(left.row(s), &mask.rows),
                            right: masked_vector(right.row(s), &mask.cols),
                        });
                    }
                    (Plan::Full { mask }, weight @ SampleFactors::Unfolded { .. }) => {
                        let mut gw = weight.sample(s);
                        for i in 0..gw.rows() {
                            let keep_row = mask.rows[i];
                            for (v, &keep_col) in gw.row_mut(i).iter_mut().zip(&mask.cols) {
                                if !(keep_row && keep_col) {
                                    *v = 0.0;
                                }
                            }
                        }
                        terms.push(GradTerm::Matrix(gw));
                    }
                }
                terms.push(GradTerm::Vector(g.bias.row(s).to_vec()));
            }
            acc.add_sample(terms)?;
        }

        let mut sums = acc.into_sums();
        if private {
            let noise = NoiseConfig::new(self.sigma)?;
            sanitize(
                &mut sums,
                &supports,
                self.config.clip,
                &noise,
                &mut self.noise_rng,
            )?;
        }
        let normalizer = if private {
            self.q * self.data.len() as f64
        } else {
            batch.len() as f64
        };
        sums.iter_mut().for_each(|m| m.scale(1.0 / normalizer));

        let lr = self.config.lr_at(epoch);
        self.updates += 1;
        let t = self.updates;
        let mut sums = sums.into_iter();
        for (k, plan) in plans.iter().enumerate() {
            let dw = match plan {
                Plan::Frozen => continue,
                Plan::Factor { factors, .. } => {
                    let dl = sums.next().expect("dl");
                    let dr = sums.next().expect("dr");
                    reconstruct_gradient(&dl, &dr, factors)?
                }
                Plan::Full { .. } => sums.next().expect("dw"),
            };
            let db = sums.next().expect("bias").into_vec();
            let st = &mut self.layers[k];
            let params = self.net.params_mut(st.index);
            self.optimizer.update(
                params.weight.as_mut_slice(),
                dw.as_slice(),
                &mut st.weight_moments,
                lr,
                t,
            );
            self.optimizer
                .update(&mut params.bias, &db, &mut st.bias_moments, lr, t);
        }
        if !self.net.is_finite() {
            return Err(self.diverged(epoch, "non-finite weights after update"));
        }

        if let Some(l) = self.ledger.as_mut() {
            l.step();
        }
        self.steps += 1;
        Ok(StepReport {
            batch_size: batch.len(),
            loss_sum,
            noised,
            masks,
            skipped: false,
        })
    }

    fn diverged(&self, epoch: usize, detail: &str) -> Error {
        Error::Diverged {
            epoch: epoch + 1,
            step: self.steps as usize,
            detail: format!(
                "{detail} (method {}, lr {}, sigma {})",
                self.config.method,
                self.config.lr_at(epoch),
                self.sigma
            ),
        }
    }
}

/// Trains for `config.epochs` epochs (or until the ε budget runs out),
/// evaluating on `test` after every epoch.
pub fn train(
    net: Network,
    config: &TrainConfig,
    data: &Dataset,
    test: &Dataset,
) -> Result<TrainOutcome> {
    train_with(net, config, data, test, |_| {})
}

/// [`train`] with a callback invoked after every epoch row.
pub fn train_with(
    net: Network,
    config: &TrainConfig,
    data: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(net, config, data)?;
    let names = trainer.layer_names();
    let steps_per_epoch = config.steps_per_epoch(data.len());
    let mut history = Vec::with_capacity(config.epochs);
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let (mut loss, mut seen, mut done) = (0.0, 0usize, 0usize);
        let mut last_noised = vec![0; names.len()];
        for _ in 0..steps_per_epoch {
            if trainer.budget_exhausted() {
                stopped_early = true;
                break;
            }
            let report = trainer.step(epoch)?;
            loss += report.loss_sum;
            seen += report.batch_size;
            last_noised = report.noised;
            done += 1;
        }
        if done == 0 {
            break;
        }
        let (test_loss, test_accuracy) =
            trainer.network().evaluate(test.features(), test.labels())?;
        if !test_loss.is_finite() {
            return Err(trainer.diverged(epoch, "non-finite held-out loss"));
        }
        let row = EpochMetrics {
            epoch: epoch + 1,
            train_loss: if seen > 0 {
                loss / seen as f64
            } else {
                f64::NAN
            },
            test_loss,
            test_accuracy,
            epsilon: trainer.epsilon(),
            kept: names.iter().cloned().zip(last_noised).collect(),
        };
        log::info!(
            "epoch {} loss {:.4} acc {:.4} eps {:?}",
            row.epoch,
            row.train_loss,
            row.test_accuracy,
            row.epsilon
        );
        on_epoch(&row);
        history.push(row);
        if stopped_early {
            break;
        }
    }

    let epsilon = trainer.epsilon();
    let sigma = trainer.sigma();
    let steps = trainer.steps();
    Ok(TrainOutcome {
        network: trainer.into_network(),
        history,
        epsilon,
        sigma,
        steps,
        stopped_early,
    })
}
