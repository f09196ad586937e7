//! Per-sample clipping and masked Gaussian noise.
//!
//! A sample's contribution is the list of every tensor it releases in one
//! step (masked factor gradients, full weight gradients, bias gradients).
//! With [`ClipScope::Global`] the concatenation of all of them is scaled by
//! `min(1, C/‖g‖₂)`, so one step is a single Gaussian mechanism with L2
//! sensitivity `C`. [`ClipScope::PerTensor`] clips every tensor to `C`
//! separately; the joint sensitivity is then `C·√k` for `k` tensors and the
//! accountant must be told so (see [`ClipScope::sensitivity_factor`]).
//!
//! Noise `N(0, σ²C²)` is added to every coordinate in a tensor's [`Support`];
//! coordinates outside it are frozen and stay exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    /// `C`; `f64::INFINITY` disables clipping.
    pub norm: f64,
    pub scope: ClipScope,
}

impl ClipConfig {
    pub fn new(norm: f64, scope: ClipScope) -> Result<Self> {
        if !(norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clipping norm must be positive, got {norm}"
            )));
        }
        Ok(Self { norm, scope })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipScope {
    /// One norm over all tensors of a sample.
    #[default]
    Global,
    /// Every tensor clipped to `C` on its own.
    #[serde(alias = "per-matrix")]
    PerTensor,
}

impl ClipScope {
    /// Ratio between the step's L2 sensitivity and `C` when `tensors` tensors
    /// are released.
    pub fn sensitivity_factor(self, tensors: usize) -> f64 {
        match self {
            ClipScope::Global => 1.0,
            ClipScope::PerTensor => (tensors.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// `σ`: noise std is `σ·C` per released coordinate.
    pub multiplier: f64,
}

impl NoiseConfig {
    pub fn new(multiplier: f64) -> Result<Self> {
        if !(multiplier >= 0.0) || !multiplier.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier must be finite and non-negative, got {multiplier}"
            )));
        }
        Ok(Self { multiplier })
    }
}

/// One released tensor of one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum GradTerm {
    Matrix(Matrix),
    /// Rank-one matrix `left ⊗ right`.
    Outer {
        left: Vec<f64>,
        right: Vec<f64>,
    },
    /// Stored as a `1 × n` row when summed.
    Vector(Vec<f64>),
}

impl GradTerm {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            GradTerm::Matrix(m) => m.shape(),
            GradTerm::Outer { left, right } => (left.len(), right.len()),
            GradTerm::Vector(v) => (1, v.len()),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        match self {
            GradTerm::Matrix(m) => m.squared_norm(),
            GradTerm::Outer { left, right } => {
                let (a, b) = (norm2(left), norm2(right));
                (a * b) * (a * b)
            }
            GradTerm::Vector(v) => v.iter().map(|x| x * x).sum(),
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            GradTerm::Outer { left, right } => norm2(left) * norm2(right),
            _ => self.squared_norm().sqrt(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        match self {
            GradTerm::Matrix(m) => m.scale(s),
            GradTerm::Outer { left, .. } => left.iter_mut().for_each(|v| *v *= s),
            GradTerm::Vector(v) => v.iter_mut().for_each(|x| *x *= s),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = self.shape();
        let mut m = Matrix::zeros(r, c);
        self.add_into(&mut m, 1.0);
        m
    }

    /// `acc += s · self`.
    pub fn add_into(&self, acc: &mut Matrix, s: f64) {
        debug_assert_eq!(acc.shape(), self.shape());
        match self {
            GradTerm::Matrix(m) => acc.add_scaled(m, s).expect("shape checked"),
            GradTerm::Outer { left, right } => acc.add_outer(left, right, s),
            GradTerm::Vector(v) => {
                for (a, &x) in acc.row_mut(0).iter_mut().zip(v) {
                    *a += s * x;
                }
            }
        }
    }
}

/// `min(1, C/‖g‖)`; a zero gradient or an infinite `C` leaves `g` unchanged.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// L2 norm of the concatenation of all terms.
pub fn joint_norm(terms: &[GradTerm]) -> f64 {
    terms.iter().map(GradTerm::squared_norm).sum::<f64>().sqrt()
}

/// Clips one sample in place and returns its pre-clip joint norm.
pub fn clip_sample(terms: &mut [GradTerm], clip: &ClipConfig) -> f64 {
    let norm = joint_norm(terms);
    match clip.scope {
        ClipScope::Global => {
            let f = clip_factor(norm, clip.norm);
            if f != 1.0 {
                terms.iter_mut().for_each(|t| t.scale(f));
            }
        }
        ClipScope::PerTensor => {
            for t in terms.iter_mut() {
                let f = clip_factor(t.norm(), clip.norm);
                if f != 1.0 {
                    t.scale(f);
                }
            }
        }
    }
    norm
}

/// Clips every sample of a batch in place; returns the pre-clip joint norms.
pub fn clip_per_sample(samples: &mut [Vec<GradTerm>], clip: &ClipConfig) -> Vec<f64> {
    samples
        .iter_mut()
        .map(|terms| clip_sample(terms, clip))
        .collect()
}

/// Streaming clip-and-sum over samples in a fixed order.
#[derive(Clone, Debug)]
pub struct ClippedSum {
    clip: ClipConfig,
    sums: Vec<Matrix>,
    samples: usize,
    max_norm_after: f64,
}

impl ClippedSum {
    pub fn new(clip: ClipConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            clip,
            sums: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            samples: 0,
            max_norm_after: 0.0,
        }
    }

    pub fn add_sample(&mut self, mut terms: Vec<GradTerm>) -> Result<()> {
        if terms.len() != self.sums.len()
            || terms
                .iter()
                .zip(&self.sums)
                .any(|(t, s)| t.shape() != s.shape())
        {
            return Err(Error::shape(
                "ClippedSum::add_sample",
                format!(
                    "sample shapes {:?} vs accumulator {:?}",
                    terms.iter().map(GradTerm::shape).collect::<Vec<_>>(),
                    self.sums.iter().map(Matrix::shape).collect::<Vec<_>>()
                ),
            ));
        }
        clip_sample(&mut terms, &self.clip);
        self.max_norm_after = self.max_norm_after.max(joint_norm(&terms));
        for (t, s) in terms.iter().zip(self.sums.iter_mut()) {
            t.add_into(s, 1.0);
        }
        self.samples += 1;
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Largest post-clip joint norm seen so far.
    pub fn max_norm_after(&self) -> f64 {
        self.max_norm_after
    }

    pub fn into_sums(self) -> Vec<Matrix> {
        self.sums
    }
}

/// Coordinates of a tensor that receive noise; everything else is frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Support {
    All,
    /// Rows flagged `true`, all columns.
    Rows(Vec<bool>),
    /// Columns flagged `true`, all rows.
    Cols(Vec<bool>),
    /// `(i, j)` released iff `rows[i] && cols[j]`.
    Grid {
        rows: Vec<bool>,
        cols: Vec<bool>,
    },
    Nothing,
}

impl Support {
    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        match self {
            Support::All => true,
            Support::Rows(r) => r[i],
            Support::Cols(c) => c[j],
            Support::Grid { rows, cols } => rows[i] && cols[j],
            Support::Nothing => false,
        }
    }

    /// Number of released coordinates of a `rows × cols` tensor.
    pub fn count(&self, rows: usize, cols: usize) -> usize {
        let kept = |f: &[bool]| f.iter().filter(|&&k| k).count();
        match self {
            Support::All => rows * cols,
            Support::Rows(r) => kept(r) * cols,
            Support::Cols(c) => rows * kept(c),
            Support::Grid { rows: r, cols: c } => kept(r) * kept(c),
            Support::Nothing => 0,
        }
    }

    fn check(&self, shape: (usize, usize)) -> bool {
        match self {
            Support::Rows(r) => r.len() == shape.0,
            Support::Cols(c) => c.len() == shape.1,
            Support::Grid { rows, cols } => rows.len() == shape.0 && cols.len() == shape.1,
            Support::All | Support::Nothing => true,
        }
    }
}

/// Adds `N(0, σ²C²)` to every supported coordinate and forces the rest to 0.
///
/// Noise is drawn tensor by tensor in row-major order, only for supported
/// coordinates, so two runs with identical supports consume the generator
/// identically.
pub fn sanitize(
    sums: &mut [Matrix],
    supports: &[Support],
    clip: f64,
    noise: &NoiseConfig,
    rng: &mut RngState,
) -> Result<()> {
    if sums.len() != supports.len() {
        return Err(Error::shape(
            "sanitize",
            format!("{} tensors, {} supports", sums.len(), supports.len()),
        ));
    }
    let std = if noise.multiplier == 0.0 {
        0.0
    } else {
        noise.multiplier * clip
    };
    if !std.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise std σ·C = {} is not finite",
            std
        )));
    }
    for (m, support) in sums.iter_mut().zip(supports) {
        if !support.check(m.shape()) {
            return Err(Error::shape(
                "sanitize",
                format!("support does not fit tensor {:?}", m.shape()),
            ));
        }
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                if support.contains(i, j) {
                    if std > 0.0 {
                        *v += std * rng.standard_normal();
                    }
                } else {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn global(c: f64) -> ClipConfig {
        ClipConfig::new(c, ClipScope::Global).unwrap()
    }

    #[test]
    fn clip_scales_large_and_keeps_small() {
        let c = 1.5;
        let mut big = vec![GradTerm::Vector(vec![0.0, 2.0 * c])];
        let norm = clip_sample(&mut big, &global(c));
        assert_eq!(norm, 2.0 * c);
        assert_eq!(big[0], GradTerm::Vector(vec![0.0, c]));

        let mut small = vec![GradTerm::Vector(vec![c / 2.0, 0.0])];
        clip_sample(&mut small, &global(c));
        assert_eq!(small[0], GradTerm::Vector(vec![c / 2.0, 0.0]));
    }

    #[test]
    fn batch_clip_matches_scalar_loop() {
        let mut rng = RngState::new(7);
        let c = 0.8;
        let mut batch: Vec<Vec<GradTerm>> = (0..16)
            .map(|s| {
                let scale = 0.1 * (s as f64 + 1.0);
                vec![
                    GradTerm::Matrix(gaussian_matrix(3, 4, scale, &mut rng).unwrap()),
                    GradTerm::Outer {
                        left: (0..5).map(|_| scale * rng.standard_normal()).collect(),
                        right: (0..2).map(|_| rng.standard_normal()).collect(),
                    },
                    GradTerm::Vector((0..4).map(|_| scale * rng.standard_normal()).collect()),
                ]
            })
            .collect();
        let original = batch.clone();
        let norms = clip_per_sample(&mut batch, &global(c));
        for (s, terms) in batch.iter().enumerate() {
            // scalar loop over every materialised coordinate
            let mut before = 0.0;
            let mut after = 0.0;
            for (t0, t1) in original[s].iter().zip(terms) {
                let (m0, m1) = (t0.to_matrix(), t1.to_matrix());
                for (a, b) in m0.as_slice().iter().zip(m1.as_slice()) {
                    before += a * a;
                    after += b * b;
                }
            }
            let (before, after) = (before.sqrt(), after.sqrt());
            assert!((norms[s] - before).abs() < 1e-12);
            assert!(after <= c + 1e-9);
            let expect = before.min(c);
            assert!((after - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn per_tensor_scope_clips_each_tensor() {
        let clip = ClipConfig::new(1.0, ClipScope::PerTensor).unwrap();
        let mut terms = vec![
            GradTerm::Vector(vec![3.0, 4.0]),
            GradTerm::Vector(vec![0.5, 0.0]),
        ];
        clip_sample(&mut terms, &clip);
        assert!((terms[0].norm() - 1.0).abs() < 1e-15);
        assert_eq!(terms[1], GradTerm::Vector(vec![0.5, 0.0]));
        assert!((ClipScope::PerTensor.sensitivity_factor(4) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        assert!(ClipConfig::new(0.0, ClipScope::Global).is_err());
        assert!(NoiseConfig::new(-1.0).is_err());
        let mut acc = ClippedSum::new(global(1.0), &[(2, 2)]);
        assert!(acc.add_sample(vec![GradTerm::Vector(vec![1.0])]).is_err());
    }

    #[test]
    fn zero_sigma_is_identity_and_full_mask_is_zero() {
        let mut rng = RngState::new(1);
        let m = gaussian_matrix(3, 3, 1.0, &mut rng).unwrap();
        let mut sums = vec![m.clone()];
        sanitize(
            &mut sums,
            &[Support::All],
            1.0,
            &NoiseConfig::new(0.0).unwrap(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(sums[0], m);

        let mut sums = vec![Matrix::zeros(3, 3)];
        sanitize(
            &mut sums,
            &[Support::Nothing],
            1.0,
            &NoiseConfig::new(5.0).unwrap(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(sums[0].count_nonzero(), 0);

        // σ = 0 with an infinite clip is still noise-free
        let mut sums = vec![m.clone()];
        sanitize(
            &mut sums,
            &[Support::All],
            f64::INFINITY,
            &NoiseConfig::new(0.0).unwrap(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(sums[0], m);
    }

    #[test]
    fn frozen_rows_get_no_noise() {
        let mut rng = RngState::new(2);
        let mut sums = vec![Matrix::zeros(4, 2), Matrix::zeros(2, 3)];
        let supports = [
            Support::Rows(vec![true, false, true, false]),
            Support::Cols(vec![false, true, false]),
        ];
        sanitize(
            &mut sums,
            &supports,
            1.0,
            &NoiseConfig::new(1.0).unwrap(),
            &mut rng,
        )
        .unwrap();
        assert!(sums[0]
            .row(1)
            .iter()
            .chain(sums[0].row(3))
            .all(|&v| v == 0.0));
        assert!(sums[0].row(0).iter().all(|&v| v != 0.0));
        assert_eq!(sums[1].count_nonzero(), 2);
        assert_eq!(supports[0].count(4, 2), 4);
        assert_eq!(supports[1].count(2, 3), 2);
        assert_eq!(
            Support::Grid {
                rows: vec![true, false],
                cols: vec![true, true, false]
            }
            .count(2, 3),
            2
        );
    }

    #[test]
    fn sensitivity_under_sample_replacement() {
        let mut rng = RngState::new(3);
        let c = 1.0;
        for _ in 0..20 {
            let make = |rng: &mut RngState| {
                vec![
                    GradTerm::Matrix(gaussian_matrix(3, 2, 2.0, rng).unwrap()),
                    GradTerm::Vector((0..2).map(|_| 2.0 * rng.standard_normal()).collect()),
                ]
            };
            let batch: Vec<_> = (0..8).map(|_| make(&mut rng)).collect();
            let replacement = make(&mut rng);
            let shapes = [(3, 2), (1, 2)];
            let sum = |samples: &[Vec<GradTerm>]| {
                let mut acc = ClippedSum::new(global(c), &shapes);
                for s in samples {
                    acc.add_sample(s.clone()).unwrap();
                }
                assert!(acc.max_norm_after() <= c + 1e-9);
                acc.into_sums()
            };
            let a = sum(&batch);
            let mut swapped = batch.clone();
            swapped[3] = replacement;
            let b = sum(&swapped);
            let diff: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| x.sub(y).unwrap().squared_norm())
                .sum::<f64>()
                .sqrt();
            assert!(diff <= 2.0 * c + 1e-9);
            // removal (add/remove adjacency) moves the sum by at most C
            let c_removed = sum(&batch[1..]);
            let diff: f64 = a
                .iter()
                .zip(&c_removed)
                .map(|(x, y)| x.sub(y).unwrap().squared_norm())
                .sum::<f64>()
                .sqrt();
            assert!(diff <= c + 1e-9);
        }
    }
}
