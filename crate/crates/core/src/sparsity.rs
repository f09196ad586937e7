//! Unit importance and top-k masking of factor gradients.
//!
//! Importance of an input unit is the absolute sum of the weights leaving it,
//! importance of an output unit the absolute sum of the weights entering it.
//! For conv kernels the sums also run over the `k × k` spatial taps, so units
//! are channels.
//!
//! Sparsity `p` is a fraction in `[0, 1)`: each side keeps the
//! `⌈(1 − p)·len⌉` most important units, ties going to the lower index, and
//! the factor-gradient rows/columns of the remaining units are zeroed.
//!
//! Units map onto the rows and columns of a layer's weight matrix through
//! [`UnitLayout`]: dense weights are `inputs × outputs`; flattened conv
//! kernels are `out_channels × (in_channels·k²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState};
use crate::model::Tensor4;
use crate::reparam::LowRankFactors;

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVectors {
    /// One entry per input unit (`I`).
    pub input: Vec<f64>,
    /// One entry per output unit (`O`).
    pub output: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitLayout {
    /// Rows are input units, columns are output units.
    Dense,
    /// Rows are output channels; each input channel owns `kernel_area`
    /// consecutive columns.
    Conv { kernel_area: usize },
}

/// Where importance is read from each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceSource {
    /// Absolute sums of the current weights.
    #[default]
    Weights,
    /// Absolute sums of the low-rank factors `L`, `R` themselves.
    Factors,
}

/// How frozen units are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsifyMode {
    #[default]
    Importance,
    /// Uniformly random units, same kept counts.
    Random,
}

/// Kept units on both sides of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityMask {
    /// Sorted ascending.
    pub kept_inputs: Vec<usize>,
    /// Sorted ascending.
    pub kept_outputs: Vec<usize>,
    pub input_units: usize,
    pub output_units: usize,
}

/// Row/column keep flags in weight-matrix coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorMask {
    pub rows: Vec<bool>,
    pub cols: Vec<bool>,
}

impl FactorMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows: vec![true; rows],
            cols: vec![true; cols],
        }
    }

    pub fn kept_rows(&self) -> usize {
        self.rows.iter().filter(|&&k| k).count()
    }

    pub fn kept_cols(&self) -> usize {
        self.cols.iter().filter(|&&k| k).count()
    }

    /// Released factor coordinates at rank `r`: `(kept rows + kept cols)·r`.
    pub fn factor_coordinates(&self, r: usize) -> usize {
        (self.kept_rows() + self.kept_cols()) * r
    }
}

fn abs_sums(w: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0; w.rows()];
    let mut cols = vec![0.0; w.cols()];
    for (i, r) in rows.iter_mut().enumerate() {
        for (c, &v) in cols.iter_mut().zip(w.row(i)) {
            *r += v.abs();
            *c += v.abs();
        }
    }
    (rows, cols)
}

fn group_sums(v: &[f64], group: usize) -> Vec<f64> {
    v.chunks(group).map(|c| c.iter().sum()).collect()
}

/// `I_i = Σ_j |W_ij|`, `O_j = Σ_i |W_ij|` for a dense `m × n` weight.
pub fn importance(w: &Matrix) -> ImportanceVectors {
    let (input, output) = abs_sums(w);
    ImportanceVectors { input, output }
}

/// Channel importance of an `n × m × k × k` kernel: `I` over the `m` input
/// channels, `O` over the `n` output channels.
pub fn importance_conv(w: &Tensor4) -> ImportanceVectors {
    let [n, m, k1, k2] = w.dims();
    let mut input = vec![0.0; m];
    let mut output = vec![0.0; n];
    for (o, out) in output.iter_mut().enumerate() {
        for (c, inp) in input.iter_mut().enumerate() {
            for ki in 0..k1 {
                for kj in 0..k2 {
                    let a = w.get([o, c, ki, kj]).abs();
                    *out += a;
                    *inp += a;
                }
            }
        }
    }
    ImportanceVectors { input, output }
}

/// Importance of a weight held in matrix view with the given layout.
pub fn importance_of(w: &Matrix, layout: UnitLayout) -> ImportanceVectors {
    let (rows, cols) = abs_sums(w);
    match layout {
        UnitLayout::Dense => ImportanceVectors {
            input: rows,
            output: cols,
        },
        UnitLayout::Conv { kernel_area } => ImportanceVectors {
            input: group_sums(&cols, kernel_area),
            output: rows,
        },
    }
}

/// Importance read off the factors: row sums of `|L|` for the row-side units,
/// column sums of `|R|` for the column-side units.
pub fn importance_from_factors(f: &LowRankFactors, layout: UnitLayout) -> ImportanceVectors {
    let (row_side, _) = abs_sums(f.left());
    let (_, col_side) = abs_sums(f.right());
    match layout {
        UnitLayout::Dense => ImportanceVectors {
            input: row_side,
            output: col_side,
        },
        UnitLayout::Conv { kernel_area } => ImportanceVectors {
            input: group_sums(&col_side, kernel_area),
            output: row_side,
        },
    }
}

fn check_sparsity(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "sparsity must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// `⌈(1 − p)·len⌉`, clamped to `[1, len]`; a 1e-9 slack absorbs products such
/// as `(1 − 0.7)·10 = 3.0000000000000004`.
pub fn kept_count(len: usize, p: f64) -> usize {
    let x = (1.0 - p) * len as f64;
    ((x - 1e-9).ceil() as usize).clamp(len.min(1), len)
}

fn top_units(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: equal scores keep ascending index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

pub fn build_mask(iv: &ImportanceVectors, p: f64) -> Result<SparsityMask> {
    check_sparsity(p)?;
    Ok(SparsityMask {
        kept_inputs: top_units(&iv.input, kept_count(iv.input.len(), p)),
        kept_outputs: top_units(&iv.output, kept_count(iv.output.len(), p)),
        input_units: iv.input.len(),
        output_units: iv.output.len(),
    })
}

/// Random units with the same kept counts as [`build_mask`].
pub fn random_mask(
    input_units: usize,
    output_units: usize,
    p: f64,
    rng: &mut RngState,
) -> Result<SparsityMask> {
    check_sparsity(p)?;
    let mut pick = |len: usize| {
        let keep = kept_count(len, p);
        let mut idx: Vec<usize> = (0..len).collect();
        // partial Fisher–Yates
        for i in 0..keep {
            let j = i + rng.below(len - i);
            idx.swap(i, j);
        }
        let mut kept = idx[..keep].to_vec();
        kept.sort_unstable();
        kept
    };
    let kept_inputs = pick(input_units);
    let kept_outputs = pick(output_units);
    Ok(SparsityMask {
        kept_inputs,
        kept_outputs,
        input_units,
        output_units,
    })
}

impl SparsityMask {
    pub fn full(input_units: usize, output_units: usize) -> Self {
        Self {
            kept_inputs: (0..input_units).collect(),
            kept_outputs: (0..output_units).collect(),
            input_units,
            output_units,
        }
    }

    /// Translates unit sets into row/column flags of the weight matrix.
    pub fn factor_mask(&self, layout: UnitLayout) -> FactorMask {
        let flags = |kept: &[usize], len: usize| {
            let mut f = vec![false; len];
            kept.iter().for_each(|&i| f[i] = true);
            f
        };
        let inputs = flags(&self.kept_inputs, self.input_units);
        let outputs = flags(&self.kept_outputs, self.output_units);
        match layout {
            UnitLayout::Dense => FactorMask {
                rows: inputs,
                cols: outputs,
            },
            UnitLayout::Conv { kernel_area } => FactorMask {
                rows: outputs,
                cols: inputs
                    .iter()
                    .flat_map(|&k| std::iter::repeat_n(k, kernel_area))
                    .collect(),
            },
        }
    }
}

/// Zeroes the rows of `dl` and columns of `dr` whose units are frozen.
pub fn apply_mask(dl: &Matrix, dr: &Matrix, mask: &FactorMask) -> Result<(Matrix, Matrix)> {
    let (mut l, mut r) = (dl.clone(), dr.clone());
    apply_mask_in_place(&mut l, &mut r, mask)?;
    Ok((l, r))
}

pub fn apply_mask_in_place(dl: &mut Matrix, dr: &mut Matrix, mask: &FactorMask) -> Result<()> {
    if dl.rows() != mask.rows.len() || dr.cols() != mask.cols.len() || dl.cols() != dr.rows() {
        return Err(Error::shape(
            "apply_mask",
            format!(
                "∂L {:?}, ∂R {:?} against mask {}x{}",
                dl.shape(),
                dr.shape(),
                mask.rows.len(),
                mask.cols.len()
            ),
        ));
    }
    for (i, &keep) in mask.rows.iter().enumerate() {
        if !keep {
            dl.row_mut(i).fill(0.0);
        }
    }
    for l in 0..dr.rows() {
        for (v, &keep) in dr.row_mut(l).iter_mut().zip(&mask.cols) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Copy of `v` with entries whose flag is false set to zero.
pub fn masked_vector(v: &[f64], keep: &[bool]) -> Vec<f64> {
    v.iter()
        .zip(keep)
        .map(|(&x, &k)| if k { x } else { 0.0 })
        .collect()
}
