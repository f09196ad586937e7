//! Convolution helpers: 4-D kernels, their flattened matrix view, and
//! patch unfolding (im2col) for a single image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Convolution kernel `n × m × k × k` (out channels, in channels, height, width),
/// row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                "Tensor4::new",
                format!("{dims:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn get(&self, idx: [usize; 4]) -> f64 {
        let [_, m, k1, k2] = self.dims;
        self.data[((idx[0] * m + idx[1]) * k1 + idx[2]) * k2 + idx[3]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `n × m × k × k` → `n × (m·k·k)`; column index is `(c·k + ki)·k + kj`.
pub fn flatten_conv_weight(w: &Tensor4) -> Matrix {
    let [n, m, k1, k2] = w.dims;
    Matrix::from_vec(n, m * k1 * k2, w.data.clone()).expect("length checked at construction")
}

/// Inverse of [`flatten_conv_weight`] for square `k × k` kernels.
pub fn unflatten_conv_weight(w: &Matrix, in_channels: usize, kernel: usize) -> Result<Tensor4> {
    if w.cols() != in_channels * kernel * kernel {
        return Err(Error::shape(
            "unflatten_conv_weight",
            format!(
                "{} columns cannot hold {in_channels}x{kernel}x{kernel}",
                w.cols()
            ),
        ));
    }
    Tensor4::new(
        [w.rows(), in_channels, kernel, kernel],
        w.as_slice().to_vec(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Input pixel index feeding `(position, column)` of the patch matrix, or
    /// `None` for zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, c: usize, ki: usize, kj: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
        let ix = (ox * self.stride + kj) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            return None;
        }
        Some((c * self.height + iy as usize) * self.width + ix as usize)
    }

    /// Unfolds one `channels × height × width` image into a `positions × patch_len`
    /// matrix whose row `p` is the receptive field of output position `p`.
    pub fn im2col(&self, image: &[f64]) -> Matrix {
        let k = self.kernel;
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = Matrix::zeros(oh * ow, self.patch_len());
        for oy in 0..oh {
            for ox in 0..ow {
                let row = out.row_mut(oy * ow + ox);
                for c in 0..self.channels {
                    for ki in 0..k {
                        for kj in 0..k {
                            if let Some(src) = self.source(oy, ox, c, ki, kj) {
                                row[(c * k + ki) * k + kj] = image[src];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back onto
    /// the image, accumulating overlaps.
    pub fn col2im(&self, patches: &Matrix, image: &mut [f64]) {
        let k = self.kernel;
        let (oh, ow) = (self.out_height(), self.out_width());
        for oy in 0..oh {
            for ox in 0..ow {
                let row = patches.row(oy * ow + ox);
                for c in 0..self.channels {
                    for ki in 0..k {
                        for kj in 0..k {
                            if let Some(src) = self.source(oy, ox, c, ki, kj) {
                                image[src] += row[(c * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
}
