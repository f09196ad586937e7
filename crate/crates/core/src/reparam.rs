//! Low-rank reparametrisation of a weight matrix, `W ≈ L R`.
//!
//! Each step the weight is re-decomposed with a single power-method pass: a
//! Gaussian sketch `R₀` gives `L = orth(W R₀ᵀ)`, then `R = orth_rows(Lᵀ W)`.
//! Gradients move between the two spaces with
//!
//! ```text
//! ∂L = ∂W Rᵀ,   ∂R = Lᵀ ∂W
//! ∂W = ∂L R + L ∂R − L Lᵀ ∂L R
//! ```
//!
//! With orthonormal factors the round trip `∂W ↦ ∂W` is the orthogonal
//! projection `P(X) = L Lᵀ X + X Rᵀ R − L Lᵀ X Rᵀ R`.

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, orthonormalize_columns, Matrix, RngState};

/// Orthonormality is checked against this Frobenius tolerance.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactors {
    left: Matrix,
    right: Matrix,
}

impl LowRankFactors {
    /// Wraps an explicit pair `(L: m×r, R: r×n)`; both must have orthonormal
    /// columns / rows respectively.
    pub fn new(left: Matrix, right: Matrix) -> Result<Self> {
        if left.cols() != right.rows() || left.cols() == 0 {
            return Err(Error::shape(
                "LowRankFactors::new",
                format!("L {:?} and R {:?}", left.shape(), right.shape()),
            ));
        }
        let f = Self { left, right };
        let (el, er) = f.orthonormality_error();
        if el > ORTHONORMAL_TOL || er > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(format!(
                "factors are not orthonormal (‖LᵀL−I‖={el:.2e}, ‖RRᵀ−I‖={er:.2e})"
            )));
        }
        Ok(f)
    }

    pub fn left(&self) -> &Matrix {
        &self.left
    }

    pub fn right(&self) -> &Matrix {
        &self.right
    }

    pub fn rank(&self) -> usize {
        self.left.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.left.rows(), self.right.cols())
    }

    /// `(‖LᵀL − I‖_F, ‖RRᵀ − I‖_F)`.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let id = Matrix::identity(self.rank());
        let ll = self.left.t_matmul(&self.left).expect("square");
        let rr = self.right.matmul_t(&self.right).expect("square");
        (
            ll.sub(&id).expect("r×r").frobenius_norm(),
            rr.sub(&id).expect("r×r").frobenius_norm(),
        )
    }

    /// `L Lᵀ W`, the rank-`r` approximation of `w` in the span of `L`.
    pub fn approximate(&self, w: &Matrix) -> Result<Matrix> {
        self.left.matmul(&self.left.t_matmul(w)?)
    }
}

/// Number of trainable factor entries, `r(m + n)`.
pub fn factor_parameter_count(m: usize, n: usize, r: usize) -> usize {
    r * (m + n)
}

/// `true` when factorising an `m × n` matrix at rank `r` trains strictly fewer
/// parameters than the matrix itself.
pub fn reduces_parameters(m: usize, n: usize, r: usize) -> bool {
    factor_parameter_count(m, n, r) < m * n
}

fn check_rank(w: &Matrix, r: usize) -> Result<()> {
    let (m, n) = w.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside [1, {}] for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    Ok(())
}

/// Single-step power-method factorisation with a fresh Gaussian sketch.
pub fn decompose(w: &Matrix, r: usize, rng: &mut RngState) -> Result<LowRankFactors> {
    check_rank(w, r)?;
    let sketch = gaussian_matrix(r, w.cols(), 1.0, rng)?;
    decompose_from(w, &sketch, rng)
}

/// Same as [`decompose`] but starting from a caller-supplied `r × n` sketch
/// (e.g. the previous step's `R` for a warm start).
pub fn decompose_from(w: &Matrix, sketch: &Matrix, rng: &mut RngState) -> Result<LowRankFactors> {
    let r = sketch.rows();
    check_rank(w, r)?;
    if sketch.cols() != w.cols() {
        return Err(Error::shape(
            "decompose_from",
            format!("sketch {:?} for weight {:?}", sketch.shape(), w.shape()),
        ));
    }
    let left = orthonormalize_columns(&w.matmul_t(sketch)?, rng)?;
    let right_t = orthonormalize_columns(&w.t_matmul(&left)?, rng)?;
    Ok(LowRankFactors {
        left,
        right: right_t.transpose(),
    })
}

/// `(∂W Rᵀ, Lᵀ ∂W)`.
pub fn factor_gradients(dw: &Matrix, f: &LowRankFactors) -> Result<(Matrix, Matrix)> {
    if dw.shape() != f.shape() {
        return Err(Error::shape(
            "factor_gradients",
            format!("gradient {:?} for factors {:?}", dw.shape(), f.shape()),
        ));
    }
    Ok((dw.matmul_t(&f.right)?, f.left.t_matmul(dw)?))
}

/// `∂L R + L ∂R − L Lᵀ ∂L R`.
pub fn reconstruct_gradient(dl: &Matrix, dr: &Matrix, f: &LowRankFactors) -> Result<Matrix> {
    let (m, n) = f.shape();
    let r = f.rank();
    if dl.shape() != (m, r) || dr.shape() != (r, n) {
        return Err(Error::shape(
            "reconstruct_gradient",
            format!(
                "∂L {:?}, ∂R {:?} for factors {m}x{r}x{n}",
                dl.shape(),
                dr.shape()
            ),
        ));
    }
    let mut out = dl.matmul(&f.right)?;
    out.add_scaled(&f.left.matmul(dr)?, 1.0)?;
    let coupling = f.left.matmul(&f.left.t_matmul(dl)?.matmul(&f.right)?)?;
    out.add_scaled(&coupling, -1.0)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    /// Singular values by one-sided Jacobi rotations on the columns of `a`.
    fn jacobi_singular_values(a: &Matrix) -> Vec<f64> {
        let mut u = if a.rows() >= a.cols() {
            a.clone()
        } else {
            a.transpose()
        };
        let n = u.cols();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in p + 1..n {
                    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                    for i in 0..u.rows() {
                        let (x, y) = (u.get(i, p), u.get(i, q));
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                    if gamma == 0.0 {
                        continue;
                    }
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..u.rows() {
                        let (x, y) = (u.get(i, p), u.get(i, q));
                        u.set(i, p, c * x - s * y);
                        u.set(i, q, s * x + c * y);
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut sv: Vec<f64> = (0..n)
            .map(|j| u.col(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv
    }

    fn random_factors(m: usize, n: usize, r: usize, rng: &mut RngState) -> LowRankFactors {
        let w = gaussian_matrix(m, n, 1.0, rng).unwrap();
        decompose(&w, r, rng).unwrap()
    }

    #[test]
    fn rank_one_is_recovered() {
        let mut rng = RngState::new(1);
        let u = gaussian_matrix(6, 1, 1.0, &mut rng).unwrap();
        let v = gaussian_matrix(1, 9, 1.0, &mut rng).unwrap();
        let w = u.matmul(&v).unwrap();
        let f = decompose(&w, 1, &mut rng).unwrap();
        assert!(rel(&f.approximate(&w).unwrap(), &w) < 1e-8);
    }

    #[test]
    fn full_rank_identity_is_reconstructed() {
        let w = Matrix::identity(4);
        let f = decompose(&w, 4, &mut RngState::new(2)).unwrap();
        let rec = f
            .approximate(&w)
            .unwrap()
            .matmul(&f.right().t_matmul(f.right()).unwrap())
            .unwrap();
        assert!(rec.max_abs_diff(&w) < 1e-8);
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        let w = Matrix::identity(3);
        assert!(decompose(&w, 0, &mut RngState::new(0)).is_err());
        assert!(decompose(&w, 4, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn jacobi_oracle_sanity() {
        let w = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, -2.0], &[0.0, 0.0]]).unwrap();
        let sv = jacobi_singular_values(&w);
        assert!((sv[0] - 3.0).abs() < 1e-12 && (sv[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn approximation_error_is_near_optimal() {
        for seed in 0..50 {
            let mut rng = RngState::new(seed);
            let w = gaussian_matrix(20, 30, 1.0, &mut rng).unwrap();
            let f = decompose(&w, 4, &mut rng).unwrap();
            let err = f.approximate(&w).unwrap().sub(&w).unwrap().frobenius_norm();
            let sv = jacobi_singular_values(&w);
            let best = sv[4..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!(err >= best * (1.0 - 1e-12), "seed {seed}: {err} < {best}");
            assert!(err <= 3.0 * best, "seed {seed}: {err} > 3×{best}");
        }
    }

    #[test]
    fn zero_gradient_maps_to_zero() {
        let mut rng = RngState::new(3);
        let f = random_factors(5, 7, 2, &mut rng);
        let (dl, dr) = factor_gradients(&Matrix::zeros(5, 7), &f).unwrap();
        assert_eq!(dl.count_nonzero() + dr.count_nonzero(), 0);
        let dw = reconstruct_gradient(&dl, &dr, &f).unwrap();
        assert_eq!(dw.count_nonzero(), 0);
    }

    #[test]
    fn gradients_of_structured_matrix() {
        // dW = L M R  ⇒  dL = L M, dR = M R
        let mut rng = RngState::new(4);
        let f = random_factors(8, 6, 3, &mut rng);
        let core = gaussian_matrix(3, 3, 1.0, &mut rng).unwrap();
        let dw = f.left().matmul(&core).unwrap().matmul(f.right()).unwrap();
        let (dl, dr) = factor_gradients(&dw, &f).unwrap();
        assert!(dl.max_abs_diff(&f.left().matmul(&core).unwrap()) < 1e-10);
        assert!(dr.max_abs_diff(&core.matmul(f.right()).unwrap()) < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = RngState::new(5);
        let f = random_factors(4, 5, 2, &mut rng);
        assert!(factor_gradients(&Matrix::zeros(5, 4), &f).is_err());
        assert!(reconstruct_gradient(&Matrix::zeros(4, 3), &Matrix::zeros(2, 5), &f).is_err());
    }

    #[test]
    fn non_orthonormal_factors_are_rejected() {
        let l = Matrix::from_rows(&[&[2.0], &[0.0]]).unwrap();
        let r = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        assert!(LowRankFactors::new(l, r).is_err());
    }

    #[test]
    fn parameter_count_reduction() {
        assert_eq!(factor_parameter_count(784, 128, 8), 7296);
        assert!(reduces_parameters(784, 128, 8));
        assert!(!reduces_parameters(4, 4, 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn factors_are_orthonormal(seed in any::<u64>(), m in 2usize..24, n in 2usize..24, r in 1usize..6) {
            let r = r.min(m).min(n);
            let mut rng = RngState::new(seed);
            let f = random_factors(m, n, r, &mut rng);
            let (el, er) = f.orthonormality_error();
            prop_assert!(el < ORTHONORMAL_TOL && er < ORTHONORMAL_TOL);
        }

        #[test]
        fn round_trip_is_idempotent_and_contractive(seed in any::<u64>(), m in 2usize..20, n in 2usize..20, r in 1usize..5) {
            let r = r.min(m).min(n);
            let mut rng = RngState::new(seed);
            let f = random_factors(m, n, r, &mut rng);
            let dw = gaussian_matrix(m, n, 1.0, &mut rng).unwrap();
            let project = |x: &Matrix| {
                let (dl, dr) = factor_gradients(x, &f).unwrap();
                reconstruct_gradient(&dl, &dr, &f).unwrap()
            };
            let once = project(&dw);
            let twice = project(&once);
            prop_assert!(twice.sub(&once).unwrap().frobenius_norm() <= 1e-9 * once.frobenius_norm().max(1.0));
            prop_assert!(once.frobenius_norm() <= dw.frobenius_norm() + 1e-9);
        }
    }
}
