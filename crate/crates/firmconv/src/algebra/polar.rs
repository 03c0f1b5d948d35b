//! Polar decomposition: the orthogonal factor U of X = U S.
//!
//! U is the closest matrix with orthonormal columns in the Frobenius sense,
//! unique exactly when X has full column rank. Two iterations are offered:
//! Higham's inverse-based update for square matrices, quadratically
//! convergent from any nonsingular start, and the inverse-free Newton-Schulz
//! update for tall (or square) matrices, convergent when every singular
//! value lies in (0, sqrt(3)), which the pre-scaling arranges.

use super::spectral::{spectral, spectral_inverse, SpectralBlocks};
use super::FilterBank;
use crate::dense::{CMatrix, DenseMatrix};
use crate::error::{ensure, Error, Result};
use num_complex::Complex64;

/// Iteration used for the polar factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolarMethod {
    /// W <- (1/2) W (3 I - W^* W); no inverses, needs sigma_max < sqrt(3).
    NewtonSchulz,
    /// W <- (1/2) (W + W^{-*}); square matrices only.
    Higham,
}

/// Iteration cap for both methods.
const MAX_ITERS: usize = 100;
/// Relative step-size tolerance declaring convergence.
const STEP_TOL: f64 = 1e-12;
/// Columns are declared orthonormal when ||U^T U - I||_F is below this.
const ORTHO_TOL: f64 = 1e-8;
/// Power-method iterations for the Newton-Schulz pre-scaling.
const PRESCALE_ITERS: usize = 8;

/// Orthogonal polar factor of a real matrix with rows >= cols.
/// Returns the factor and the number of iterations taken.
pub fn polar_decompose(x: &DenseMatrix, method: PolarMethod) -> Result<(DenseMatrix, usize)> {
    ensure!(
        x.rows() >= x.cols(),
        "polar factor with orthonormal columns needs rows >= cols, got {}x{}",
        x.rows(),
        x.cols()
    );
    if method == PolarMethod::Higham {
        ensure!(
            x.rows() == x.cols(),
            "the inverse-based iteration needs a square matrix, got {}x{}",
            x.rows(),
            x.cols()
        );
    }
    let mut w = x.clone();
    if method == PolarMethod::NewtonSchulz {
        let sigma = x.spectral_norm_estimate(PRESCALE_ITERS) * 1.05;
        ensure_nonsingular_scale(sigma)?;
        w.scale(1.0 / sigma);
    }
    let mut iterations = 0;
    for it in 1..=MAX_ITERS {
        iterations = it;
        let next = match method {
            PolarMethod::NewtonSchulz => {
                // W (3I - W^T W) / 2
                let gram = w.transpose().matmul(&w)?;
                let mut bracket = DenseMatrix::identity(gram.rows());
                bracket.scale(3.0);
                bracket.add_scaled(&gram, -1.0);
                let mut next = w.matmul(&bracket)?;
                next.scale(0.5);
                next
            }
            PolarMethod::Higham => {
                // (W + W^{-T}) / 2
                let inv_t = w
                    .transpose()
                    .solve_mat(&DenseMatrix::identity(w.rows()))
                    .map_err(|_| singular_error())?;
                let mut next = w.clone();
                next.add_scaled(&inv_t, 1.0);
                next.scale(0.5);
                next
            }
        };
        let step = next.frob_dist(&w);
        let scale = w.frob_norm().max(f64::MIN_POSITIVE);
        w = next;
        if step <= STEP_TOL * scale {
            break;
        }
    }
    let defect = w.orthogonality_residual();
    if defect > ORTHO_TOL {
        return Err(singular_error());
    }
    Ok((w, iterations))
}

/// Orthogonal (unitary-column) polar factor of a complex matrix.
pub fn polar_decompose_complex(x: &CMatrix, method: PolarMethod) -> Result<(CMatrix, usize)> {
    ensure!(
        x.rows() >= x.cols(),
        "polar factor with orthonormal columns needs rows >= cols, got {}x{}",
        x.rows(),
        x.cols()
    );
    if method == PolarMethod::Higham {
        ensure!(x.rows() == x.cols(), "the inverse-based iteration needs a square matrix");
    }
    let mut w = x.clone();
    if method == PolarMethod::NewtonSchulz {
        let sigma = x.spectral_norm_estimate(PRESCALE_ITERS) * 1.05;
        ensure_nonsingular_scale(sigma)?;
        w.scale(Complex64::new(1.0 / sigma, 0.0));
    }
    let mut iterations = 0;
    for it in 1..=MAX_ITERS {
        iterations = it;
        let next = match method {
            PolarMethod::NewtonSchulz => {
                let gram = w.adjoint().matmul(&w);
                let mut bracket = CMatrix::identity(gram.rows());
                bracket.scale(Complex64::new(3.0, 0.0));
                bracket.add_scaled(&gram, Complex64::new(-1.0, 0.0));
                let mut next = w.matmul(&bracket);
                next.scale(Complex64::new(0.5, 0.0));
                next
            }
            PolarMethod::Higham => {
                let inv_adj = w
                    .adjoint()
                    .solve_mat(&CMatrix::identity(w.rows()))
                    .map_err(|_| singular_error())?;
                let mut next = w.clone();
                next.add_scaled(&inv_adj, Complex64::ONE);
                next.scale(Complex64::new(0.5, 0.0));
                next
            }
        };
        let step = next.frob_dist(&w);
        let scale = w.frob_norm().max(f64::MIN_POSITIVE);
        w = next;
        if step <= STEP_TOL * scale {
            break;
        }
    }
    let defect = w.orthogonality_residual();
    if defect > ORTHO_TOL {
        return Err(singular_error());
    }
    Ok((w, iterations))
}

/// Projects a one-dimensional bank onto the block-circulant Stiefel manifold
/// by per-frequency polar decomposition. The bank must be tall as an
/// operator (m1 >= m2). Returns the projected full-support bank and the
/// largest per-frequency iteration count.
///
/// For single-channel banks each block is 1x1 and the projection reduces to
/// normalizing every eigenvalue to unit modulus (phase projection).
pub fn project_bank(bank: &FilterBank, method: PolarMethod) -> Result<(FilterBank, usize)> {
    ensure!(
        bank.m1() >= bank.m2(),
        "projection onto orthonormal-column banks needs m1 >= m2; transpose first"
    );
    let spec = spectral(bank)?;
    let mut blocks = Vec::with_capacity(spec.period());
    let mut worst_iters = 0;
    for f in 0..spec.period() {
        let (u, iters) = polar_decompose_complex(spec.block(f), method)?;
        worst_iters = worst_iters.max(iters);
        blocks.push(u);
    }
    let projected = SpectralBlocks::new(spec.period(), spec.m1(), spec.m2(), blocks)?;
    Ok((spectral_inverse(&projected)?, worst_iters))
}

fn singular_error() -> Error {
    Error::numerical(
        "matrix is singular or nearly so (sigma_min <= 1e-12 sigma_max); \
         the polar factor is not unique",
    )
}

fn ensure_nonsingular_scale(sigma: f64) -> Result<()> {
    if sigma <= f64::MIN_POSITIVE {
        Err(singular_error())
    } else {
        Ok(())
    }
}
