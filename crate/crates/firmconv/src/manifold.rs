//! Riemannian geometry of orthogonal filter banks.
//!
//! The constraint set is the Stiefel manifold in block-circulant form: banks
//! whose tall orientation T (rows >= columns as an operator) satisfies
//! T^T T = I. Everything here works per frequency, where the constraint
//! decouples into m small complex Stiefel problems.
//!
//! The retraction is the Cayley transform R = (I - W/2)^{-1} (I + W/2) T
//! with the enlarged velocity field W(T, X) = What - What^T,
//! What = X T^T - (1/2) T (T^T X T^T). W is linear in the ambient direction
//! X and invariant under the tangent projection of X, so gradients can be
//! fed in without projecting first.

use crate::algebra::polar::{polar_decompose_complex, PolarMethod};
use crate::algebra::spectral::{spectral, spectral_inverse, SpectralBlocks};
use crate::algebra::{FilterBank, Geometry};
use crate::dense::{CMatrix, DenseMatrix};
use crate::error::{ensure, Error, Result};
use num_complex::Complex64;

/// Absolute Gram-residual tolerance for manifold membership.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

/// Exponent cap for the positive-scalar exponential map; exp arguments above
/// this are clamped (and flagged) instead of overflowing.
pub const EXP_CLAMP: f64 = 700.0;

/// A bank lying on the block-circulant Stiefel manifold.
///
/// Construction normalizes orientation: the stored bank is tall (m1 >= m2)
/// and `transposed` records whether the caller's operator is its transpose.
#[derive(Debug, Clone)]
pub struct StiefelPoint {
    tall: FilterBank,
    transposed: bool,
}

impl StiefelPoint {
    /// Wraps `bank`, transposing if needed, and checks membership.
    pub fn from_bank(bank: FilterBank) -> Result<Self> {
        let (tall, transposed) = if bank.m1() >= bank.m2() {
            (bank, false)
        } else {
            (bank.transpose(), true)
        };
        let residual = tall.gram_residual();
        ensure!(
            residual <= MEMBERSHIP_TOL,
            "bank is off the manifold: ||T^T T - I||_F = {residual:.3e} > {MEMBERSHIP_TOL:.0e}"
        );
        Ok(StiefelPoint { tall, transposed })
    }

    /// Wraps a bank that is on the manifold by construction (e.g. the output
    /// of an exact retraction). Debug builds still verify.
    pub(crate) fn from_bank_trusted(bank: FilterBank) -> Self {
        let (tall, transposed) = if bank.m1() >= bank.m2() {
            (bank, false)
        } else {
            (bank.transpose(), true)
        };
        debug_assert!(
            tall.gram_residual() <= 1e-6,
            "trusted bank is far off the manifold"
        );
        StiefelPoint { tall, transposed }
    }

    /// The tall representative with orthonormal columns.
    pub fn tall(&self) -> &FilterBank {
        &self.tall
    }

    /// Whether the caller's operator is the transpose of the tall form.
    pub fn is_transposed(&self) -> bool {
        self.transposed
    }

    /// The bank in the orientation it was constructed with.
    pub fn applied(&self) -> FilterBank {
        if self.transposed {
            self.tall.transpose()
        } else {
            self.tall.clone()
        }
    }

    pub fn gram_residual(&self) -> f64 {
        self.tall.gram_residual()
    }
}

/// A strictly positive scalar, the manifold of activation thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveScalar(f64);

impl PositiveScalar {
    pub fn new(v: f64) -> Result<Self> {
        ensure!(
            v.is_finite() && v > 0.0,
            "positive scalar required, got {v}"
        );
        Ok(PositiveScalar(v))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Exponential-map retraction on the positive reals: alpha * exp(r / alpha).
/// The second return value reports whether the exponent was clamped; the
/// clamp is symmetric so the result can neither overflow nor underflow to
/// exactly zero.
pub fn positive_retract(alpha: PositiveScalar, r: f64) -> (PositiveScalar, bool) {
    let ratio = r / alpha.value();
    let clamped = ratio.abs() > EXP_CLAMP;
    let safe = ratio.clamp(-EXP_CLAMP, EXP_CLAMP);
    (PositiveScalar(alpha.value() * safe.exp()), clamped)
}

/// Linear solver used inside the Cayley retraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetractSolver {
    /// Materialize and solve densely. Oracle route; entry-count capped.
    Dense,
    /// Per-frequency complex LU. The production route.
    Spectral,
    /// Per-frequency fixed-point iteration, no factorizations. Falls back
    /// when the iteration stalls.
    FixedPoint,
}

/// Result of a retraction.
#[derive(Debug, Clone)]
pub struct RetractOutcome {
    pub point: StiefelPoint,
    /// Set when the fixed-point route gave up and a direct solve finished
    /// the job.
    pub fell_back: bool,
}

const FIXED_POINT_ITERS: usize = 30;
const FIXED_POINT_TOL: f64 = 1e-12;

/// Projects an ambient direction onto the tangent space at `t`:
/// Pi(X) = X - T sym(T^T X), sym(M) = (M + M^T)/2. Returns a full-support
/// bank shaped like the tall representative.
pub fn tangent_project(t: &StiefelPoint, x: &FilterBank) -> Result<FilterBank> {
    let (ts, xs) = spectral_pair(t, x)?;
    let mut blocks = Vec::with_capacity(ts.period());
    for f in 0..ts.period() {
        blocks.push(tangent_project_block(ts.block(f), xs.block(f)));
    }
    let spec = SpectralBlocks::new(ts.period(), ts.m1(), ts.m2(), blocks)?;
    spectral_inverse(&spec)
}

fn tangent_project_block(t: &CMatrix, x: &CMatrix) -> CMatrix {
    let tx = t.adjoint().matmul(x);
    let mut sym = tx.adjoint();
    sym.add_scaled(&tx, Complex64::ONE);
    sym.scale(Complex64::new(0.5, 0.0));
    let mut out = x.clone();
    out.add_scaled(&t.matmul(&sym), -Complex64::ONE);
    out
}

/// The enlarged Cayley velocity field W(T, X) = What - What^*,
/// What = X T^* - (1/2) T (T^* X T^*), as a full-support m1 x m1 bank.
pub fn cayley_velocity(t: &StiefelPoint, x: &FilterBank) -> Result<FilterBank> {
    let (ts, xs) = spectral_pair(t, x)?;
    let mut blocks = Vec::with_capacity(ts.period());
    for f in 0..ts.period() {
        blocks.push(velocity_block(ts.block(f), xs.block(f)));
    }
    let spec = SpectralBlocks::new(ts.period(), ts.m1(), ts.m1(), blocks)?;
    spectral_inverse(&spec)
}

fn velocity_block(t: &CMatrix, x: &CMatrix) -> CMatrix {
    // What = X T^* - 1/2 T (T^* X T^*)
    let t_adj = t.adjoint();
    let mut what = x.matmul(&t_adj);
    let inner = t_adj.matmul(&x.matmul(&t_adj));
    what.add_scaled(&t.matmul(&inner), Complex64::new(-0.5, 0.0));
    // W = What - What^*
    let mut w = what.clone();
    w.add_scaled(&what.adjoint(), -Complex64::ONE);
    w
}

/// Cayley retraction along the ambient direction `x` (typically a negative
/// gradient, already scaled by the step size):
/// R = (I - W/2)^{-1} (I + W/2) T with W = W(T, x).
pub fn cayley_retract(
    t: &StiefelPoint,
    x: &FilterBank,
    solver: RetractSolver,
) -> Result<RetractOutcome> {
    // the retracted point inherits the orientation of `t`, so `applied()`
    // keeps meaning "the caller's operator"
    let oriented = |tall: FilterBank| {
        let mut point = StiefelPoint::from_bank_trusted(tall);
        point.transposed = t.transposed;
        point
    };
    let (ts, xs) = spectral_pair(t, x)?;
    match solver {
        RetractSolver::Spectral => {
            let spec = retract_spectral(&ts, &xs)?;
            Ok(RetractOutcome {
                point: oriented(spectral_inverse(&spec)?),
                fell_back: false,
            })
        }
        RetractSolver::Dense => {
            let bank = retract_dense(t, x)?;
            Ok(RetractOutcome {
                point: oriented(bank),
                fell_back: false,
            })
        }
        RetractSolver::FixedPoint => match retract_fixed_point(&ts, &xs)? {
            Some(spec) => Ok(RetractOutcome {
                point: oriented(spectral_inverse(&spec)?),
                fell_back: false,
            }),
            None => {
                eprintln!(
                    "warning: fixed-point retraction stalled after {FIXED_POINT_ITERS} \
                     iterations; falling back to a direct solve"
                );
                let fallback = if dense_fits(t) {
                    retract_dense(t, x)?
                } else {
                    spectral_inverse(&retract_spectral(&ts, &xs)?)?
                };
                Ok(RetractOutcome {
                    point: oriented(fallback),
                    fell_back: true,
                })
            }
        },
    }
}

fn retract_spectral(ts: &SpectralBlocks, xs: &SpectralBlocks) -> Result<SpectralBlocks> {
    let n = ts.m1();
    let mut blocks = Vec::with_capacity(ts.period());
    for f in 0..ts.period() {
        let w = velocity_block(ts.block(f), xs.block(f));
        let mut lhs = CMatrix::identity(n);
        lhs.add_scaled(&w, Complex64::new(-0.5, 0.0));
        let mut rhs_op = CMatrix::identity(n);
        rhs_op.add_scaled(&w, Complex64::new(0.5, 0.0));
        let rhs = rhs_op.matmul(ts.block(f));
        blocks.push(lhs.solve_mat(&rhs)?);
    }
    SpectralBlocks::new(ts.period(), ts.m1(), ts.m2(), blocks)
}

fn retract_fixed_point(
    ts: &SpectralBlocks,
    xs: &SpectralBlocks,
) -> Result<Option<SpectralBlocks>> {
    let mut blocks = Vec::with_capacity(ts.period());
    for f in 0..ts.period() {
        let t = ts.block(f);
        let w = velocity_block(t, xs.block(f));
        // R = T + (W/2)(T + R), iterated from R = T
        let mut r = t.clone();
        let mut converged = false;
        for _ in 0..FIXED_POINT_ITERS {
            let mut sum = t.clone();
            sum.add_scaled(&r, Complex64::ONE);
            let mut next = w.matmul(&sum);
            next.scale(Complex64::new(0.5, 0.0));
            next.add_scaled(t, Complex64::ONE);
            let step = next.frob_dist(&r);
            let scale = r.frob_norm().max(f64::MIN_POSITIVE);
            r = next;
            if step <= FIXED_POINT_TOL * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Ok(None);
        }
        blocks.push(r);
    }
    Ok(Some(SpectralBlocks::new(ts.period(), ts.m1(), ts.m2(), blocks)?))
}

fn dense_fits(t: &StiefelPoint) -> bool {
    let n = t.tall().output_len() as u64;
    n * n <= 4_000_000
}

fn retract_dense(t: &StiefelPoint, x: &FilterBank) -> Result<FilterBank> {
    let w_bank = cayley_velocity(t, x)?;
    let w = w_bank.to_dense()?;
    let t_dense = t.tall().to_dense()?;
    let n = w.rows();
    let mut lhs = DenseMatrix::identity(n);
    lhs.add_scaled(&w, -0.5);
    let mut rhs_op = DenseMatrix::identity(n);
    rhs_op.add_scaled(&w, 0.5);
    let rhs = rhs_op.matmul(&t_dense)?;
    let r = lhs.solve_mat(&rhs)?;
    dense_to_bank(&r, t.tall().geometry(), t.tall().m1(), t.tall().m2())
}

/// Reads a block-circulant matrix back into a full-support bank by sampling
/// the first column of every block.
fn dense_to_bank(
    dense: &DenseMatrix,
    geometry: Geometry,
    m1: usize,
    m2: usize,
) -> Result<FilterBank> {
    let m = match geometry {
        Geometry::OneD { m } => m,
        Geometry::TwoD { .. } => {
            return Err(Error::validation("dense extraction is one-dimensional"))
        }
    };
    ensure!(
        dense.rows() == m1 * m && dense.cols() == m2 * m,
        "dense matrix is {}x{}, expected {}x{}",
        dense.rows(),
        dense.cols(),
        m1 * m,
        m2 * m
    );
    let mut bank = FilterBank::zeros(geometry, m1, m2, crate::algebra::Support::Full)?;
    for j in 0..m1 {
        for i in 0..m2 {
            let dst = bank.cell_mut(j, i);
            for (p, d) in dst.iter_mut().enumerate() {
                *d = dense.at(j * m + p, i * m);
            }
        }
    }
    Ok(bank)
}

/// Projects an arbitrary bank onto the manifold: per-frequency polar
/// decomposition (phase normalization in the single-channel case). Returns
/// the projected point and the worst per-frequency iteration count.
pub fn stiefel_project(bank: &FilterBank, method: PolarMethod) -> Result<(StiefelPoint, usize)> {
    let transposed = bank.m1() < bank.m2();
    let tall = if transposed {
        bank.transpose()
    } else {
        bank.clone()
    };
    let spec = spectral(&tall)?;
    let mut blocks = Vec::with_capacity(spec.period());
    let mut worst = 0;
    for f in 0..spec.period() {
        let (u, iters) = polar_decompose_complex(spec.block(f), method)?;
        worst = worst.max(iters);
        blocks.push(u);
    }
    let projected = SpectralBlocks::new(spec.period(), spec.m1(), spec.m2(), blocks)?;
    let bank = spectral_inverse(&projected)?;
    let mut point = StiefelPoint::from_bank_trusted(bank);
    point.transposed = transposed;
    Ok((point, worst))
}

/// Spectralizes the point and an ambient direction, validating shapes.
fn spectral_pair(t: &StiefelPoint, x: &FilterBank) -> Result<(SpectralBlocks, SpectralBlocks)> {
    let tall = t.tall();
    ensure!(
        x.geometry() == tall.geometry() && x.m1() == tall.m1() && x.m2() == tall.m2(),
        "ambient direction has shape {}x{} ({:?}), expected {}x{} ({:?}) \
         matching the tall representative",
        x.m1(),
        x.m2(),
        x.geometry(),
        tall.m1(),
        tall.m2(),
        tall.geometry()
    );
    Ok((spectral(tall)?, spectral(x)?))
}
