//! Orthogonality penalty on filter banks and the projection that drives a
//! bank (or its transpose) onto the Stiefel manifold without materializing
//! the structured matrix.
//!
//! The penalty is P(a) = ||T^t T - I||_F^2 where T is the block-circulant
//! operator built from the taps a. Every block of T^t T is circulant, so P,
//! its gradient, and its Hessian-vector products all reduce to correlations
//! over the tap grid. The implementations here work in tap coordinates
//! throughout; matrix-space quantities enter only through the per-cell
//! multiplicity factor (each tap appears once per circulant cell).

use crate::algebra::{lag_table, FilterBank, Geometry};
use crate::error::{Error, Result};

/// Gradient stop for the projection: mean-square tap gradient below this
/// means the iterate is numerically stationary.
const GRAD_TOL: f64 = 1e-10;

/// Curvature floor; steps are capped rather than divided by a vanishing
/// Hessian norm.
const RHO_FLOOR: f64 = 1e-12;

/// Default iteration cap for [`project_filters`].
pub const PROJECT_MAX_ITERS: usize = 5000;

/// Folded residual of the Gram identity: the first column of each circulant
/// block of T^t T minus the identity's, laid out like
/// `FilterBank::folded_correlations`. The penalty and all its derivatives
/// are built from this vector.
fn folded_residual(bank: &FilterBank) -> Vec<f64> {
    let sz = bank.geometry().cell_size();
    let m2 = bank.m2();
    let mut folded = bank.folded_correlations();
    for s in 0..m2 {
        folded[(s * m2 + s) * sz] -= 1.0;
    }
    folded
}

/// P(a) = ||T^t T - I||_F^2. Equal to `bank.gram_residual()` squared; kept
/// separate because the optimizer needs the squared form and its exact
/// algebraic relatives below.
pub fn penalty_value(bank: &FilterBank) -> f64 {
    let sz = bank.geometry().cell_size();
    let r = folded_residual(bank);
    sz as f64 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Correlates a source bank against a folded correlation table:
/// out^{(t,s)}_w = sum_{s2, w2} corr^{(s,s2)}_{v(w,w2)} src^{(t,s2)}_{w2}
/// with v(w, w2) the per-axis circular lag between tap positions w and w2.
/// This is the tap-space form of src * C for a block-circulant C whose
/// blocks have first columns `corr`.
fn correlate_with_table(src: &FilterBank, corr: &[f64]) -> Vec<f64> {
    let m = src.geometry().period();
    let sz = src.geometry().cell_size();
    let m2 = src.m2();
    let tap_len = src.tap_len();
    let shifts = src.axis_shifts();
    let lags = lag_table(&shifts, m);
    let w_axis = shifts.len();
    let mut out = vec![0.0; src.taps().len()];
    match src.geometry() {
        Geometry::OneD { .. } => {
            for t in 0..src.m1() {
                for s in 0..m2 {
                    let dst =
                        &mut out[(t * m2 + s) * tap_len..][..tap_len];
                    for s2 in 0..m2 {
                        let col = &corr[(s * m2 + s2) * sz..][..sz];
                        let a = src.cell(t, s2);
                        for (w, d) in dst.iter_mut().enumerate() {
                            let row = &lags[w * w_axis..][..w_axis];
                            let mut acc = 0.0;
                            for (w2, &v) in row.iter().enumerate() {
                                acc += col[v] * a[w2];
                            }
                            *d += acc;
                        }
                    }
                }
            }
        }
        Geometry::TwoD { .. } => {
            for t in 0..src.m1() {
                for s in 0..m2 {
                    let dst =
                        &mut out[(t * m2 + s) * tap_len..][..tap_len];
                    for s2 in 0..m2 {
                        let col = &corr[(s * m2 + s2) * sz..][..sz];
                        let a = src.cell(t, s2);
                        for w1 in 0..w_axis {
                            let row1 = &lags[w1 * w_axis..][..w_axis];
                            for w2 in 0..w_axis {
                                let row2 = &lags[w2 * w_axis..][..w_axis];
                                let mut acc = 0.0;
                                for (wp1, &v1) in row1.iter().enumerate() {
                                    for (wp2, &v2) in row2.iter().enumerate() {
                                        acc += col[v1 * m + v2]
                                            * a[wp1 * w_axis + wp2];
                                    }
                                }
                                dst[w1 * w_axis + w2] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Tap-space gradient of the penalty: for the matrix-space function
/// ||T^t T - I||_F^2 the gradient representative is 4 T (T^t T - I); pushed
/// down to taps it becomes a correlation of the bank against the folded
/// residual, times the cell multiplicity.
pub fn penalty_gradient(bank: &FilterBank) -> Vec<f64> {
    let sz = bank.geometry().cell_size();
    let r = folded_residual(bank);
    let mut g = correlate_with_table(bank, &r);
    let scale = 4.0 * sz as f64;
    for v in &mut g {
        *v *= scale;
    }
    g
}

/// Hessian-vector product of F_lambda(a) = cell ||a - a0||^2 + lambda P(a)
/// in tap coordinates. The quadratic term contributes 2 cell v; the penalty
/// contributes 4 cell (v * r + a * beta) with r the folded residual and
/// beta the symmetrized cross-correlation table of (v, a).
pub fn hvp_taps(bank: &FilterBank, dir: &FilterBank, lambda: f64) -> Vec<f64> {
    let sz = bank.geometry().cell_size() as f64;
    let m2 = bank.m2();
    let cell = bank.geometry().cell_size();
    let r = folded_residual(bank);
    let cross_va = dir.folded_cross_correlations(bank);
    let cross_av = bank.folded_cross_correlations(dir);
    let mut beta = cross_va;
    for (b, c) in beta.iter_mut().zip(cross_av.iter()) {
        *b += c;
    }
    debug_assert_eq!(beta.len(), m2 * m2 * cell);
    let conv_vr = correlate_with_table(dir, &r);
    let conv_ab = correlate_with_table(bank, &beta);
    dir.taps()
        .iter()
        .zip(conv_vr.iter().zip(conv_ab.iter()))
        .map(|(&v, (&vr, &ab))| 2.0 * sz * v + lambda * 4.0 * sz * (vr + ab))
        .collect()
}

/// Outcome of a filter projection run.
#[derive(Debug, Clone)]
pub struct ProjectionOutcome {
    /// The projected bank, in the caller's orientation.
    pub bank: FilterBank,
    /// Objective value after each accepted step, starting with the input's.
    pub f_history: Vec<f64>,
    /// ||T^t T - I||_F of the result (tall orientation).
    pub gram_residual: f64,
    pub iterations: usize,
    /// False when the run stopped on the iteration cap instead of the
    /// gradient test.
    pub converged: bool,
}

/// Drives a bank toward the orthogonality manifold while staying close to
/// the input, by minimizing
/// F_lambda(a) = ||T_a - T_a0||_F^2 + lambda ||T_a^t T_a - I||_F^2
/// with curvature-scaled gradient steps. The structured matrix is never
/// formed; everything runs on tap grids. Wide banks are projected through
/// their transpose, and the result is transposed back.
pub fn project_filters(
    bank: &FilterBank,
    lambda: f64,
    max_iters: usize,
) -> Result<ProjectionOutcome> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::validation(format!(
            "penalty weight must be positive and finite, got {lambda}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::validation("iteration cap must be at least 1"));
    }
    let wide = bank.m1() < bank.m2();
    let tall = if wide { bank.transpose() } else { bank.clone() };
    let out = project_tall(&tall, lambda, max_iters)?;
    Ok(ProjectionOutcome {
        bank: if wide { out.bank.transpose() } else { out.bank },
        ..out
    })
}

fn project_tall(
    anchor: &FilterBank,
    lambda: f64,
    max_iters: usize,
) -> Result<ProjectionOutcome> {
    let cell = anchor.geometry().cell_size() as f64;
    let sqrt_cell = cell.sqrt();
    let n_taps = anchor.taps().len();

    let f_of = |b: &FilterBank| -> f64 {
        let quad: f64 = b
            .taps()
            .iter()
            .zip(anchor.taps().iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        cell * quad + lambda * penalty_value(b)
    };
    let grad_of = |b: &FilterBank| -> Vec<f64> {
        let mut g = penalty_gradient(b);
        for ((g, &x), &y) in g.iter_mut().zip(b.taps().iter()).zip(anchor.taps()) {
            *g = lambda * *g + 2.0 * cell * (x - y);
        }
        g
    };

    let mut cur = anchor.clone();
    let mut f_cur = f_of(&cur);
    let mut history = vec![f_cur];
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..max_iters {
        let u = grad_of(&cur);
        let u_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if u_norm / sqrt_cell <= GRAD_TOL {
            converged = true;
            iterations = it;
            break;
        }
        // curvature along the gradient sets the step: step = |u| / |H u|
        let mut dir = cur.clone();
        dir.taps_mut().copy_from_slice(&u);
        let hu = hvp_taps(&cur, &dir, lambda);
        let hu_norm = hu.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rho = hu_norm.max(RHO_FLOOR);
        let mut step = u_norm / rho;

        // descent is guaranteed only for small steps; halve until F drops
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = cur.clone();
            {
                let taps = cand.taps_mut();
                for (w, (t, &g)) in taps.iter_mut().zip(u.iter()).enumerate() {
                    debug_assert!(w < n_taps);
                    *t -= step * g;
                }
            }
            let f_cand = f_of(&cand);
            if f_cand.is_finite() && f_cand < f_cur {
                cur = cand;
                f_cur = f_cand;
                history.push(f_cur);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations = it + 1;
        if !accepted {
            // no descent even at vanishing step: numerically stationary
            converged = true;
            break;
        }
    }
    if !converged && iterations == max_iters {
        let u = grad_of(&cur);
        let u_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        converged = u_norm / sqrt_cell <= GRAD_TOL;
    }

    let gram_residual = cur.gram_residual();
    Ok(ProjectionOutcome {
        bank: cur,
        f_history: history,
        gram_residual,
        iterations,
        converged,
    })
}
