//! Helpers shared by the integration suites. Each test binary compiles its
//! own copy and uses a subset, hence the allow.
#![allow(dead_code)]

use firmconv::algebra::{FilterBank, Geometry, Support};
use firmconv::dense::DenseMatrix;
use firmconv::network::{Activation, ActivationKind, Layer, Network};
use firmconv::rng::Rng;

pub fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v);
    v
}

/// Random bank with N(0, scale^2) taps.
pub fn rand_bank(
    geometry: Geometry,
    m1: usize,
    m2: usize,
    support: Support,
    scale: f64,
    seed: u64,
) -> FilterBank {
    let mut rng = Rng::new(seed);
    let mut bank = FilterBank::zeros(geometry, m1, m2, support).expect("bank shape");
    rng.fill_normal(bank.taps_mut());
    for t in bank.taps_mut() {
        *t *= scale;
    }
    bank
}

/// Chain of `k` layers on random orthogonal full-length banks: every layer
/// satisfies the structural guarantee up to the projector's tolerance.
pub fn on_manifold_net(
    k: usize,
    geometry: Geometry,
    m1: usize,
    m2: usize,
    kind: ActivationKind,
    alpha: f64,
    gamma: f64,
    seed: u64,
) -> Network {
    use firmconv::algebra::polar::PolarMethod;
    use firmconv::manifold::stiefel_project;
    let root = Rng::new(seed);
    let mut layers = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = root.stream(i as u64);
        let mut bank = FilterBank::zeros(geometry, m1, m2, Support::Full).expect("bank shape");
        rng.fill_normal(bank.taps_mut());
        let (point, _) = stiefel_project(&bank, PolarMethod::NewtonSchulz).expect("projection");
        let mut bias = vec![0.0; m1];
        rng.fill_normal(&mut bias);
        for b in &mut bias {
            *b *= 0.1;
        }
        let act = Activation::new(kind, alpha).expect("activation");
        layers.push(Layer::new(point.applied(), bias, act).expect("layer"));
    }
    Network::new(layers, gamma).expect("network")
}

/// Small window-limited net with random taps; off the manifold, useful for
/// gradient checks and plumbing tests.
pub fn window_net(
    k: usize,
    geometry: Geometry,
    m1: usize,
    m2: usize,
    l: usize,
    kind: ActivationKind,
    alpha: f64,
    gamma: f64,
    seed: u64,
) -> Network {
    let root = Rng::new(seed);
    let mut layers = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = root.stream(i as u64);
        let mut bank =
            FilterBank::zeros(geometry, m1, m2, Support::Window { l }).expect("bank shape");
        rng.fill_normal(bank.taps_mut());
        for t in bank.taps_mut() {
            *t *= 0.3;
        }
        let mut bias = vec![0.0; m1];
        rng.fill_normal(&mut bias);
        for b in &mut bias {
            *b *= 0.1;
        }
        let act = Activation::new(kind, alpha).expect("activation");
        layers.push(Layer::new(bank, bias, act).expect("layer"));
    }
    Network::new(layers, gamma).expect("network")
}

/// Dense materialization of the (non-circulant) Toeplitz truncation of a
/// windowed 1-d bank, built column by column from `toeplitz_apply`.
pub fn toeplitz_dense(bank: &FilterBank) -> DenseMatrix {
    let rows = bank.output_len();
    let cols = bank.input_len();
    let mut t = DenseMatrix::zeros(rows, cols);
    for c in 0..cols {
        let mut e = vec![0.0; cols];
        e[c] = 1.0;
        let col = bank.toeplitz_apply(&e).expect("windowed 1-d bank");
        for (r, &v) in col.iter().enumerate() {
            *t.at_mut(r, c) = v;
        }
    }
    t
}

/// Zeroes a dense matrix onto the block-Toeplitz window structure of `like`
/// by averaging each in-window diagonal and dropping everything else.
fn fold_to_toeplitz(w: &DenseMatrix, like: &FilterBank) -> FilterBank {
    let m = like.geometry().period();
    let l = match like.support() {
        Support::Window { l } => l,
        Support::Full => panic!("toeplitz folding needs a window"),
    };
    let mut bank = like.clone();
    for j in 0..like.m1() {
        for i in 0..like.m2() {
            let cell = bank.cell_mut(j, i);
            for (t, c) in cell.iter_mut().enumerate() {
                let k = t as isize - l as isize; // row p reads column p - k
                let mut acc = 0.0;
                let mut count = 0usize;
                for p in 0..m {
                    let q = p as isize - k;
                    if q >= 0 && (q as usize) < m {
                        acc += w.at(j * m + p, i * m + q as usize);
                        count += 1;
                    }
                }
                *c = acc / count as f64;
            }
        }
    }
    bank
}

/// Drives a windowed tall 1-d bank toward one whose dense Toeplitz
/// truncation is orthogonal: alternating projections between the orthogonal
/// matrices (polar factor) and the block-Toeplitz window structure, with a
/// gradient polish on ||T^t T - I||_F^2 once the alternation plateaus.
/// Returns the bank and its final Toeplitz orthogonality residual.
pub fn toeplitz_orthogonalize(bank0: &FilterBank, max_iters: usize) -> (FilterBank, f64) {
    use firmconv::algebra::polar::{polar_decompose, PolarMethod};
    assert!(bank0.m1() >= bank0.m2(), "orthogonality needs a tall bank");
    let mut bank = bank0.clone();
    let residual = |b: &FilterBank| toeplitz_dense(b).orthogonality_residual();

    for _ in 0..max_iters {
        let t = toeplitz_dense(&bank);
        let (q, _) = polar_decompose(&t, PolarMethod::NewtonSchulz).expect("full column rank");
        let next = fold_to_toeplitz(&q, &bank);
        let moved = max_abs_diff(next.taps(), bank.taps());
        bank = next;
        if residual(&bank) <= 1e-10 || moved <= 1e-14 {
            break;
        }
    }

    // polish: Levenberg-Marquardt on r(taps) = vec(T^t T - I), a
    // zero-residual least-squares system, so convergence is quadratic
    // once the alternation has delivered a good start.
    let m = bank.geometry().period();
    let l = match bank.support() {
        Support::Window { l } => l,
        Support::Full => unreachable!("constructed from a window"),
    };
    let tap_len = bank.tap_len();
    let n_taps = bank.taps().len();
    let (m1, m2) = (bank.m1(), bank.m2());
    let (out_len, in_len) = (bank.output_len(), bank.input_len());
    let basis_toeplitz = move |j: usize, i: usize, t_idx: usize| -> DenseMatrix {
        let mut e = DenseMatrix::zeros(out_len, in_len);
        let k = t_idx as isize - l as isize;
        for p in 0..m {
            let q = p as isize - k;
            if q >= 0 && (q as usize) < m {
                *e.at_mut(j * m + p, i * m + q as usize) = 1.0;
            }
        }
        e
    };
    let resid_vec = |b: &FilterBank| -> Vec<f64> {
        let t = toeplitz_dense(b);
        let mut g = t.transpose().matmul(&t).expect("shape");
        for d in 0..g.rows() {
            *g.at_mut(d, d) -= 1.0;
        }
        g.data().to_vec()
    };

    let mut r = resid_vec(&bank);
    let mut f_cur: f64 = r.iter().map(|v| v * v).sum();
    let mut mu = 1e-3;
    for _ in 0..200 {
        if f_cur <= 1e-20 {
            break;
        }
        let t = toeplitz_dense(&bank);
        let n_res = r.len();
        let mut jac = DenseMatrix::zeros(n_res, n_taps);
        for j in 0..m1 {
            for i in 0..m2 {
                for t_idx in 0..tap_len {
                    let w = (j * m2 + i) * tap_len + t_idx;
                    let half = basis_toeplitz(j, i, t_idx)
                        .transpose()
                        .matmul(&t)
                        .expect("shape");
                    // dG = E^t T + (E^t T)^t
                    for p in 0..half.rows() {
                        for q in 0..half.cols() {
                            *jac.at_mut(p * half.cols() + q, w) += half.at(p, q);
                            *jac.at_mut(q * half.cols() + p, w) += half.at(p, q);
                        }
                    }
                }
            }
        }
        let jt = jac.transpose();
        let jtj = jt.matmul(&jac).expect("shape");
        let jtr = jt.matvec(&r).expect("shape");
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for d in 0..n_taps {
                *a.at_mut(d, d) += mu;
            }
            let delta = a.lu().expect("positive definite").solve(&jtr);
            let mut cand = bank.clone();
            for (tap, d) in cand.taps_mut().iter_mut().zip(&delta) {
                *tap -= d;
            }
            let r_cand = resid_vec(&cand);
            let f_cand: f64 = r_cand.iter().map(|v| v * v).sum();
            if f_cand.is_finite() && f_cand < f_cur {
                bank = cand;
                r = r_cand;
                f_cur = f_cand;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }

    let r = residual(&bank);
    (bank, r)
}

/// Singular values by one-sided Jacobi, descending. Independent oracle for
/// orthogonality and spectral-norm claims: no LU, no DFT, no polar iteration.
pub fn jacobi_singular_values(a: &DenseMatrix) -> Vec<f64> {
    let rows = a.rows();
    let cols = a.cols();
    // work on the tall orientation so column rotations see full rank
    let (work_rows, work_cols, tall): (usize, usize, Vec<Vec<f64>>) = if rows >= cols {
        let mut cols_vec = vec![vec![0.0; rows]; cols];
        for (j, col) in cols_vec.iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = a.at(i, j);
            }
        }
        (rows, cols, cols_vec)
    } else {
        let mut cols_vec = vec![vec![0.0; cols]; rows];
        for (j, col) in cols_vec.iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = a.at(j, i);
            }
        }
        (cols, rows, cols_vec)
    };
    let _ = work_rows;
    let mut u = tall;
    let eps = 1e-14;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..work_cols {
            for q in (p + 1)..work_cols {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for i in 0..u[p].len() {
                    app += u[p][i] * u[p][i];
                    aqq += u[q][i] * u[q][i];
                    apq += u[p][i] * u[q][i];
                }
                off = off.max(apq.abs() / (app * aqq).sqrt().max(1e-300));
                if apq.abs() <= eps * (app * aqq).sqrt() {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..u[p].len() {
                    let vp = u[p][i];
                    let vq = u[q][i];
                    u[p][i] = c * vp - s * vq;
                    u[q][i] = s * vp + c * vq;
                }
            }
        }
        if off <= eps {
            break;
        }
    }
    let mut sv: Vec<f64> = u
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).expect("finite singular values"));
    sv
}
