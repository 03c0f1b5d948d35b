//! Dense row-major matrices, real and complex.
//!
//! This is deliberately small: the structured (block-circulant) operators in
//! this crate never materialize as dense matrices on hot paths. Dense algebra
//! exists for the explicit-matrix API surface (polar decomposition, Cayley
//! retraction oracles, small per-frequency blocks) and for tests.

use crate::error::{ensure, Error, Result};
use num_complex::Complex64;

/// Condition-number threshold above which linear solves emit a warning.
const COND_WARN: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        ensure!(cols > 0, "matrix needs at least one column");
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "ragged rows: expected {cols} columns"
        );
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        ensure!(
            self.cols == other.rows,
            "matmul shape mismatch: {}x{} times {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.cols,
            "matvec length mismatch: {} vs {} columns",
            x.len(),
            self.cols
        );
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(y)
    }

    /// y = A^T x without forming the transpose.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.rows,
            "matvec_t length mismatch: {} vs {} rows",
            x.len(),
            self.rows
        );
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let xi = x[i];
            for (o, &a) in y.iter_mut().zip(row) {
                *o += xi * a;
            }
        }
        Ok(y)
    }

    pub fn add_scaled(&mut self, other: &DenseMatrix, c: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// ||A - B||_F, shapes must match.
    pub fn frob_dist(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// ||A^T A - I||_F, the distance from having orthonormal columns.
    pub fn orthogonality_residual(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.cols {
            for j in 0..self.cols {
                let mut dot = 0.0;
                for k in 0..self.rows {
                    dot += self.data[k * self.cols + i] * self.data[k * self.cols + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                acc += (dot - target) * (dot - target);
            }
        }
        acc.sqrt()
    }

    /// Partial-pivot LU factorization. Fails on exact singularity.
    pub fn lu(&self) -> Result<Lu> {
        ensure!(
            self.rows == self.cols,
            "LU needs a square matrix, got {}x{}",
            self.rows,
            self.cols
        );
        let n = self.rows;
        let mut a = self.data.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].abs();
            for i in k + 1..n {
                let v = a[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(Error::numerical(format!(
                    "LU pivot {k} is exactly zero: matrix is singular"
                )));
            }
            if p != k {
                piv.swap(k, p);
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
            }
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let m = a[i * n + k] / pivot;
                a[i * n + k] = m;
                for j in k + 1..n {
                    a[i * n + j] -= m * a[k * n + j];
                }
            }
        }
        let lu = Lu {
            n,
            data: a,
            piv,
        };
        let cond = lu.condition_estimate();
        if cond > COND_WARN {
            eprintln!(
                "warning: linear solve is ill-conditioned (diagonal-ratio estimate {cond:.3e})"
            );
        }
        Ok(lu)
    }

    /// Solve A X = B for X with one factorization.
    pub fn solve_mat(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        ensure!(
            b.rows == self.rows,
            "solve shape mismatch: {} rows vs {}",
            b.rows,
            self.rows
        );
        let lu = self.lu()?;
        let mut out = DenseMatrix::zeros(b.rows, b.cols);
        let mut col = vec![0.0; b.rows];
        for j in 0..b.cols {
            for i in 0..b.rows {
                col[i] = b.at(i, j);
            }
            let x = lu.solve(&col);
            for i in 0..b.rows {
                *out.at_mut(i, j) = x[i];
            }
        }
        Ok(out)
    }

    /// Largest singular value by power iteration on A^T A. Deterministic start.
    pub fn spectral_norm_estimate(&self, iters: usize) -> f64 {
        let mut rng = crate::rng::Rng::new(0x5eed_0f57);
        let mut v: Vec<f64> = (0..self.cols).map(|_| rng.normal()).collect();
        let norm = |v: &mut Vec<f64>| {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 0.0 {
                for a in v.iter_mut() {
                    *a /= n;
                }
            }
            n
        };
        norm(&mut v);
        let mut sigma = 0.0;
        for _ in 0..iters {
            let av = self.matvec(&v).expect("shape checked");
            let mut atav = self.matvec_t(&av).expect("shape checked");
            let lambda = norm(&mut atav);
            sigma = lambda.sqrt();
            v = atav;
        }
        sigma
    }
}

/// LU factors with the pivot permutation.
pub struct Lu {
    n: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
}

impl Lu {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.data[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.data[i * n + j] * x[j];
            }
            x[i] = s / self.data[i * n + i];
        }
        x
    }

    /// Crude condition estimate: ratio of extreme |U_ii|. Cheap and good
    /// enough to flag solves that deserve distrust.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..n {
            let d = self.data[i * n + i].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// Complex dense matrix, row-major. Used for the per-frequency blocks of
/// block-circulant operators; these stay small (channel count squared).
#[derive(Debug, Clone)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![Complex64::ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Complex64::ONE;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }

    pub fn adjoint(&self) -> CMatrix {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j].conj();
            }
        }
        t
    }

    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, other.rows, "complex matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == Complex64::ZERO {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &CMatrix, c: Complex64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: Complex64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn frob_dist(&self, other: &CMatrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// ||A^* A - I||_F.
    pub fn orthogonality_residual(&self) -> f64 {
        let gram = self.adjoint().matmul(self);
        let mut acc = 0.0;
        for i in 0..self.cols {
            for j in 0..self.cols {
                let target = if i == j { Complex64::ONE } else { Complex64::ZERO };
                acc += (gram.at(i, j) - target).norm_sqr();
            }
        }
        acc.sqrt()
    }

    /// Solve A X = B by partial-pivot LU. Fails on exact singularity.
    pub fn solve_mat(&self, b: &CMatrix) -> Result<CMatrix> {
        ensure!(self.rows == self.cols, "complex solve needs a square matrix");
        ensure!(b.rows == self.rows, "complex solve shape mismatch");
        let n = self.rows;
        let mut a = self.data.clone();
        let mut x = b.clone();
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].norm_sqr();
            for i in k + 1..n {
                let v = a[i * n + k].norm_sqr();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(Error::numerical(format!(
                    "complex LU pivot {k} is exactly zero: matrix is singular"
                )));
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                for j in 0..x.cols {
                    x.data.swap(k * x.cols + j, p * x.cols + j);
                }
            }
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let m = a[i * n + k] / pivot;
                a[i * n + k] = m;
                for j in k + 1..n {
                    let akj = a[k * n + j];
                    a[i * n + j] -= m * akj;
                }
                for j in 0..x.cols {
                    let xkj = x.data[k * x.cols + j];
                    x.data[i * x.cols + j] -= m * xkj;
                }
            }
        }
        for i in (0..n).rev() {
            for j in 0..x.cols {
                let mut s = x.data[i * x.cols + j];
                for k in i + 1..n {
                    s -= a[i * n + k] * x.data[k * x.cols + j];
                }
                x.data[i * x.cols + j] = s / a[i * n + i];
            }
        }
        Ok(x)
    }

    /// Largest singular value by power iteration on A^* A.
    pub fn spectral_norm_estimate(&self, iters: usize) -> f64 {
        let mut rng = crate::rng::Rng::new(0x5eed_0f57);
        let mut v: Vec<Complex64> = (0..self.cols)
            .map(|_| Complex64::new(rng.normal(), rng.normal()))
            .collect();
        let normalize = |v: &mut Vec<Complex64>| -> f64 {
            let n = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            if n > 0.0 {
                for a in v.iter_mut() {
                    *a /= n;
                }
            }
            n
        };
        normalize(&mut v);
        let mut sigma = 0.0;
        for _ in 0..iters {
            // w = A v, u = A^* w
            let mut w = vec![Complex64::ZERO; self.rows];
            for i in 0..self.rows {
                let mut s = Complex64::ZERO;
                for j in 0..self.cols {
                    s += self.data[i * self.cols + j] * v[j];
                }
                w[i] = s;
            }
            let mut u = vec![Complex64::ZERO; self.cols];
            for i in 0..self.rows {
                let wi = w[i];
                for j in 0..self.cols {
                    u[j] += self.data[i * self.cols + j].conj() * wi;
                }
            }
            let lambda = normalize(&mut u);
            sigma = lambda.sqrt();
            v = u;
        }
        sigma
    }
}
