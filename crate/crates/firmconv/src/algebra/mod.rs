//! Block-circulant filter algebra.
//!
//! The central object is a grid of periodic convolution filters acting as one
//! structured linear operator: `m1 x m2` blocks, each an `m x m` circulant
//! (or, in two dimensions, a doubly circulant operator on `m x m` images).
//! The operator is never materialized on hot paths; applications, adjoints,
//! Gram residuals, and tap-space gradients all run directly on the taps.
//!
//! Conventions, fixed once here and relied on everywhere:
//! - A filter is applied as periodic convolution: (a * x)_p = sum_k a_k
//!   x_{(p - k) mod m}. The circulant's first column holds c_{k mod m} = a_k.
//! - The operator maps channel-major concatenated signals: input has m2
//!   channels, output m1, each of cell size m (1D) or m*m (2D).
//! - The adjoint is itself a bank: the transposed grid with index-reversed
//!   taps.

pub mod polar;
pub mod spectral;

use crate::dense::DenseMatrix;
use crate::error::{ensure, Error, Result};
use serde::{Deserialize, Serialize};

/// Signal geometry a bank acts on. Two-dimensional banks act on square
/// periodic images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Geometry {
    OneD { m: usize },
    TwoD { m: usize },
}

impl Geometry {
    /// Number of samples in one channel.
    pub fn cell_size(&self) -> usize {
        match *self {
            Geometry::OneD { m } => m,
            Geometry::TwoD { m } => m * m,
        }
    }

    /// Period along each axis.
    pub fn period(&self) -> usize {
        match *self {
            Geometry::OneD { m } | Geometry::TwoD { m } => m,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            Geometry::OneD { .. } => 1,
            Geometry::TwoD { .. } => 2,
        }
    }
}

/// Tap support of a filter: a symmetric window of half-width `l`, or the full
/// first column of the circulant (one coefficient per period sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Support {
    Window { l: usize },
    Full,
}

impl Support {
    pub fn tap_len(&self, geometry: Geometry) -> usize {
        match (*self, geometry) {
            (Support::Window { l }, Geometry::OneD { .. }) => 2 * l + 1,
            (Support::Window { l }, Geometry::TwoD { .. }) => (2 * l + 1) * (2 * l + 1),
            (Support::Full, Geometry::OneD { m }) => m,
            (Support::Full, Geometry::TwoD { .. }) => {
                unreachable!("full-support two-dimensional banks are rejected at construction")
            }
        }
    }
}

/// A single filter: its support and tap coefficients.
///
/// Windowed taps are ordered by offset -l..=l; full-support taps are the
/// circulant's first column, offsets 0..m-1. Two-dimensional windows are
/// row-major over (-l..=l) x (-l..=l).
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub support: Support,
    pub taps: Vec<f64>,
}

/// Grid of filters acting as one block-circulant operator with `m1` output
/// and `m2` input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    geometry: Geometry,
    m1: usize,
    m2: usize,
    support: Support,
    /// Flat taps, layout [j in 0..m1][i in 0..m2][tap].
    taps: Vec<f64>,
}

impl FilterBank {
    pub fn new(
        geometry: Geometry,
        m1: usize,
        m2: usize,
        support: Support,
        taps: Vec<f64>,
    ) -> Result<Self> {
        ensure!(m1 >= 1 && m2 >= 1, "channel counts must be positive");
        ensure!(geometry.period() >= 1, "period must be positive");
        if let Support::Window { l } = support {
            ensure!(
                2 * l + 1 <= geometry.period(),
                "window 2l+1 = {} exceeds period {}",
                2 * l + 1,
                geometry.period()
            );
        }
        if matches!(geometry, Geometry::TwoD { .. }) {
            ensure!(
                matches!(support, Support::Window { .. }),
                "two-dimensional banks must use windowed taps"
            );
        }
        let tap_len = support.tap_len(geometry);
        ensure!(
            taps.len() == m1 * m2 * tap_len,
            "tap buffer has {} entries, expected {} (= {m1} x {m2} x {tap_len})",
            taps.len(),
            m1 * m2 * tap_len
        );
        Ok(FilterBank {
            geometry,
            m1,
            m2,
            support,
            taps,
        })
    }

    pub fn zeros(geometry: Geometry, m1: usize, m2: usize, support: Support) -> Result<Self> {
        let tap_len = support.tap_len(geometry);
        Self::new(geometry, m1, m2, support, vec![0.0; m1 * m2 * tap_len])
    }

    #[inline]
    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    #[inline]
    pub fn m1(&self) -> usize {
        self.m1
    }

    #[inline]
    pub fn m2(&self) -> usize {
        self.m2
    }

    #[inline]
    pub fn support(&self) -> Support {
        self.support
    }

    /// Window half-width; None for full-support banks.
    pub fn half_width(&self) -> Option<usize> {
        match self.support {
            Support::Window { l } => Some(l),
            Support::Full => None,
        }
    }

    #[inline]
    pub fn tap_len(&self) -> usize {
        self.support.tap_len(self.geometry)
    }

    /// Input dimension of the operator (m2 channels of one cell each).
    pub fn input_len(&self) -> usize {
        self.m2 * self.geometry.cell_size()
    }

    /// Output dimension of the operator.
    pub fn output_len(&self) -> usize {
        self.m1 * self.geometry.cell_size()
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [f64] {
        &mut self.taps
    }

    /// Taps of the block at output channel `j`, input channel `i`.
    pub fn cell(&self, j: usize, i: usize) -> &[f64] {
        let len = self.tap_len();
        let start = (j * self.m2 + i) * len;
        &self.taps[start..start + len]
    }

    pub fn cell_mut(&mut self, j: usize, i: usize) -> &mut [f64] {
        let len = self.tap_len();
        let start = (j * self.m2 + i) * len;
        &mut self.taps[start..start + len]
    }

    pub fn filter(&self, j: usize, i: usize) -> Filter {
        Filter {
            support: self.support,
            taps: self.cell(j, i).to_vec(),
        }
    }

    /// Normalized rotation amounts for each tap: tap index -> shift in
    /// [0, m). One axis; two-dimensional banks use it per axis.
    pub(crate) fn axis_shifts(&self) -> Vec<usize> {
        let m = self.geometry.period();
        match self.support {
            Support::Window { l } => (0..2 * l + 1)
                .map(|idx| {
                    let k = idx as isize - l as isize;
                    (k.rem_euclid(m as isize)) as usize
                })
                .collect(),
            Support::Full => (0..m).collect(),
        }
    }

    /// y = T x. `x` has `input_len()` entries, `y` gets `output_len()`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.input_len(), "apply: input length mismatch");
        assert_eq!(y.len(), self.output_len(), "apply: output length mismatch");
        y.fill(0.0);
        self.apply_accumulate(x, y);
    }

    /// y += T x, without clearing y first.
    pub fn apply_accumulate(&self, x: &[f64], y: &mut [f64]) {
        let sz = self.geometry.cell_size();
        match self.geometry {
            Geometry::OneD { m } => {
                let shifts = self.axis_shifts();
                for j in 0..self.m1 {
                    let yj = &mut y[j * sz..(j + 1) * sz];
                    for i in 0..self.m2 {
                        let xi = &x[i * sz..(i + 1) * sz];
                        let taps = self.cell(j, i);
                        for (t, &c) in taps.iter().enumerate() {
                            if c != 0.0 {
                                axpy_rot(yj, xi, c, shifts[t], m);
                            }
                        }
                    }
                }
            }
            Geometry::TwoD { m } => {
                let shifts = self.axis_shifts();
                let l_len = shifts.len();
                for j in 0..self.m1 {
                    let yj = &mut y[j * sz..(j + 1) * sz];
                    for i in 0..self.m2 {
                        let xi = &x[i * sz..(i + 1) * sz];
                        let taps = self.cell(j, i);
                        for t1 in 0..l_len {
                            let s1 = shifts[t1];
                            for t2 in 0..l_len {
                                let c = taps[t1 * l_len + t2];
                                if c == 0.0 {
                                    continue;
                                }
                                let s2 = shifts[t2];
                                // row p1 of the output reads row (p1 - k1) mod m
                                for p1 in 0..m {
                                    let src = (p1 + m - s1) % m;
                                    axpy_rot(
                                        &mut yj[p1 * m..(p1 + 1) * m],
                                        &xi[src * m..(src + 1) * m],
                                        c,
                                        s2,
                                        m,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.output_len()];
        self.apply(x, &mut y);
        y
    }

    /// x = T^T y, the adjoint application.
    pub fn apply_adjoint(&self, y: &[f64], x: &mut [f64]) {
        assert_eq!(y.len(), self.output_len(), "adjoint: input length mismatch");
        assert_eq!(x.len(), self.input_len(), "adjoint: output length mismatch");
        x.fill(0.0);
        self.apply_adjoint_accumulate(y, x);
    }

    /// x += T^T y.
    pub fn apply_adjoint_accumulate(&self, y: &[f64], x: &mut [f64]) {
        let sz = self.geometry.cell_size();
        match self.geometry {
            Geometry::OneD { m } => {
                let shifts = self.axis_shifts();
                for i in 0..self.m2 {
                    let xi = &mut x[i * sz..(i + 1) * sz];
                    for j in 0..self.m1 {
                        let yj = &y[j * sz..(j + 1) * sz];
                        let taps = self.cell(j, i);
                        for (t, &c) in taps.iter().enumerate() {
                            if c != 0.0 {
                                // adjoint of rotation by s is rotation by -s
                                axpy_rot(xi, yj, c, (m - shifts[t]) % m, m);
                            }
                        }
                    }
                }
            }
            Geometry::TwoD { m } => {
                let shifts = self.axis_shifts();
                let l_len = shifts.len();
                for i in 0..self.m2 {
                    let xi = &mut x[i * sz..(i + 1) * sz];
                    for j in 0..self.m1 {
                        let yj = &y[j * sz..(j + 1) * sz];
                        let taps = self.cell(j, i);
                        for t1 in 0..l_len {
                            let s1 = (m - shifts[t1]) % m;
                            for t2 in 0..l_len {
                                let c = taps[t1 * l_len + t2];
                                if c == 0.0 {
                                    continue;
                                }
                                let s2 = (m - shifts[t2]) % m;
                                for p1 in 0..m {
                                    let src = (p1 + m - s1) % m;
                                    axpy_rot(
                                        &mut xi[p1 * m..(p1 + 1) * m],
                                        &yj[src * m..(src + 1) * m],
                                        c,
                                        s2,
                                        m,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn apply_adjoint_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.input_len()];
        self.apply_adjoint(y, &mut x);
        x
    }

    /// Tap-space gradient contraction: given `hidden` (a vector on the output
    /// side) and `input` (on the input side), accumulates into `out` the
    /// per-tap sums d/da_k <hidden, T input> = sum_p hidden_j[p] *
    /// input_i[(p - k) mod m]. `out` is laid out like `taps`.
    pub fn tap_correlation_accumulate(&self, hidden: &[f64], input: &[f64], out: &mut [f64]) {
        assert_eq!(hidden.len(), self.output_len());
        assert_eq!(input.len(), self.input_len());
        assert_eq!(out.len(), self.taps.len());
        let sz = self.geometry.cell_size();
        let tap_len = self.tap_len();
        match self.geometry {
            Geometry::OneD { m } => {
                let shifts = self.axis_shifts();
                for j in 0..self.m1 {
                    let hj = &hidden[j * sz..(j + 1) * sz];
                    for i in 0..self.m2 {
                        let xi = &input[i * sz..(i + 1) * sz];
                        let cell = &mut out[(j * self.m2 + i) * tap_len..][..tap_len];
                        for (t, o) in cell.iter_mut().enumerate() {
                            *o += dot_rot(hj, xi, shifts[t], m);
                        }
                    }
                }
            }
            Geometry::TwoD { m } => {
                let shifts = self.axis_shifts();
                let l_len = shifts.len();
                for j in 0..self.m1 {
                    let hj = &hidden[j * sz..(j + 1) * sz];
                    for i in 0..self.m2 {
                        let xi = &input[i * sz..(i + 1) * sz];
                        let cell = &mut out[(j * self.m2 + i) * tap_len..][..tap_len];
                        for t1 in 0..l_len {
                            let s1 = shifts[t1];
                            for t2 in 0..l_len {
                                let s2 = shifts[t2];
                                let mut acc = 0.0;
                                for p1 in 0..m {
                                    let src = (p1 + m - s1) % m;
                                    acc += dot_rot(
                                        &hj[p1 * m..(p1 + 1) * m],
                                        &xi[src * m..(src + 1) * m],
                                        s2,
                                        m,
                                    );
                                }
                                cell[t1 * l_len + t2] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    /// The adjoint operator as a bank: transposed grid, index-reversed taps.
    pub fn transpose(&self) -> FilterBank {
        let tap_len = self.tap_len();
        let mut out = FilterBank::zeros(self.geometry, self.m2, self.m1, self.support)
            .expect("geometry already validated");
        for j in 0..self.m1 {
            for i in 0..self.m2 {
                let src = self.cell(j, i);
                let dst = out.cell_mut(i, j);
                match (self.support, self.geometry) {
                    (Support::Window { .. }, Geometry::OneD { .. }) => {
                        for (t, d) in dst.iter_mut().enumerate() {
                            *d = src[tap_len - 1 - t];
                        }
                    }
                    (Support::Window { l }, Geometry::TwoD { .. }) => {
                        let w = 2 * l + 1;
                        for t1 in 0..w {
                            for t2 in 0..w {
                                dst[t1 * w + t2] = src[(w - 1 - t1) * w + (w - 1 - t2)];
                            }
                        }
                    }
                    (Support::Full, Geometry::OneD { m }) => {
                        for (t, d) in dst.iter_mut().enumerate() {
                            *d = src[(m - t) % m];
                        }
                    }
                    (Support::Full, Geometry::TwoD { .. }) => unreachable!(),
                }
            }
        }
        out
    }

    /// Folded self-correlations of the filter grid: for each input-channel
    /// pair (s1, s2), the length-m vector
    /// alpha_bar[v] = sum_t sum_{k - k' == v (mod m)} a^{(t,s1)}_k a^{(t,s2)}_{k'}.
    /// This is exactly the first column of block (s1, s2) of T^T T. Layout:
    /// [(s1 * m2 + s2) * cell_size + v]. For two-dimensional banks v ranges
    /// over the m x m lag grid.
    pub(crate) fn folded_correlations(&self) -> Vec<f64> {
        self.folded_cross_correlations(self)
    }

    /// Mixed version over two banks of identical shape: the first column of
    /// block (s1, s2) of A^T B, same layout as
    /// [`FilterBank::folded_correlations`].
    pub(crate) fn folded_cross_correlations(&self, other: &FilterBank) -> Vec<f64> {
        debug_assert_eq!(self.geometry, other.geometry);
        debug_assert_eq!((self.m1, self.m2), (other.m1, other.m2));
        debug_assert_eq!(self.support, other.support);
        let sz = self.geometry.cell_size();
        let m = self.geometry.period();
        let tap_len = self.tap_len();
        let mut out = vec![0.0; self.m2 * self.m2 * sz];
        let shifts = self.axis_shifts();
        let lags = lag_table(&shifts, m);
        let w = shifts.len();
        match self.geometry {
            Geometry::OneD { .. } => {
                for s1 in 0..self.m2 {
                    for s2 in 0..self.m2 {
                        let dst = &mut out[(s1 * self.m2 + s2) * sz..][..sz];
                        for t in 0..self.m1 {
                            let a = self.cell(t, s1);
                            let b = other.cell(t, s2);
                            for k in 0..tap_len {
                                let ak = a[k];
                                if ak == 0.0 {
                                    continue;
                                }
                                let row = &lags[k * w..][..w];
                                for (kp, &v) in row.iter().enumerate() {
                                    dst[v] += ak * b[kp];
                                }
                            }
                        }
                    }
                }
            }
            Geometry::TwoD { .. } => {
                for s1 in 0..self.m2 {
                    for s2 in 0..self.m2 {
                        let dst = &mut out[(s1 * self.m2 + s2) * sz..][..sz];
                        for t in 0..self.m1 {
                            let a = self.cell(t, s1);
                            let b = other.cell(t, s2);
                            for k1 in 0..w {
                                let row1 = &lags[k1 * w..][..w];
                                for k2 in 0..w {
                                    let ak = a[k1 * w + k2];
                                    if ak == 0.0 {
                                        continue;
                                    }
                                    let row2 = &lags[k2 * w..][..w];
                                    for (kp1, &v1) in row1.iter().enumerate() {
                                        for (kp2, &v2) in row2.iter().enumerate() {
                                            dst[v1 * m + v2] += ak * b[kp1 * w + kp2];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// ||T^T T - I||_F computed from the taps alone. Each block of T^T T is
    /// circulant, so its Frobenius norm is sqrt(cell_size) times the norm of
    /// its first column.
    pub fn gram_residual(&self) -> f64 {
        let sz = self.geometry.cell_size();
        let folded = self.folded_correlations();
        let mut acc = 0.0;
        for s1 in 0..self.m2 {
            for s2 in 0..self.m2 {
                let col = &folded[(s1 * self.m2 + s2) * sz..][..sz];
                for (v, &c) in col.iter().enumerate() {
                    let target = if s1 == s2 && v == 0 { 1.0 } else { 0.0 };
                    let r = c - target;
                    acc += r * r;
                }
            }
        }
        (sz as f64 * acc).sqrt()
    }

    /// Unfolded orthogonality residual over the tap-limited lag range: the
    /// root sum of squares of alpha_u^{(s1,s2)} - delta_{s1,s2} delta_{u,0}
    /// for u = 0..2l (and the 2D lag window for image banks). Valid only when
    /// the period is at least 4l+1, where lag aliasing cannot occur.
    pub fn filter_orthogonality_residual(&self) -> Result<f64> {
        let l = match self.support {
            Support::Window { l } => l,
            Support::Full => {
                return Err(Error::validation(
                    "orthogonality residual over tap lags needs a windowed bank",
                ))
            }
        };
        let m = self.geometry.period();
        ensure!(
            m >= 4 * l + 1,
            "period {m} is too short for half-width {l}: need m >= 4l+1 = {}",
            4 * l + 1
        );
        let alphas = self.lag_correlations();
        Ok(alphas
            .residual_sq(self.m2)
            .sqrt())
    }

    /// Unfolded lag correlations alpha_u for u in the symmetric lag window.
    pub(crate) fn lag_correlations(&self) -> LagCorrelations {
        let l = match self.support {
            Support::Window { l } => l,
            Support::Full => unreachable!("lag correlations are only defined for windows"),
        };
        let span = 4 * l + 1; // lags -2l..=2l
        match self.geometry {
            Geometry::OneD { .. } => {
                let tap_len = 2 * l + 1;
                let mut data = vec![0.0; self.m2 * self.m2 * span];
                for s1 in 0..self.m2 {
                    for s2 in 0..self.m2 {
                        let dst = &mut data[(s1 * self.m2 + s2) * span..][..span];
                        for t in 0..self.m1 {
                            let a = self.cell(t, s1);
                            let b = self.cell(t, s2);
                            for k in 0..tap_len {
                                let ak = a[k];
                                if ak == 0.0 {
                                    continue;
                                }
                                for kp in 0..tap_len {
                                    // lag u = k - k', stored at u + 2l
                                    dst[k + 2 * l - kp] += ak * b[kp];
                                }
                            }
                        }
                    }
                }
                LagCorrelations {
                    span,
                    two_d: false,
                    data,
                }
            }
            Geometry::TwoD { .. } => {
                let w = 2 * l + 1;
                let mut data = vec![0.0; self.m2 * self.m2 * span * span];
                for s1 in 0..self.m2 {
                    for s2 in 0..self.m2 {
                        let dst = &mut data[(s1 * self.m2 + s2) * span * span..][..span * span];
                        for t in 0..self.m1 {
                            let a = self.cell(t, s1);
                            let b = self.cell(t, s2);
                            for k1 in 0..w {
                                for k2 in 0..w {
                                    let ak = a[k1 * w + k2];
                                    if ak == 0.0 {
                                        continue;
                                    }
                                    for kp1 in 0..w {
                                        let u1 = k1 + 2 * l - kp1;
                                        for kp2 in 0..w {
                                            let u2 = k2 + 2 * l - kp2;
                                            dst[u1 * span + u2] += ak * b[kp1 * w + kp2];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                LagCorrelations {
                    span,
                    two_d: true,
                    data,
                }
            }
        }
    }

    /// Banded Toeplitz application with zero padding at the boundaries
    /// (no wrap-around). Windowed banks only.
    pub fn toeplitz_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let l = match self.support {
            Support::Window { l } => l,
            Support::Full => {
                return Err(Error::validation(
                    "toeplitz application needs a windowed bank",
                ))
            }
        };
        ensure!(
            matches!(self.geometry, Geometry::OneD { .. }),
            "toeplitz application is one-dimensional"
        );
        let m = self.geometry.period();
        ensure!(
            x.len() == self.input_len(),
            "toeplitz: input length {} does not match {}",
            x.len(),
            self.input_len()
        );
        let mut y = vec![0.0; self.output_len()];
        for j in 0..self.m1 {
            let yj = &mut y[j * m..(j + 1) * m];
            for i in 0..self.m2 {
                let xi = &x[i * m..(i + 1) * m];
                let taps = self.cell(j, i);
                for (t, &c) in taps.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let k = t as isize - l as isize;
                    // y[p] += c * x[p - k] restricted to valid indices
                    if k >= 0 {
                        let k = k as usize;
                        for p in k..m {
                            yj[p] += c * xi[p - k];
                        }
                    } else {
                        let s = (-k) as usize;
                        for p in 0..m - s {
                            yj[p] += c * xi[p + s];
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Materializes the operator as a dense matrix. Guarded: refuses anything
    /// bigger than 4e6 entries, since dense form exists only for oracles and
    /// small problems.
    pub fn to_dense(&self) -> Result<DenseMatrix> {
        let n = self.output_len();
        let d = self.input_len();
        ensure!(
            (n as u64) * (d as u64) <= 4_000_000,
            "dense materialization of a {n}x{d} operator exceeds the 4e6-entry cap"
        );
        let mut dense = DenseMatrix::zeros(n, d);
        let mut basis = vec![0.0; d];
        let mut col = vec![0.0; n];
        for c in 0..d {
            basis[c] = 1.0;
            self.apply(&basis, &mut col);
            basis[c] = 0.0;
            for r in 0..n {
                *dense.at_mut(r, c) = col[r];
            }
        }
        Ok(dense)
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.taps.iter_mut() {
            *t *= c;
        }
    }
}

/// Unfolded lag correlations of a windowed bank, lags -2l..=2l per axis.
pub(crate) struct LagCorrelations {
    span: usize, // 4l+1
    two_d: bool,
    /// [(s1 * m2 + s2) * span^dims + lag-index]
    data: Vec<f64>,
}

impl LagCorrelations {
    /// Center index (lag 0 per axis).
    fn center(&self) -> usize {
        let c = (self.span - 1) / 2;
        if self.two_d {
            c * self.span + c
        } else {
            c
        }
    }

    fn block_len(&self) -> usize {
        if self.two_d {
            self.span * self.span
        } else {
            self.span
        }
    }

    pub fn block(&self, s1: usize, s2: usize, m2: usize) -> &[f64] {
        let len = self.block_len();
        &self.data[(s1 * m2 + s2) * len..][..len]
    }

    /// Sum over channel pairs and the nonnegative lag half-space of
    /// (alpha - delta)^2. By the symmetry alpha_{-u}^{(s1,s2)} =
    /// alpha_u^{(s2,s1)}, the half-space captures every independent entry.
    pub fn residual_sq(&self, m2: usize) -> f64 {
        let len = self.block_len();
        let center = self.center();
        let mut acc = 0.0;
        for s1 in 0..m2 {
            for s2 in 0..m2 {
                let block = self.block(s1, s2, m2);
                for u in center..len {
                    let target = if s1 == s2 && u == center { 1.0 } else { 0.0 };
                    let r = block[u] - target;
                    acc += r * r;
                }
            }
        }
        acc
    }
}

/// Single-filter periodic convolution: y_p = sum_k a_k x_{(p-k) mod m}.
pub fn circ_apply(filter: &Filter, x: &[f64]) -> Result<Vec<f64>> {
    let m = x.len();
    ensure!(m >= 1, "empty signal");
    let bank = FilterBank::new(Geometry::OneD { m }, 1, 1, filter.support, filter.taps.clone())?;
    Ok(bank.apply_vec(x))
}

/// Projects a filter onto the exactly orthogonal single-channel filters,
/// which are precisely the signed unit taps: the largest-magnitude tap wins,
/// keeping its sign. An all-zero filter has no nearest unit tap.
pub fn unit_filter_project(filter: &Filter) -> Result<Filter> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, &a) in filter.taps.iter().enumerate() {
        if a != 0.0 {
            let better = match best {
                None => true,
                Some((_, b)) => a.abs() > b.abs(),
            };
            if better {
                best = Some((idx, a));
            }
        }
    }
    let (idx, val) = best.ok_or_else(|| {
        Error::validation("zero filter: projection onto unit taps is ambiguous")
    })?;
    let mut taps = vec![0.0; filter.taps.len()];
    taps[idx] = val.signum();
    Ok(Filter {
        support: filter.support,
        taps,
    })
}

/// y += c * rot_s(x) where rot_s(x)[p] = x[(p - s) mod m], s in [0, m).
#[inline]
fn axpy_rot(y: &mut [f64], x: &[f64], c: f64, s: usize, m: usize) {
    debug_assert_eq!(y.len(), m);
    debug_assert_eq!(x.len(), m);
    debug_assert!(s < m);
    let (y_head, y_tail) = y.split_at_mut(s);
    // y[s..] += c * x[..m-s]
    for (o, &v) in y_tail.iter_mut().zip(&x[..m - s]) {
        *o = v.mul_add(c, *o);
    }
    // y[..s] += c * x[m-s..]
    for (o, &v) in y_head.iter_mut().zip(&x[m - s..]) {
        *o = v.mul_add(c, *o);
    }
}

/// Pairwise circular lags (s_k - s_kp) mod m for a shift list, row-major.
/// Hoists the modulo out of correlation inner loops.
pub(crate) fn lag_table(shifts: &[usize], m: usize) -> Vec<usize> {
    let w = shifts.len();
    let mut lags = vec![0usize; w * w];
    for k in 0..w {
        for kp in 0..w {
            lags[k * w + kp] = (shifts[k] + m - shifts[kp]) % m;
        }
    }
    lags
}

/// Dot product with four running sums so the reduction vectorizes; a single
/// accumulator serializes on the add latency and runs a few times slower.
/// The summation order is fixed, so results stay run-to-run deterministic.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    for (pa, pb) in ca.zip(cb) {
        acc[0] = pa[0].mul_add(pb[0], acc[0]);
        acc[1] = pa[1].mul_add(pb[1], acc[1]);
        acc[2] = pa[2].mul_add(pb[2], acc[2]);
        acc[3] = pa[3].mul_add(pb[3], acc[3]);
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// sum_p u[p] * x[(p - s) mod m].
#[inline]
fn dot_rot(u: &[f64], x: &[f64], s: usize, m: usize) -> f64 {
    debug_assert_eq!(u.len(), m);
    debug_assert_eq!(x.len(), m);
    debug_assert!(s < m);
    dot4(&u[s..], &x[..m - s]) + dot4(&u[..s], &x[m - s..])
}

/// On-disk form of a filter bank.
///
/// `l` is the window half-width; null means full support, in which case each
/// tap array carries the circulant's first column (length m). `d` is 2 for
/// image banks. Filters are row-major: index j * m2 + i.
#[derive(Debug, Serialize, Deserialize)]
pub struct BankJson {
    pub m: usize,
    pub m1: usize,
    pub m2: usize,
    pub l: Option<usize>,
    #[serde(default = "default_dims", skip_serializing_if = "is_one")]
    pub d: usize,
    pub filters: Vec<Vec<f64>>,
}

fn default_dims() -> usize {
    1
}

#[allow(clippy::trivially_copy_pass_by_ref)]
fn is_one(d: &usize) -> bool {
    *d == 1
}

impl FilterBank {
    pub fn to_json(&self) -> BankJson {
        let tap_len = self.tap_len();
        let filters = (0..self.m1 * self.m2)
            .map(|idx| self.taps[idx * tap_len..(idx + 1) * tap_len].to_vec())
            .collect();
        BankJson {
            m: self.geometry.period(),
            m1: self.m1,
            m2: self.m2,
            l: self.half_width(),
            d: self.geometry.dims(),
            filters,
        }
    }

    pub fn from_json(json: &BankJson) -> Result<Self> {
        let geometry = match json.d {
            1 => Geometry::OneD { m: json.m },
            2 => Geometry::TwoD { m: json.m },
            other => return Err(Error::validation(format!("unsupported dimension {other}"))),
        };
        let support = match json.l {
            Some(l) => Support::Window { l },
            None => Support::Full,
        };
        let tap_len = support.tap_len(geometry);
        ensure!(
            json.filters.len() == json.m1 * json.m2,
            "bank lists {} filters, expected {}",
            json.filters.len(),
            json.m1 * json.m2
        );
        for (idx, f) in json.filters.iter().enumerate() {
            ensure!(
                f.len() == tap_len,
                "filter {idx} has {} taps, expected {tap_len}",
                f.len()
            );
        }
        FilterBank::new(geometry, json.m1, json.m2, support, json.filters.concat())
    }
}
