//! Frequency-domain form of block-circulant operators.
//!
//! A circulant factors as F* diag(lambda) F, so an m1 x m2 grid of circulants
//! factors into m independent m1 x m2 complex blocks, one per frequency:
//! block f holds entry (j, i) = sum_k a^{(j,i)}_k exp(-2 pi i f k / m).
//! Real taps make the blocks conjugate-symmetric across frequencies,
//! blocks[m - f] = conj(blocks[f]); the inverse direction validates that
//! symmetry before synthesizing taps.

use super::{FilterBank, Geometry, Support};
use crate::dense::CMatrix;
use crate::dft::Dft;
use crate::error::{ensure, Error, Result};
use num_complex::Complex64;

/// Per-frequency blocks of a one-dimensional block-circulant operator.
#[derive(Debug, Clone)]
pub struct SpectralBlocks {
    m: usize,
    m1: usize,
    m2: usize,
    blocks: Vec<CMatrix>,
}

impl SpectralBlocks {
    pub fn new(m: usize, m1: usize, m2: usize, blocks: Vec<CMatrix>) -> Result<Self> {
        ensure!(blocks.len() == m, "need one block per frequency");
        for b in &blocks {
            ensure!(
                b.rows() == m1 && b.cols() == m2,
                "spectral block shape mismatch: {}x{}, expected {m1}x{m2}",
                b.rows(),
                b.cols()
            );
        }
        Ok(SpectralBlocks { m, m1, m2, blocks })
    }

    pub fn period(&self) -> usize {
        self.m
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    pub fn block(&self, f: usize) -> &CMatrix {
        &self.blocks[f]
    }

    pub fn block_mut(&mut self, f: usize) -> &mut CMatrix {
        &mut self.blocks[f]
    }

    pub fn blocks(&self) -> &[CMatrix] {
        &self.blocks
    }

    /// Largest deviation from conjugate symmetry across mirrored frequencies.
    pub fn conjugate_symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for f in 0..self.m {
            let mirror = (self.m - f) % self.m;
            let a = &self.blocks[f];
            let b = &self.blocks[mirror];
            for j in 0..self.m1 {
                for i in 0..self.m2 {
                    let d = (a.at(j, i) - b.at(j, i).conj()).norm();
                    if d > worst {
                        worst = d;
                    }
                }
            }
        }
        worst
    }

    /// Per-frequency adjoint: the spectral form of the transposed bank.
    pub fn adjoint(&self) -> SpectralBlocks {
        SpectralBlocks {
            m: self.m,
            m1: self.m2,
            m2: self.m1,
            blocks: self.blocks.iter().map(|b| b.adjoint()).collect(),
        }
    }

    /// Per-frequency product self * other.
    pub fn matmul(&self, other: &SpectralBlocks) -> SpectralBlocks {
        assert_eq!(self.m, other.m, "spectral product period mismatch");
        assert_eq!(self.m2, other.m1, "spectral product shape mismatch");
        SpectralBlocks {
            m: self.m,
            m1: self.m1,
            m2: other.m2,
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a.matmul(b))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &SpectralBlocks, c: Complex64) {
        assert_eq!(self.m, other.m);
        assert_eq!(self.m1, other.m1);
        assert_eq!(self.m2, other.m2);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_scaled(b, c);
        }
    }

    pub fn scale(&mut self, c: Complex64) {
        for b in self.blocks.iter_mut() {
            b.scale(c);
        }
    }

    /// Frobenius norm of the full operator: sqrt(sum_f ||block_f||_F^2).
    pub fn frob_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let n = b.frob_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Eigen-decomposes a one-dimensional bank into per-frequency blocks.
pub fn spectral(bank: &FilterBank) -> Result<SpectralBlocks> {
    let m = match bank.geometry() {
        Geometry::OneD { m } => m,
        Geometry::TwoD { .. } => {
            return Err(Error::validation(
                "spectral factorization is one-dimensional; image banks stay in tap space",
            ))
        }
    };
    let plan = Dft::new(m)?;
    let m1 = bank.m1();
    let m2 = bank.m2();
    let mut blocks = vec![CMatrix::zeros(m1, m2); m];
    let mut column = vec![0.0; m];
    for j in 0..m1 {
        for i in 0..m2 {
            first_column(bank, j, i, &mut column);
            let lam = plan.forward_real(&column);
            for (f, &v) in lam.iter().enumerate() {
                *blocks[f].at_mut(j, i) = v;
            }
        }
    }
    SpectralBlocks::new(m, m1, m2, blocks)
}

/// Synthesizes the full-support bank whose per-frequency blocks are `spec`.
/// Fails if the blocks are not conjugate-symmetric (no real bank exists).
pub fn spectral_inverse(spec: &SpectralBlocks) -> Result<FilterBank> {
    let defect = spec.conjugate_symmetry_defect();
    let scale = 1.0 + spec.frob_norm() / (spec.period() as f64).sqrt();
    ensure!(
        defect <= 1e-9 * scale,
        "spectral blocks are not conjugate-symmetric (defect {defect:.3e}); \
         they do not come from a real filter bank"
    );
    let m = spec.period();
    let plan = Dft::new(m)?;
    let geometry = Geometry::OneD { m };
    let mut bank = FilterBank::zeros(geometry, spec.m1(), spec.m2(), Support::Full)?;
    let mut lam = vec![Complex64::ZERO; m];
    for j in 0..spec.m1() {
        for i in 0..spec.m2() {
            for f in 0..m {
                lam[f] = spec.block(f).at(j, i);
            }
            let col = plan.inverse(&lam);
            let dst = bank.cell_mut(j, i);
            for (t, z) in col.iter().enumerate() {
                dst[t] = z.re;
            }
        }
    }
    Ok(bank)
}

/// First column of the circulant block (j, i), i.e. the taps scattered by
/// offset mod m.
fn first_column(bank: &FilterBank, j: usize, i: usize, out: &mut [f64]) {
    let m = out.len();
    out.fill(0.0);
    let taps = bank.cell(j, i);
    match bank.support() {
        Support::Window { l } => {
            for (idx, &a) in taps.iter().enumerate() {
                let k = idx as isize - l as isize;
                out[k.rem_euclid(m as isize) as usize] += a;
            }
        }
        Support::Full => out.copy_from_slice(taps),
    }
}
