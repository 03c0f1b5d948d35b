//! Discrete Fourier transform plans.
//!
//! Convention: forward transform X_f = sum_p x_p exp(-2 pi i f p / m),
//! inverse x_p = (1/m) sum_f X_f exp(+2 pi i f p / m). The primary route is
//! the table-driven O(m^2) transform; a radix-2 path exists for power-of-two
//! lengths and is cross-checked against the naive route in tests. Signal
//! periods are capped at 4096, which keeps even the quadratic route cheap.

use crate::error::{ensure, Result};
use num_complex::Complex64;

/// Largest supported transform length.
pub const MAX_PERIOD: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    Naive,
    Radix2,
}

/// A reusable transform plan for a fixed length.
#[derive(Debug, Clone)]
pub struct Dft {
    m: usize,
    // twiddle[k] = exp(-2 pi i k / m)
    twiddle: Vec<Complex64>,
    route: Route,
}

impl Dft {
    /// Plan for length `m`, preferring the radix-2 route when m is a power of
    /// two.
    pub fn new(m: usize) -> Result<Self> {
        Self::with_route(m, if m.is_power_of_two() { Route::Radix2 } else { Route::Naive })
    }

    /// Plan that always takes the quadratic route, regardless of length.
    pub fn naive(m: usize) -> Result<Self> {
        Self::with_route(m, Route::Naive)
    }

    fn with_route(m: usize, route: Route) -> Result<Self> {
        ensure!(m >= 1, "transform length must be positive");
        ensure!(
            m <= MAX_PERIOD,
            "transform length {m} exceeds the supported cap {MAX_PERIOD}"
        );
        let twiddle = (0..m)
            .map(|k| {
                let angle = -std::f64::consts::TAU * k as f64 / m as f64;
                Complex64::new(angle.cos(), angle.sin())
            })
            .collect();
        Ok(Dft { m, twiddle, route })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn forward(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.m, "transform length mismatch");
        match self.route {
            Route::Naive => self.forward_naive(x),
            Route::Radix2 => {
                let mut buf = x.to_vec();
                self.radix2_in_place(&mut buf);
                buf
            }
        }
    }

    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let cx: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&cx)
    }

    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(spectrum.len(), self.m, "transform length mismatch");
        // IDFT(X) = conj(DFT(conj(X))) / m
        let conj: Vec<Complex64> = spectrum.iter().map(|z| z.conj()).collect();
        let fwd = self.forward(&conj);
        let scale = 1.0 / self.m as f64;
        fwd.iter().map(|z| z.conj() * scale).collect()
    }

    fn forward_naive(&self, x: &[Complex64]) -> Vec<Complex64> {
        let m = self.m;
        let mut out = vec![Complex64::ZERO; m];
        for (f, o) in out.iter_mut().enumerate() {
            let mut acc = Complex64::ZERO;
            let mut idx = 0usize;
            for &xp in x {
                acc += xp * self.twiddle[idx];
                idx += f;
                if idx >= m {
                    idx -= m;
                }
            }
            *o = acc;
        }
        out
    }

    fn radix2_in_place(&self, buf: &mut [Complex64]) {
        let m = self.m;
        if m == 1 {
            return;
        }
        // bit-reversal permutation
        let bits = m.trailing_zeros();
        for i in 0..m {
            let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut half = 1usize;
        while half < m {
            let stride = m / (2 * half);
            for start in (0..m).step_by(2 * half) {
                for k in 0..half {
                    let w = self.twiddle[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            half *= 2;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn assert_close(a: &[Complex64], b: &[Complex64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!(
                (x - y).norm() < tol,
                "spectra differ: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        for &m in &[5usize, 8, 12] {
            let plan = Dft::new(m).unwrap();
            let mut x = vec![0.0; m];
            x[0] = 1.0;
            let spec = plan.forward_real(&x);
            for z in &spec {
                assert!((z - Complex64::ONE).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn shifted_impulse_spectrum_is_the_twiddle_sequence() {
        let m = 4;
        let plan = Dft::new(m).unwrap();
        let mut x = vec![0.0; m];
        x[1] = 1.0;
        let spec = plan.forward_real(&x);
        // exp(-2 pi i f / 4) for f = 0..3 is 1, -i, -1, i
        let expect = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, 1.0),
        ];
        assert_close(&spec, &expect, 1e-12);
    }

    #[test]
    fn roundtrip_recovers_signal() {
        let mut rng = Rng::new(4);
        for &m in &[7usize, 16, 33] {
            let plan = Dft::new(m).unwrap();
            let x: Vec<Complex64> = (0..m)
                .map(|_| Complex64::new(rng.normal(), rng.normal()))
                .collect();
            let back = plan.inverse(&plan.forward(&x));
            assert_close(&back, &x, 1e-10);
        }
    }

    #[test]
    fn radix2_agrees_with_naive() {
        let mut rng = Rng::new(9);
        for &m in &[8usize, 64, 256] {
            let fast = Dft::new(m).unwrap();
            let slow = Dft::naive(m).unwrap();
            let x: Vec<Complex64> = (0..m)
                .map(|_| Complex64::new(rng.normal(), rng.normal()))
                .collect();
            assert_close(&fast.forward(&x), &slow.forward(&x), 1e-9 * m as f64);
        }
    }

    #[test]
    fn oversized_length_is_rejected() {
        assert!(Dft::new(MAX_PERIOD + 1).is_err());
    }
}
