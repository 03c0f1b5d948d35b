//! Data-fidelity terms for the splitting solvers: value, gradient, and
//! proximal map of each supported f.

use crate::data::{blur_adjoint_periodic, blur_adjoint_valid, blur_apply_periodic,
    blur_apply_valid, BlurKernel};
use crate::error::{ensure, Error, Result};

/// Iteration cap for the conjugate-gradient prox solve.
const CG_MAX_ITERS: usize = 500;
/// Relative residual target for the conjugate-gradient prox solve.
const CG_TOL: f64 = 1e-10;

/// A convex data-fidelity term f with Lipschitz-smooth gradient.
#[derive(Debug, Clone)]
pub enum DataTerm {
    /// f(y) = 1/2 ||y - x_obs||^2: plain denoising fit.
    QuadraticIdentity { x_obs: Vec<f64> },
    /// f(y) = 1/2 ||B y - x_obs||^2 with B the Gaussian blur; periodic
    /// boundary by default, valid-region crop when `valid` is set.
    QuadraticBlur {
        x_obs: Vec<f64>,
        kernel: BlurKernel,
        d1: usize,
        d2: usize,
        valid: bool,
    },
    /// f(y) = (weight/2) ||y||^2. Weight zero makes f vanish, which some
    /// solver configurations need (a pure denoising flow with no data fit).
    QuadraticNorm { weight: f64 },
}

impl DataTerm {
    pub fn quadratic_identity(x_obs: Vec<f64>) -> Result<Self> {
        ensure!(!x_obs.is_empty(), "observation must not be empty");
        ensure!(
            x_obs.iter().all(|v| v.is_finite()),
            "observation must be finite"
        );
        Ok(DataTerm::QuadraticIdentity { x_obs })
    }

    pub fn quadratic_blur(
        x_obs: Vec<f64>,
        kernel: BlurKernel,
        d1: usize,
        d2: usize,
        valid: bool,
    ) -> Result<Self> {
        ensure!(
            x_obs.iter().all(|v| v.is_finite()),
            "observation must be finite"
        );
        let expect = if valid {
            ensure!(
                d1 > 8 && d2 > 8,
                "valid-region blur needs image sides above the kernel width"
            );
            (d1 - 8) * (d2 - 8)
        } else {
            d1 * d2
        };
        ensure!(
            x_obs.len() == expect,
            "observation length {} does not match the blurred size {expect}",
            x_obs.len()
        );
        Ok(DataTerm::QuadraticBlur {
            x_obs,
            kernel,
            d1,
            d2,
            valid,
        })
    }

    pub fn quadratic_norm(weight: f64) -> Result<Self> {
        ensure!(
            weight.is_finite() && weight >= 0.0,
            "norm weight must be finite and nonnegative, got {weight}"
        );
        Ok(DataTerm::QuadraticNorm { weight })
    }

    /// Lipschitz constant of the gradient. The blur kernel is normalized,
    /// so its operator norm is at most one in both boundary modes.
    pub fn lipschitz(&self) -> f64 {
        match self {
            DataTerm::QuadraticIdentity { .. } => 1.0,
            DataTerm::QuadraticBlur { .. } => 1.0,
            DataTerm::QuadraticNorm { weight } => *weight,
        }
    }

    /// Length of the argument vector y.
    pub fn arg_len(&self) -> Option<usize> {
        match self {
            DataTerm::QuadraticIdentity { x_obs } => Some(x_obs.len()),
            DataTerm::QuadraticBlur { d1, d2, .. } => Some(d1 * d2),
            DataTerm::QuadraticNorm { .. } => None,
        }
    }

    fn check_arg(&self, y: &[f64]) -> Result<()> {
        if let Some(n) = self.arg_len() {
            ensure!(
                y.len() == n,
                "argument length {} does not match the data term's {n}",
                y.len()
            );
        }
        Ok(())
    }

    fn blur_apply(
        kernel: &BlurKernel,
        img: &[f64],
        d1: usize,
        d2: usize,
        valid: bool,
    ) -> Result<Vec<f64>> {
        if valid {
            blur_apply_valid(kernel, img, d1, d2)
        } else {
            blur_apply_periodic(kernel, img, d1, d2)
        }
    }

    fn blur_adjoint(
        kernel: &BlurKernel,
        img: &[f64],
        d1: usize,
        d2: usize,
        valid: bool,
    ) -> Result<Vec<f64>> {
        if valid {
            blur_adjoint_valid(kernel, img, d1, d2)
        } else {
            blur_adjoint_periodic(kernel, img, d1, d2)
        }
    }

    pub fn value(&self, y: &[f64]) -> Result<f64> {
        self.check_arg(y)?;
        Ok(match self {
            DataTerm::QuadraticIdentity { x_obs } => {
                0.5 * y
                    .iter()
                    .zip(x_obs.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
            }
            DataTerm::QuadraticBlur {
                x_obs,
                kernel,
                d1,
                d2,
                valid,
            } => {
                let by = Self::blur_apply(kernel, y, *d1, *d2, *valid)?;
                0.5 * by
                    .iter()
                    .zip(x_obs.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
            }
            DataTerm::QuadraticNorm { weight } => {
                0.5 * weight * y.iter().map(|&v| v * v).sum::<f64>()
            }
        })
    }

    pub fn grad(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_arg(y)?;
        Ok(match self {
            DataTerm::QuadraticIdentity { x_obs } => {
                y.iter().zip(x_obs.iter()).map(|(&a, &b)| a - b).collect()
            }
            DataTerm::QuadraticBlur {
                x_obs,
                kernel,
                d1,
                d2,
                valid,
            } => {
                let mut by = Self::blur_apply(kernel, y, *d1, *d2, *valid)?;
                for (b, &o) in by.iter_mut().zip(x_obs.iter()) {
                    *b -= o;
                }
                Self::blur_adjoint(kernel, &by, *d1, *d2, *valid)?
            }
            DataTerm::QuadraticNorm { weight } => y.iter().map(|&v| weight * v).collect(),
        })
    }

    /// prox_{w f}(v) = argmin_z  1/2 ||z - v||^2 + w f(z), for w > 0.
    /// Identity and norm terms have closed forms; the blur term solves
    /// (I + w B^t B) z = v + w B^t x_obs by conjugate gradients.
    pub fn prox(&self, v: &[f64], w: f64) -> Result<Vec<f64>> {
        self.check_arg(v)?;
        ensure!(
            w.is_finite() && w > 0.0,
            "prox weight must be positive and finite, got {w}"
        );
        match self {
            DataTerm::QuadraticIdentity { x_obs } => Ok(v
                .iter()
                .zip(x_obs.iter())
                .map(|(&a, &b)| (a + w * b) / (1.0 + w))
                .collect()),
            DataTerm::QuadraticNorm { weight } => {
                let scale = 1.0 / (1.0 + w * weight);
                Ok(v.iter().map(|&a| scale * a).collect())
            }
            DataTerm::QuadraticBlur {
                x_obs,
                kernel,
                d1,
                d2,
                valid,
            } => {
                let bt_obs = Self::blur_adjoint(kernel, x_obs, *d1, *d2, *valid)?;
                let rhs: Vec<f64> = v
                    .iter()
                    .zip(bt_obs.iter())
                    .map(|(&a, &b)| a + w * b)
                    .collect();
                let apply = |z: &[f64]| -> Result<Vec<f64>> {
                    let bz = Self::blur_apply(kernel, z, *d1, *d2, *valid)?;
                    let btbz = Self::blur_adjoint(kernel, &bz, *d1, *d2, *valid)?;
                    Ok(z.iter().zip(btbz.iter()).map(|(&a, &b)| a + w * b).collect())
                };
                conjugate_gradient(apply, &rhs, v)
            }
        }
    }
}

/// Conjugate gradients for a symmetric positive-definite operator, warm
/// started at x0, run to relative residual `CG_TOL`.
fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    x0: &[f64],
) -> Result<Vec<f64>> {
    let b_norm = b.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok(vec![0.0; b.len()]);
    }
    let mut x = x0.to_vec();
    let ax = apply(&x)?;
    let mut r: Vec<f64> = b.iter().zip(ax.iter()).map(|(&bi, &ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|&v| v * v).sum();
    if rs.sqrt() <= CG_TOL * b_norm {
        return Ok(x);
    }
    for _ in 0..CG_MAX_ITERS {
        let ap = apply(&p)?;
        let pap: f64 = p.iter().zip(ap.iter()).map(|(&a, &b)| a * b).sum();
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::numerical(format!(
                "conjugate gradients met a non-positive curvature {pap}; \
                 the prox system is not positive definite"
            )));
        }
        let alpha = rs / pap;
        for ((xi, &pi), (ri, &api)) in x
            .iter_mut()
            .zip(p.iter())
            .zip(r.iter_mut().zip(ap.iter()))
        {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        let rs_next: f64 = r.iter().map(|&v| v * v).sum();
        if rs_next.sqrt() <= CG_TOL * b_norm {
            return Ok(x);
        }
        let beta = rs_next / rs;
        for (pi, &ri) in p.iter_mut().zip(r.iter()) {
            *pi = ri + beta * *pi;
        }
        rs = rs_next;
    }
    Err(Error::numerical(format!(
        "conjugate gradients did not reach relative residual {CG_TOL:.0e} \
         within {CG_MAX_ITERS} iterations"
    )))
}
