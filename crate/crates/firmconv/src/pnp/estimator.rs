//! Empirical certification that a map is t-averaged.
//!
//! A map A is t-averaged when A = t R + (1 - t) I for some nonexpansive R,
//! equivalently when R = (1/t) A - ((1 - t)/t) I has operator norm at most
//! one. The certificate here is local and sampled: at random points the
//! largest singular value of the Jacobian of R is estimated by power
//! iteration on J^t J, and the maximum over samples must stay within a small
//! slack of one. Candidates run over a fixed grid from 1/2 to 1; since
//! t-averaged implies t'-averaged for t' > t, the first passing candidate is
//! the tightest constant the grid resolves.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, Result};
use crate::pnp::operator::Operator;
use crate::rng::Rng;

/// Grid spacing between candidate averagedness constants.
pub const GRID_STEP: f64 = 0.05;
/// Tolerance above one before an operator-norm estimate counts as a failure.
pub const NORM_SLACK: f64 = 1e-6;

const POWER_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorConfig {
    /// Number of random probe points.
    pub samples: usize,
    pub seed: u64,
    /// Power-iteration steps per probe point and candidate.
    pub power_iters: usize,
    /// Spacing between candidate constants; the grid always starts at 1/2
    /// and never passes 1.
    pub grid_step: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            samples: 1000,
            seed: 0,
            power_iters: 50,
            grid_step: GRID_STEP,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.samples > 0, "estimator needs at least one probe point");
        ensure!(
            self.power_iters > 0,
            "power iteration needs at least one step"
        );
        ensure!(
            self.grid_step.is_finite() && self.grid_step > 0.0 && self.grid_step <= 0.5,
            "grid step must lie in (0, 1/2], got {}",
            self.grid_step
        );
        Ok(())
    }
}

/// One row of the sweep: the candidate constant and the largest operator
/// norm of the candidate residual map seen over all probe points.
#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub t: f64,
    pub max_operator_norm: f64,
}

/// Outcome of the sweep.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AveragednessEstimate {
    /// Certified at the smallest passing grid constant.
    Averaged { t: f64, max_operator_norm: f64 },
    /// No grid constant passed; the norm reported is for t = 1, i.e. the
    /// Lipschitz estimate of the map itself.
    NotAveraged { max_operator_norm: f64 },
}

fn candidate_grid(step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t = 0.5 + step * k as f64;
        if t > 1.0 + 1e-12 {
            break;
        }
        out.push(t.min(1.0));
        k += 1;
    }
    out
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|&v| v * v).sum()
}

/// Largest singular value of (1/t) J - ((1-t)/t) I at one probe point, by
/// power iteration on the normal map.
fn candidate_norm_at(
    op: &dyn Operator,
    x: &[f64],
    t: f64,
    start: &mut Rng,
    power_iters: usize,
) -> Result<f64> {
    let a = 1.0 / t;
    let b = (1.0 - t) / t;
    let lin = op.linearize(x)?;

    let mut u = vec![0.0; x.len()];
    start.fill_normal(&mut u);
    let nu = norm_sq(&u).sqrt();
    ensure!(nu > 0.0, "degenerate power-iteration start");
    for v in u.iter_mut() {
        *v /= nu;
    }

    let mut sigma_sq = 0.0;
    let mut prev = f64::INFINITY;
    for _ in 0..power_iters {
        let ju = lin.jvp(&u)?;
        ensure!(
            ju.len() == u.len(),
            "averagedness is defined for square maps; output length {} differs from input length {}",
            ju.len(),
            u.len()
        );
        let w: Vec<f64> = ju
            .iter()
            .zip(u.iter())
            .map(|(&j, &ui)| a * j - b * ui)
            .collect();
        sigma_sq = norm_sq(&w);
        let jtw = lin.vjp(&w)?;
        let z: Vec<f64> = jtw
            .iter()
            .zip(w.iter())
            .map(|(&j, &wi)| a * j - b * wi)
            .collect();
        let nz = norm_sq(&z).sqrt();
        if nz <= 1e-300 {
            // candidate residual vanishes at this point
            return Ok(sigma_sq.sqrt());
        }
        for (ui, &zi) in u.iter_mut().zip(z.iter()) {
            *ui = zi / nz;
        }
        if (sigma_sq - prev).abs() <= POWER_TOL * sigma_sq.max(1.0) {
            break;
        }
        prev = sigma_sq;
    }
    Ok(sigma_sq.sqrt())
}

/// Worst-case candidate norm over all probe points, for one grid constant.
/// Probe points are uniform on [0, 1]^dim; both the points and the power
/// iteration starts are derived from the seed, so the result is deterministic
/// for any worker count.
fn max_norm_for_candidate(
    op: &dyn Operator,
    dim: usize,
    t_index: usize,
    t: f64,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    let root = Rng::new(cfg.seed);
    let norms: Vec<f64> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let mut sample_rng = root.stream(i as u64);
            let mut x = vec![0.0; dim];
            for v in x.iter_mut() {
                *v = sample_rng.uniform();
            }
            let mut start = sample_rng.stream(t_index as u64);
            candidate_norm_at(op, &x, t, &mut start, cfg.power_iters)
        })
        .collect::<Result<_>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}

/// Sweeps the whole candidate grid and reports the worst norm at each
/// constant. Useful for plotting how far a map is from each certificate.
pub fn averagedness_profile(
    op: &dyn Operator,
    dim: usize,
    cfg: &EstimatorConfig,
) -> Result<Vec<ProfilePoint>> {
    cfg.validate()?;
    ensure!(dim > 0, "probe dimension must be positive");
    let mut out = Vec::new();
    for (k, t) in candidate_grid(cfg.grid_step).into_iter().enumerate() {
        let max_operator_norm = max_norm_for_candidate(op, dim, k, t, cfg)?;
        out.push(ProfilePoint {
            t,
            max_operator_norm,
        });
    }
    Ok(out)
}

/// Finds the smallest grid constant whose certificate passes, stopping at
/// the first success.
pub fn estimate_averagedness(
    op: &dyn Operator,
    dim: usize,
    cfg: &EstimatorConfig,
) -> Result<AveragednessEstimate> {
    cfg.validate()?;
    ensure!(dim > 0, "probe dimension must be positive");
    let mut last = f64::INFINITY;
    for (k, t) in candidate_grid(cfg.grid_step).into_iter().enumerate() {
        let max_operator_norm = max_norm_for_candidate(op, dim, k, t, cfg)?;
        if max_operator_norm <= 1.0 + NORM_SLACK {
            return Ok(AveragednessEstimate::Averaged {
                t,
                max_operator_norm,
            });
        }
        last = max_operator_norm;
    }
    Ok(AveragednessEstimate::NotAveraged {
        max_operator_norm: last,
    })
}
