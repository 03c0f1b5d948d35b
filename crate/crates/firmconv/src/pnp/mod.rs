//! Plug-and-play splitting solvers.
//!
//! Both solvers minimize a data-fidelity term while replacing the prior's
//! proximal map with a trained denoiser. When the denoiser is averaged the
//! iterations are fixed-point schemes of averaged operators, and convergence
//! follows; [`divergence_example`] builds the matching negative result, an
//! averaged-but-not-firmly-nonexpansive denoiser whose alternating scheme
//! blows up at a known geometric rate.

pub mod data_term;
pub mod estimator;
pub mod operator;

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

pub use data_term::DataTerm;
pub use estimator::{
    averagedness_profile, estimate_averagedness, AveragednessEstimate, EstimatorConfig,
    ProfilePoint,
};
pub use operator::{
    resolve_reference, AnchoredDenoiser, ChainDenoiser, Operator, ReferenceSource, ResidualOp,
    ScaledIdentity, SoftShrink, DEFAULT_REFERENCE_SIGMA,
};

use crate::error::{ensure, Error, Result};
use crate::serial::fmt_f64;

/// Iterations a residual is compared across when testing for blow-up.
pub const DIVERGENCE_WINDOW: usize = 50;
/// Growth factor over the window that counts as blow-up.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Serialize)]
pub struct PnPConfig {
    /// Step size (forward-backward) or coupling weight (alternating scheme).
    pub eta: f64,
    pub max_iters: usize,
    /// Iterate-change norm below which the run counts as converged.
    pub stop_tol: f64,
    /// Skips the step-size safety check eta * L < 2.
    pub unsafe_step: bool,
    pub divergence_window: usize,
    pub divergence_factor: f64,
}

impl Default for PnPConfig {
    fn default() -> Self {
        PnPConfig {
            eta: 1.0,
            max_iters: 500,
            stop_tol: 1e-6,
            unsafe_step: false,
            divergence_window: DIVERGENCE_WINDOW,
            divergence_factor: DIVERGENCE_FACTOR,
        }
    }
}

impl PnPConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.eta.is_finite() && self.eta > 0.0,
            "step size must be positive and finite, got {}",
            self.eta
        );
        ensure!(self.max_iters >= 1, "need at least one iteration");
        ensure!(
            self.stop_tol.is_finite() && self.stop_tol >= 0.0,
            "stopping tolerance must be finite and nonnegative, got {}",
            self.stop_tol
        );
        ensure!(
            self.divergence_window >= 1,
            "divergence window must be at least one iteration"
        );
        ensure!(
            self.divergence_factor.is_finite() && self.divergence_factor > 1.0,
            "divergence factor must exceed one, got {}",
            self.divergence_factor
        );
        Ok(())
    }
}

/// Per-iteration history of a solver run.
#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    /// Norm of the change in the primal iterate, one entry per iteration.
    pub residuals: Vec<f64>,
    /// Data-fidelity value at each iterate.
    pub objectives: Vec<f64>,
    /// Alternating scheme only: norm of the denoiser argument t = x + p/eta.
    pub t_norms: Vec<f64>,
    /// Alternating scheme only: change in t, recorded from the second
    /// iteration on.
    pub t_residuals: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
}

impl Trace {
    fn new() -> Self {
        Trace {
            residuals: Vec::new(),
            objectives: Vec::new(),
            t_norms: Vec::new(),
            t_residuals: Vec::new(),
            converged: false,
            diverged: false,
            iterations: 0,
        }
    }

    /// Writes `iteration,residual,t_residual,objective` rows; the
    /// t-residual column is left blank where it does not exist.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "iteration,residual,t_residual,objective")?;
        // t-residuals start one iteration later than residuals
        let offset = self.residuals.len().saturating_sub(self.t_residuals.len());
        for i in 0..self.residuals.len() {
            let t_res = if i >= offset && !self.t_residuals.is_empty() {
                fmt_f64(self.t_residuals[i - offset])
            } else {
                String::new()
            };
            writeln!(
                w,
                "{},{},{},{}",
                i + 1,
                fmt_f64(self.residuals[i]),
                t_res,
                fmt_f64(self.objectives[i])
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// True once the newest residual exceeds the one `window` iterations
    /// back by more than `factor`, or stops being finite.
    fn blowing_up(&self, window: usize, factor: f64) -> bool {
        let k = self.residuals.len();
        if k == 0 {
            return false;
        }
        let last = self.residuals[k - 1];
        if !last.is_finite() {
            return true;
        }
        k > window && last > factor * self.residuals[k - 1 - window]
    }
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_start(data: &DataTerm, x0: &[f64]) -> Result<()> {
    ensure!(!x0.is_empty(), "starting point must not be empty");
    ensure!(
        x0.iter().all(|v| v.is_finite()),
        "starting point must be finite"
    );
    if let Some(n) = data.arg_len() {
        ensure!(
            x0.len() == n,
            "starting point length {} does not match the data term's {}",
            x0.len(),
            n
        );
    }
    Ok(())
}

/// Forward-backward splitting with a denoiser in place of the backward
/// step: y = x - eta * grad f(x), then x <- D(y). For an averaged denoiser
/// and eta * L < 2 the iteration is a convergent averaged scheme; the step
/// bound is enforced unless the config opts out.
pub fn fbs_pnp(
    data: &DataTerm,
    denoiser: &dyn Operator,
    x0: &[f64],
    cfg: &PnPConfig,
) -> Result<(Vec<f64>, Trace)> {
    cfg.validate()?;
    check_start(data, x0)?;
    if !cfg.unsafe_step {
        let bound = cfg.eta * data.lipschitz();
        ensure!(
            bound < 2.0,
            "step size times gradient Lipschitz constant is {bound:.3}, but the scheme needs \
             it below two; reduce the step or opt out of the check"
        );
    }

    let mut trace = Trace::new();
    let mut x = x0.to_vec();
    for r in 1..=cfg.max_iters {
        let g = data.grad(&x)?;
        let y: Vec<f64> = x
            .iter()
            .zip(g.iter())
            .map(|(&xi, &gi)| xi - cfg.eta * gi)
            .collect();
        let x_new = denoiser.apply(&y)?;
        ensure!(
            x_new.len() == x.len(),
            "denoiser changed the signal length from {} to {}",
            x.len(),
            x_new.len()
        );
        trace.residuals.push(l2_diff(&x_new, &x));
        trace.objectives.push(data.value(&x_new)?);
        trace.iterations = r;
        x = x_new;
        if trace.residuals[r - 1] <= cfg.stop_tol {
            trace.converged = true;
            break;
        }
        if trace.blowing_up(cfg.divergence_window, cfg.divergence_factor) {
            trace.diverged = true;
            break;
        }
    }
    Ok((x, trace))
}

/// Alternating scheme with a denoiser in place of the prior's proximal
/// map:
/// x <- prox of f at (y - p/eta) with weight 1/eta,
/// y <- D(x + p/eta),
/// p <- p + eta (x - y).
/// The starting point seeds y; the multiplier starts at zero.
pub fn admm_pnp(
    data: &DataTerm,
    denoiser: &dyn Operator,
    y0: &[f64],
    cfg: &PnPConfig,
) -> Result<(Vec<f64>, Trace)> {
    cfg.validate()?;
    check_start(data, y0)?;

    let n = y0.len();
    let mut trace = Trace::new();
    let mut y = y0.to_vec();
    let mut p = vec![0.0; n];
    let mut x_prev: Option<Vec<f64>> = None;
    let mut t_prev: Option<Vec<f64>> = None;
    let prox_weight = 1.0 / cfg.eta;

    for r in 1..=cfg.max_iters {
        let v: Vec<f64> = y
            .iter()
            .zip(p.iter())
            .map(|(&yi, &pi)| yi - pi / cfg.eta)
            .collect();
        let x = data.prox(&v, prox_weight)?;
        let t: Vec<f64> = x
            .iter()
            .zip(p.iter())
            .map(|(&xi, &pi)| xi + pi / cfg.eta)
            .collect();
        trace.t_norms.push(t.iter().map(|&u| u * u).sum::<f64>().sqrt());
        if let Some(ref tp) = t_prev {
            trace.t_residuals.push(l2_diff(&t, tp));
        }
        let y_new = denoiser.apply(&t)?;
        ensure!(
            y_new.len() == n,
            "denoiser changed the signal length from {n} to {}",
            y_new.len()
        );
        for ((pi, &xi), &yi) in p.iter_mut().zip(x.iter()).zip(y_new.iter()) {
            *pi += cfg.eta * (xi - yi);
        }
        y = y_new;

        let res = match x_prev {
            Some(ref xp) => l2_diff(&x, xp),
            None => l2_diff(&x, y0),
        };
        trace.residuals.push(res);
        trace.objectives.push(data.value(&x)?);
        trace.iterations = r;
        t_prev = Some(t);
        x_prev = Some(x);

        // the first x-step can reproduce the start exactly before the
        // multiplier engages (denoising started at the observation), so
        // convergence is only tested once the state is self-consistent
        if r >= 2 && res <= cfg.stop_tol {
            trace.converged = true;
            break;
        }
        if trace.blowing_up(cfg.divergence_window, cfg.divergence_factor) {
            trace.diverged = true;
            break;
        }
    }
    Ok((x_prev.expect("at least one iteration ran"), trace))
}

/// Runs the alternating scheme on a pair designed to defeat it: the
/// denoiser x -> -(2t - 1) x is t-averaged for any t in (1/2, 1] yet not
/// firmly nonexpansive, and against the quadratic data term with weight
/// (1 + a2)/(1 - a2) at unit coupling the denoiser argument grows by the
/// exact factor
///   c = 2t - (1 - a2)(4t - 1)/2
/// per iteration. Requires c > 1, i.e. 2t - 1 > (1 - a2)(4t - 1)/2; each
/// recorded ratio is checked against c to one part in 1e9.
pub fn divergence_example(t: f64, a2: f64, y0: &[f64], iters: usize) -> Result<Trace> {
    ensure!(
        t > 0.5 && t <= 1.0,
        "the construction needs an averagedness constant in (1/2, 1], got {t}"
    );
    ensure!(
        a2 > 0.0 && a2 < 1.0,
        "the quadratic weight parameter must lie in (0, 1), got {a2}"
    );
    ensure!(iters >= 2, "need at least two iterations to exhibit growth");
    ensure!(
        !y0.is_empty() && y0.iter().all(|v| v.is_finite()),
        "starting point must be nonempty and finite"
    );
    ensure!(
        y0.iter().any(|&v| v != 0.0),
        "starting point must be nonzero, growth is relative to it"
    );

    let a1 = 2.0 * t - 1.0;
    let shrink = (1.0 - a2) * (1.0 + 2.0 * a1) / 2.0;
    ensure!(
        a1 > shrink,
        "no growth: the averaging defect 2t - 1 = {a1} must strictly exceed \
         (1 - a2)(4t - 1)/2 = {shrink}"
    );
    let growth = 1.0 + a1 - shrink;

    let data = DataTerm::quadratic_norm((1.0 + a2) / (1.0 - a2))?;
    let denoiser = ScaledIdentity { factor: -a1 };
    let cfg = PnPConfig {
        eta: 1.0,
        max_iters: iters,
        stop_tol: 0.0,
        ..PnPConfig::default()
    };
    let (_, trace) = admm_pnp(&data, &denoiser, y0, &cfg)?;

    for pair in trace.t_norms.windows(2) {
        let ratio = pair[1] / pair[0];
        if (ratio - growth).abs() > 1e-9 {
            return Err(Error::numerical(format!(
                "measured growth {ratio} drifted from the predicted factor {growth}"
            )));
        }
    }
    Ok(trace)
}
