//! Operator handles the splitting solvers and the averagedness estimator
//! work with: application plus Jacobian-vector products in both directions.

use std::path::PathBuf;

use crate::algebra::Geometry;
use crate::data::{blur_apply_periodic, gauss_kernel, gauss_smooth_signal};
use crate::error::{ensure, Result};
use crate::network::Network;

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

/// A differentiable-almost-everywhere map on signals. `jvp` defaults to a
/// central difference with step 1e-6 (1 + ||x||); `vjp` must be supplied,
/// exact transposed products being available for everything shipped here.
pub trait Operator: Sync {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>>;

    fn jvp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        central_difference(|z| self.apply(z), x, v)
    }

    /// A linearization at `x` that may reuse work across repeated products,
    /// e.g. a recorded forward pass. The default recomputes per call.
    fn linearize<'s>(&'s self, x: &[f64]) -> Result<Box<dyn Linearization + 's>> {
        Ok(Box::new(FreshPoint {
            op: self,
            x: x.to_vec(),
        }))
    }
}

/// Jacobian products of an [`Operator`] frozen at one point.
pub trait Linearization {
    fn jvp(&self, v: &[f64]) -> Result<Vec<f64>>;
    fn vjp(&self, w: &[f64]) -> Result<Vec<f64>>;
}

pub(crate) fn central_difference(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    ensure!(
        x.len() == v.len(),
        "direction length {} does not match point length {}",
        v.len(),
        x.len()
    );
    let h = 1e-6 * (1.0 + l2(x));
    let xp: Vec<f64> = x.iter().zip(v.iter()).map(|(&a, &b)| a + h * b).collect();
    let xm: Vec<f64> = x.iter().zip(v.iter()).map(|(&a, &b)| a - h * b).collect();
    let fp = apply(&xp)?;
    let fm = apply(&xm)?;
    Ok(fp
        .iter()
        .zip(fm.iter())
        .map(|(&a, &b)| (a - b) / (2.0 * h))
        .collect())
}

struct FreshPoint<'a, T: ?Sized> {
    op: &'a T,
    x: Vec<f64>,
}

impl<T: Operator + ?Sized> Linearization for FreshPoint<'_, T> {
    fn jvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.op.jvp(&self.x, v)
    }

    fn vjp(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.op.vjp(&self.x, w)
    }
}

/// x -> a x. Exact products; handy for closed-form solver checks.
#[derive(Debug, Clone, Copy)]
pub struct ScaledIdentity {
    pub factor: f64,
}

impl Operator for ScaledIdentity {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|&v| self.factor * v).collect())
    }

    fn vjp(&self, _x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        Ok(w.iter().map(|&v| self.factor * v).collect())
    }

    fn jvp(&self, _x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.iter().map(|&u| self.factor * u).collect())
    }
}

/// Componentwise soft shrinkage by a fixed threshold: the proximal map of
/// the scaled l1 norm.
#[derive(Debug, Clone, Copy)]
pub struct SoftShrink {
    pub threshold: f64,
}

impl SoftShrink {
    pub fn new(threshold: f64) -> Result<Self> {
        ensure!(
            threshold.is_finite() && threshold >= 0.0,
            "shrinkage threshold must be finite and nonnegative, got {threshold}"
        );
        Ok(SoftShrink { threshold })
    }
}

impl Operator for SoftShrink {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter()
            .map(|&v| v.signum() * (v.abs() - self.threshold).max(0.0))
            .collect())
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter()
            .zip(w.iter())
            .map(|(&xi, &wi)| if xi.abs() > self.threshold { wi } else { 0.0 })
            .collect())
    }

    fn jvp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.vjp(x, v)
    }
}

/// The plain trained denoiser x - gamma Psi(x), with exact transposed
/// products from the recorded forward pass.
pub struct ChainDenoiser<'a> {
    net: &'a Network,
}

impl<'a> ChainDenoiser<'a> {
    pub fn new(net: &'a Network) -> Self {
        ChainDenoiser { net }
    }

    pub fn network(&self) -> &Network {
        self.net
    }
}

impl Operator for ChainDenoiser<'_> {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.denoise(x)
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let (_, tape) = self.net.denoise_with_tape(x)?;
        self.net.denoise_vjp(&tape, w)
    }

    fn linearize<'s>(&'s self, x: &[f64]) -> Result<Box<dyn Linearization + 's>> {
        let (_, tape) = self.net.denoise_with_tape(x)?;
        Ok(Box::new(ChainPoint {
            net: self.net,
            x: x.to_vec(),
            tape,
        }))
    }
}

struct ChainPoint<'a> {
    net: &'a Network,
    x: Vec<f64>,
    tape: crate::network::Tape,
}

impl Linearization for ChainPoint<'_> {
    fn jvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        central_difference(|z| self.net.denoise(z), &self.x, v)
    }

    fn vjp(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.net.denoise_vjp(&self.tape, w)
    }
}

/// The averaged chain itself, x -> Psi(x); the subject of averagedness
/// estimation.
pub struct ResidualOp<'a> {
    net: &'a Network,
}

impl<'a> ResidualOp<'a> {
    pub fn new(net: &'a Network) -> Self {
        ResidualOp { net }
    }
}

impl Operator for ResidualOp<'_> {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.residual(x)?.0)
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let (_, tape) = self.net.residual(x)?;
        Ok(self.net.residual_backward(&tape, w)?.input)
    }

    fn linearize<'s>(&'s self, x: &[f64]) -> Result<Box<dyn Linearization + 's>> {
        let (_, tape) = self.net.residual(x)?;
        Ok(Box::new(ResidualPoint {
            net: self.net,
            x: x.to_vec(),
            tape,
        }))
    }
}

struct ResidualPoint<'a> {
    net: &'a Network,
    x: Vec<f64>,
    tape: crate::network::Tape,
}

impl Linearization for ResidualPoint<'_> {
    fn jvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        central_difference(|z| Ok(self.net.residual(z)?.0), &self.x, v)
    }

    fn vjp(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.residual_backward(&self.tape, w)?.input)
    }
}

/// Denoiser pulled toward a fixed reference signal so the whole map stays
/// averaged:
/// D(x) = (1 - 1/d) x_ref + (1/d) (x - gamma Psi(x)),  d = 1 - gamma + 2 t gamma,
/// valid for a t-averaged chain with t in [1/2, 1] and 0 < gamma < 2. The
/// result is averaged with parameter t gamma / d.
pub struct AnchoredDenoiser<'a> {
    net: &'a Network,
    x_ref: Vec<f64>,
    t: f64,
    denom: f64,
}

impl<'a> AnchoredDenoiser<'a> {
    pub fn new(net: &'a Network, x_ref: Vec<f64>, t: f64) -> Result<Self> {
        let gamma = net.gamma();
        ensure!(
            (0.5..=1.0).contains(&t),
            "averagedness parameter must lie in [1/2, 1], got {t}"
        );
        ensure!(
            gamma < 2.0,
            "anchored averaging requires a scale below two, got {gamma}"
        );
        ensure!(
            x_ref.len() == net.signal_len(),
            "reference length {} does not match the network's {}",
            x_ref.len(),
            net.signal_len()
        );
        ensure!(
            x_ref.iter().all(|v| v.is_finite()),
            "reference signal must be finite"
        );
        let denom = 1.0 - gamma + 2.0 * t * gamma;
        Ok(AnchoredDenoiser {
            net,
            x_ref,
            t,
            denom,
        })
    }

    /// Weight on the reference signal.
    pub fn anchor_coefficient(&self) -> f64 {
        1.0 - 1.0 / self.denom
    }

    /// Weight on the plain denoiser output; the two coefficients form an
    /// affine combination.
    pub fn scale_coefficient(&self) -> f64 {
        1.0 / self.denom
    }

    /// The averagedness parameter of the combined map.
    pub fn averagedness(&self) -> f64 {
        self.t * self.net.gamma() / self.denom
    }
}

impl Operator for AnchoredDenoiser<'_> {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let den = self.net.denoise(x)?;
        let a = self.anchor_coefficient();
        let s = self.scale_coefficient();
        Ok(self
            .x_ref
            .iter()
            .zip(den.iter())
            .map(|(&r, &d)| a * r + s * d)
            .collect())
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let (_, tape) = self.net.denoise_with_tape(x)?;
        let g = self.net.denoise_vjp(&tape, w)?;
        let s = self.scale_coefficient();
        Ok(g.iter().map(|&v| s * v).collect())
    }
}

/// Default smoothing width for the smoothed-observation reference.
pub const DEFAULT_REFERENCE_SIGMA: f64 = 1.5;

/// Where the anchored denoiser's reference signal comes from.
#[derive(Debug, Clone)]
pub enum ReferenceSource {
    /// A single-row or single-column CSV of sample values.
    File(PathBuf),
    /// One pass of the plain denoiser over the observation.
    SecondPass,
    /// Gaussian smoothing of the observation.
    Smoothed { sigma: f64 },
}

/// Materializes the reference signal for the given observation.
pub fn resolve_reference(
    source: &ReferenceSource,
    net: &Network,
    observation: &[f64],
) -> Result<Vec<f64>> {
    ensure!(
        observation.len() == net.signal_len(),
        "observation length {} does not match the network's {}",
        observation.len(),
        net.signal_len()
    );
    match source {
        ReferenceSource::File(path) => {
            let rows = crate::serial::read_csv(path)?;
            let flat: Vec<f64> = if rows.len() == 1 {
                rows.into_iter().next().expect("checked length")
            } else {
                let mut out = Vec::with_capacity(rows.len());
                for row in rows {
                    ensure!(
                        row.len() == 1,
                        "reference file must be a single row or a single column"
                    );
                    out.push(row[0]);
                }
                out
            };
            ensure!(
                flat.len() == observation.len(),
                "reference file holds {} values, expected {}",
                flat.len(),
                observation.len()
            );
            Ok(flat)
        }
        ReferenceSource::SecondPass => net.denoise(observation),
        ReferenceSource::Smoothed { sigma } => match net.geometry() {
            Geometry::OneD { .. } => gauss_smooth_signal(observation, *sigma),
            Geometry::TwoD { m } => {
                let kernel = gauss_kernel(*sigma)?;
                blur_apply_periodic(&kernel, observation, m, m)
            }
        },
    }
}

/// Wraps a plain closure as an operator with finite-difference products in
/// both directions. Test scaffolding for maps with no cheap transpose.
pub struct ClosureOp<F: Fn(&[f64]) -> Result<Vec<f64>> + Sync> {
    pub f: F,
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>> + Sync> Operator for ClosureOp<F> {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.f)(x)
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        // transpose product by columns; quadratic cost, tests only
        let n = x.len();
        let mut out = vec![0.0; n];
        let mut e = vec![0.0; n];
        for i in 0..n {
            e[i] = 1.0;
            let col = self.jvp(x, &e)?;
            ensure!(
                col.len() == w.len(),
                "operator output length {} does not match weight length {}",
                col.len(),
                w.len()
            );
            out[i] = col.iter().zip(w.iter()).map(|(&a, &b)| a * b).sum();
            e[i] = 0.0;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{FilterBank, Support};
    use crate::network::{Activation, ActivationKind, Layer};
    use crate::rng::Rng;

    fn tiny_net(gamma: f64) -> Network {
        // on-manifold 2-channel layer, smooth activation
        let geometry = Geometry::OneD { m: 8 };
        let mut bank = FilterBank::zeros(geometry, 2, 1, Support::Window { l: 1 }).unwrap();
        bank.cell_mut(0, 0)[1] = 0.6;
        bank.cell_mut(1, 0)[1] = 0.8;
        let act = Activation::new(ActivationKind::Isru, 1.0).unwrap();
        let layer = Layer::new(bank, vec![0.1, -0.2], act).unwrap();
        Network::new(vec![layer], gamma).unwrap()
    }

    #[test]
    fn chain_denoiser_products_match_finite_differences() {
        let net = tiny_net(1.3);
        let den = ChainDenoiser::new(&net);
        let mut rng = Rng::new(3);
        let mut x = vec![0.0; 8];
        rng.fill_normal(&mut x);
        let mut v = vec![0.0; 8];
        rng.fill_normal(&mut v);
        let mut w = vec![0.0; 8];
        rng.fill_normal(&mut w);

        let jv = den.jvp(&x, &v).unwrap();
        let jtw = den.vjp(&x, &w).unwrap();
        // <J v, w> == <v, J^t w>
        let lhs: f64 = jv.iter().zip(w.iter()).map(|(&a, &b)| a * b).sum();
        let rhs: f64 = v.iter().zip(jtw.iter()).map(|(&a, &b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() <= 1e-6 * (1.0 + lhs.abs()),
            "adjoint identity violated: {lhs} vs {rhs}"
        );

        let lin = den.linearize(&x).unwrap();
        assert_eq!(lin.vjp(&w).unwrap(), jtw);
    }

    #[test]
    fn anchored_denoiser_interpolates_the_plain_one() {
        let net = tiny_net(1.99);
        let x_ref = vec![0.25; 8];
        // t = 1/2 collapses to the plain denoiser
        let d = AnchoredDenoiser::new(&net, x_ref.clone(), 0.5).unwrap();
        assert!((d.anchor_coefficient()).abs() < 1e-15);
        assert!((d.scale_coefficient() - 1.0).abs() < 1e-15);
        let mut rng = Rng::new(11);
        let mut x = vec![0.0; 8];
        rng.fill_normal(&mut x);
        let plain = net.denoise(&x).unwrap();
        let anchored = d.apply(&x).unwrap();
        for (a, p) in anchored.iter().zip(plain.iter()) {
            assert!((a - p).abs() <= 1e-15);
        }

        // t = 0.6, gamma = 1.99: denominator 1 - 1.99 + 1.2 * 1.99 = 1.398
        let d6 = AnchoredDenoiser::new(&net, x_ref, 0.6).unwrap();
        assert!((d6.scale_coefficient() - 1.0 / 1.398).abs() <= 1e-12);
        assert!((d6.anchor_coefficient() - (1.0 - 1.0 / 1.398)).abs() <= 1e-12);
        assert!(
            (d6.anchor_coefficient() + d6.scale_coefficient() - 1.0).abs() <= 1e-15,
            "coefficients must form an affine combination"
        );
        assert!((d6.averagedness() - 0.6 * 1.99 / 1.398).abs() <= 1e-12);
    }

    #[test]
    fn anchored_denoiser_rejects_out_of_range_parameters() {
        let net = tiny_net(1.0);
        assert!(AnchoredDenoiser::new(&net, vec![0.0; 8], 0.4).is_err());
        assert!(AnchoredDenoiser::new(&net, vec![0.0; 8], 1.1).is_err());
        assert!(AnchoredDenoiser::new(&net, vec![0.0; 4], 0.6).is_err());
        let mut hot = tiny_net(1.0);
        hot.set_gamma(2.0).unwrap();
        assert!(AnchoredDenoiser::new(&hot, vec![0.0; 8], 0.6).is_err());
    }

    #[test]
    fn soft_shrink_matches_the_l1_prox() {
        let op = SoftShrink::new(0.5).unwrap();
        let out = op.apply(&[1.0, -0.3, 0.5, -2.0]).unwrap();
        assert_eq!(out, vec![0.5, 0.0, 0.0, -1.5]);
        assert!(SoftShrink::new(-0.1).is_err());
    }

    #[test]
    fn reference_sources_produce_signals_of_the_right_shape() {
        let net = tiny_net(1.0);
        let mut rng = Rng::new(17);
        let mut obs = vec![0.0; 8];
        rng.fill_normal(&mut obs);

        let second = resolve_reference(&ReferenceSource::SecondPass, &net, &obs).unwrap();
        assert_eq!(second, net.denoise(&obs).unwrap());

        let smooth = resolve_reference(
            &ReferenceSource::Smoothed {
                sigma: DEFAULT_REFERENCE_SIGMA,
            },
            &net,
            &obs,
        )
        .unwrap();
        assert_eq!(smooth.len(), 8);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reference.csv");
        crate::serial::write_csv(&path, &[obs.clone()]).unwrap();
        let from_file =
            resolve_reference(&ReferenceSource::File(path), &net, &obs).unwrap();
        for (a, b) in from_file.iter().zip(obs.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
