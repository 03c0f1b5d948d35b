//! Chains of averaged convolutional building blocks.
//!
//! A building block maps a stream z to T'^t sigma(T' z + b) where T' is a
//! multichannel convolution whose tall orientation sits on the Stiefel
//! manifold, b is a per-channel bias, and sigma is a monotone 1-Lipschitz
//! activation vanishing at zero. Each block is then firmly nonexpansive, and
//! a chain of K blocks is K/(K+1)-averaged. None of that is re-derived at
//! runtime; [`Network::certify`] spot-checks it instead.
//!
//! The denoising interface wraps the chain between a channel-replicating
//! isometry and its adjoint: residual(x) = unlift(chain(lift(x))) and
//! denoise(x) = x - gamma * residual(x).

pub mod activation;

pub use activation::{Activation, ActivationKind};

use crate::algebra::{FilterBank, Geometry, Support};
use crate::error::{ensure, Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One building block: convolution bank, per-channel bias, activation.
#[derive(Debug, Clone)]
pub struct Layer {
    bank: FilterBank,
    bias: Vec<f64>,
    act: Activation,
}

impl Layer {
    pub fn new(bank: FilterBank, bias: Vec<f64>, act: Activation) -> Result<Self> {
        ensure!(
            bias.len() == bank.m1(),
            "bias length {} does not match hidden channel count {}",
            bias.len(),
            bank.m1()
        );
        ensure!(
            bias.iter().all(|b| b.is_finite()),
            "bias entries must be finite"
        );
        act.kind.validate_alpha(act.alpha)?;
        Ok(Layer { bank, bias, act })
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut FilterBank {
        &mut self.bank
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.act
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        self.act.kind.validate_alpha(alpha)?;
        self.act.alpha = alpha;
        Ok(())
    }

    /// Pre-activation T' z + b broadcast over positions.
    fn pre_activation(&self, z: &[f64]) -> Vec<f64> {
        let cell = self.bank.geometry().cell_size();
        let mut u = vec![0.0; self.bank.output_len()];
        self.bank.apply(z, &mut u);
        for (c, &b) in self.bias.iter().enumerate() {
            for v in &mut u[c * cell..(c + 1) * cell] {
                *v += b;
            }
        }
        u
    }

    /// Applies the block z -> T'^t sigma(T' z + b).
    pub fn building_block(&self, z: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            z.len() == self.bank.input_len(),
            "block input length {} does not match stream length {}",
            z.len(),
            self.bank.input_len()
        );
        let mut u = self.pre_activation(z);
        for v in &mut u {
            *v = self.act.eval(*v);
        }
        let mut out = vec![0.0; self.bank.input_len()];
        self.bank.apply_adjoint(&u, &mut out);
        Ok(out)
    }

    /// Frobenius residual of the orthogonality constraint on the tall
    /// orientation of the bank.
    pub fn gram_residual(&self) -> f64 {
        if self.bank.m1() >= self.bank.m2() {
            self.bank.gram_residual()
        } else {
            self.bank.transpose().gram_residual()
        }
    }
}

/// Pre-activation record of one forward pass, keyed to the parameters that
/// produced it.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    fingerprint: u64,
}

impl Tape {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn layer_count(&self) -> usize {
        self.pre.len()
    }

    pub fn pre_activation(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }
}

/// Parameter gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub taps: Vec<f64>,
    pub bias: Vec<f64>,
    pub alpha: f64,
}

/// Full gradient bundle: one entry per layer plus the input gradient.
#[derive(Debug, Clone)]
pub struct Backward {
    pub layers: Vec<LayerGradient>,
    pub input: Vec<f64>,
}

/// Numerical spot checks of the structural guarantees.
#[derive(Debug, Clone, Serialize)]
pub struct CertificationReport {
    pub layer_gram_residuals: Vec<f64>,
    pub gram_tolerance: f64,
    pub on_manifold: bool,
    pub max_firm_defect: f64,
    pub pairs_checked: usize,
    pub chain_averagedness: f64,
    pub gamma: f64,
}

/// A chain of building blocks with identical geometry, plus the residual
/// scale gamma used by the denoising interface.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    gamma: f64,
}

impl Network {
    pub fn new(layers: Vec<Layer>, gamma: f64) -> Result<Self> {
        ensure!(!layers.is_empty(), "a network needs at least one layer");
        ensure!(
            gamma.is_finite() && gamma > 0.0,
            "residual scale gamma must be positive, got {gamma}"
        );
        let first = &layers[0];
        for (k, layer) in layers.iter().enumerate().skip(1) {
            ensure!(
                layer.bank.geometry() == first.bank.geometry()
                    && layer.bank.m1() == first.bank.m1()
                    && layer.bank.m2() == first.bank.m2()
                    && layer.bank.support() == first.bank.support(),
                "layer {k} geometry differs from layer 0"
            );
            ensure!(
                layer.act.kind == first.act.kind,
                "layer {k} activation kind differs from layer 0"
            );
        }
        Ok(Network { layers, gamma })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        ensure!(
            gamma.is_finite() && gamma > 0.0,
            "residual scale gamma must be positive, got {gamma}"
        );
        self.gamma = gamma;
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        self.layers[0].bank.geometry()
    }

    pub fn support(&self) -> Support {
        self.layers[0].bank.support()
    }

    pub fn hidden_channels(&self) -> usize {
        self.layers[0].bank.m1()
    }

    pub fn stream_channels(&self) -> usize {
        self.layers[0].bank.m2()
    }

    /// Stream length: channel count times positions per channel.
    pub fn stream_len(&self) -> usize {
        self.layers[0].bank.input_len()
    }

    /// Single-channel signal length seen by the denoising interface.
    pub fn signal_len(&self) -> usize {
        self.geometry().cell_size()
    }

    /// Hash of every quantity the backward pass depends on. A tape whose
    /// fingerprint no longer matches is stale and must not be replayed.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        let g = self.geometry();
        h.write_u64(g.cell_size() as u64);
        h.write_u64(g.dims() as u64);
        h.write_u64(self.layers[0].bank.m1() as u64);
        h.write_u64(self.layers[0].bank.m2() as u64);
        h.write_u64(match self.support() {
            Support::Window { l } => l as u64 + 1,
            Support::Full => 0,
        });
        h.write_u64(self.layers.len() as u64);
        h.write_u64(self.gamma.to_bits());
        for layer in &self.layers {
            h.write_u64(layer.act.kind as u64);
            h.write_u64(layer.act.alpha.to_bits());
            for &b in &layer.bias {
                h.write_u64(b.to_bits());
            }
            for &t in layer.bank.taps() {
                h.write_u64(t.to_bits());
            }
        }
        h.finish()
    }

    /// Runs the chain on a stream, recording pre-activations for backward.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        ensure!(
            input.len() == self.stream_len(),
            "input length {} does not match stream length {}",
            input.len(),
            self.stream_len()
        );
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut z = input.to_vec();
        for layer in &self.layers {
            let u = layer.pre_activation(&z);
            let mut s = u.clone();
            for v in &mut s {
                *v = layer.act.eval(*v);
            }
            let mut out = vec![0.0; layer.bank.input_len()];
            layer.bank.apply_adjoint(&s, &mut out);
            z = out;
            pre.push(u);
        }
        let tape = Tape {
            input: input.to_vec(),
            pre,
            fingerprint: self.fingerprint(),
        };
        Ok((z, tape))
    }

    /// Pulls an output-side direction back through the chain recorded on the
    /// tape, producing parameter gradients and the input gradient.
    ///
    /// Layer inputs are replayed from the stored pre-activations rather than
    /// stored during forward, keeping the tape at one hidden vector per
    /// layer.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<Backward> {
        if tape.fingerprint != self.fingerprint() {
            return Err(Error::contract(format!(
                "tape fingerprint {:#018x} does not match network {:#018x}; \
                 re-run forward after any parameter change",
                tape.fingerprint,
                self.fingerprint()
            )));
        }
        ensure!(
            upstream.len() == self.stream_len(),
            "upstream length {} does not match stream length {}",
            upstream.len(),
            self.stream_len()
        );

        let k_layers = self.layers.len();
        // replay: layer inputs x_k and activations s_k from the tape
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(k_layers);
        let mut ss: Vec<Vec<f64>> = Vec::with_capacity(k_layers);
        xs.push(tape.input.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut s = tape.pre[k].clone();
            for v in &mut s {
                *v = layer.act.eval(*v);
            }
            if k + 1 < k_layers {
                let mut next = vec![0.0; layer.bank.input_len()];
                layer.bank.apply_adjoint(&s, &mut next);
                xs.push(next);
            }
            ss.push(s);
        }

        let mut grads: Vec<LayerGradient> = self
            .layers
            .iter()
            .map(|layer| LayerGradient {
                taps: vec![0.0; layer.bank.taps().len()],
                bias: vec![0.0; layer.bank.m1()],
                alpha: 0.0,
            })
            .collect();

        let cell = self.geometry().cell_size();
        let mut g = upstream.to_vec();
        for k in (0..k_layers).rev() {
            let layer = &self.layers[k];
            // output map z = T'^t s: gradient on s plus tap contribution
            let mut h = vec![0.0; layer.bank.output_len()];
            layer.bank.apply(&g, &mut h);
            layer
                .bank
                .tap_correlation_accumulate(&ss[k], &g, &mut grads[k].taps);
            // through the activation
            let pre = &tape.pre[k];
            let mut alpha_grad = 0.0;
            let mut delta = h;
            for (v, &u) in delta.iter_mut().zip(pre.iter()) {
                alpha_grad += *v * layer.act.alpha_deriv(u);
                *v *= layer.act.deriv(u);
            }
            grads[k].alpha = alpha_grad;
            // pre-activation u = T' x + b
            for (c, bg) in grads[k].bias.iter_mut().enumerate() {
                *bg = delta[c * cell..(c + 1) * cell].iter().sum();
            }
            layer
                .bank
                .tap_correlation_accumulate(&delta, &xs[k], &mut grads[k].taps);
            let mut g_prev = vec![0.0; layer.bank.input_len()];
            layer.bank.apply_adjoint(&delta, &mut g_prev);
            g = g_prev;
        }

        Ok(Backward {
            layers: grads,
            input: g,
        })
    }

    /// Replicates a single-channel signal into the stream, scaled so the
    /// replication map is an isometry onto its range.
    pub fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cell = self.signal_len();
        ensure!(
            x.len() == cell,
            "signal length {} does not match {}",
            x.len(),
            cell
        );
        let m2 = self.stream_channels();
        let scale = 1.0 / (m2 as f64).sqrt();
        let mut out = vec![0.0; m2 * cell];
        for c in 0..m2 {
            for (o, &v) in out[c * cell..(c + 1) * cell].iter_mut().zip(x.iter()) {
                *o = scale * v;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Network::lift`]: averages the channels back down.
    pub fn unlift(&self, stream: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            stream.len() == self.stream_len(),
            "stream length {} does not match {}",
            stream.len(),
            self.stream_len()
        );
        let cell = self.signal_len();
        let m2 = self.stream_channels();
        let scale = 1.0 / (m2 as f64).sqrt();
        let mut out = vec![0.0; cell];
        for c in 0..m2 {
            for (o, &v) in out.iter_mut().zip(stream[c * cell..(c + 1) * cell].iter()) {
                *o += scale * v;
            }
        }
        Ok(out)
    }

    /// The residual map the denoiser subtracts: unlift(chain(lift(x))).
    pub fn residual(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let (out, tape) = self.forward(&self.lift(x)?)?;
        Ok((self.unlift(&out)?, tape))
    }

    /// Pulls a signal-side direction back through the residual map.
    pub fn residual_backward(&self, tape: &Tape, upstream: &[f64]) -> Result<Backward> {
        let mut bw = self.backward(tape, &self.lift(upstream)?)?;
        bw.input = self.unlift(&bw.input)?;
        Ok(bw)
    }

    /// denoise(x) = x - gamma * residual(x).
    pub fn denoise(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (r, _) = self.residual(x)?;
        Ok(x.iter().zip(r.iter()).map(|(&v, &w)| v - self.gamma * w).collect())
    }

    /// Like [`Network::denoise`] but keeps the tape for transposed-Jacobian
    /// products.
    pub fn denoise_with_tape(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let (r, tape) = self.residual(x)?;
        let out = x
            .iter()
            .zip(r.iter())
            .map(|(&v, &w)| v - self.gamma * w)
            .collect();
        Ok((out, tape))
    }

    /// Transposed-Jacobian product of the denoiser at the tape's input:
    /// w - gamma * J_residual^t w.
    pub fn denoise_vjp(&self, tape: &Tape, w: &[f64]) -> Result<Vec<f64>> {
        let bw = self.residual_backward(tape, w)?;
        Ok(w.iter()
            .zip(bw.input.iter())
            .map(|(&v, &g)| v - self.gamma * g)
            .collect())
    }

    /// Re-plants windowed filters on a longer period. Taps, biases, and
    /// activations carry over bit-exactly; only the period changes.
    pub fn extend(&self, new_period: usize) -> Result<Network> {
        let l = match self.support() {
            Support::Window { l } => l,
            Support::Full => {
                return Err(Error::validation(
                    "full-support filters are tied to their training length and cannot be re-planted",
                ))
            }
        };
        let old = self.geometry();
        ensure!(
            new_period >= old.period(),
            "new period {new_period} is shorter than the current period {}",
            old.period()
        );
        let geometry = match old {
            Geometry::OneD { .. } => Geometry::OneD { m: new_period },
            Geometry::TwoD { .. } => Geometry::TwoD { m: new_period },
        };
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let bank = FilterBank::new(
                    geometry,
                    layer.bank.m1(),
                    layer.bank.m2(),
                    Support::Window { l },
                    layer.bank.taps().to_vec(),
                )?;
                Layer::new(bank, layer.bias.clone(), layer.act)
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers, self.gamma)
    }

    /// Spot-checks the structural guarantees: per-layer orthogonality
    /// residuals and an empirical firm-nonexpansiveness defect
    /// max(|Bx - By|^2 - <Bx - By, x - y>) over sampled pairs.
    pub fn certify(&self, pairs: usize, seed: u64) -> Result<CertificationReport> {
        let gram_tolerance = 1e-6;
        let layer_gram_residuals: Vec<f64> =
            self.layers.iter().map(|l| l.gram_residual()).collect();
        let on_manifold = layer_gram_residuals.iter().all(|&r| r <= gram_tolerance);

        let mut rng = crate::rng::Rng::new(seed);
        let n = self.stream_len();
        let mut max_defect = f64::NEG_INFINITY;
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        for _ in 0..pairs.max(1) {
            rng.fill_normal(&mut x);
            rng.fill_normal(&mut y);
            for layer in &self.layers {
                let bx = layer.building_block(&x)?;
                let by = layer.building_block(&y)?;
                let mut diff_sq = 0.0;
                let mut inner = 0.0;
                for i in 0..n {
                    let d = bx[i] - by[i];
                    diff_sq += d * d;
                    inner += d * (x[i] - y[i]);
                }
                max_defect = max_defect.max(diff_sq - inner);
            }
        }

        let k = self.layers.len() as f64;
        Ok(CertificationReport {
            layer_gram_residuals,
            gram_tolerance,
            on_manifold,
            max_firm_defect: max_defect,
            pairs_checked: pairs.max(1),
            chain_averagedness: k / (k + 1.0),
            gamma: self.gamma,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = CheckpointJson::from_network(self);
        crate::serial::write_json_file(path, &json)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Network> {
        let text = std::fs::read_to_string(path)?;
        let json: CheckpointJson = serde_json::from_str(&text)?;
        json.into_network()
    }
}

/// FNV-1a, 64 bit.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointGeometry {
    k: usize,
    m: usize,
    m1: usize,
    m2: usize,
    l: Option<usize>,
    dims: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointActivation {
    kind: String,
    alphas: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    filters: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// On-disk network format, schema version 1.
#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    version: u32,
    geometry: CheckpointGeometry,
    gamma: f64,
    activation: CheckpointActivation,
    layers: Vec<CheckpointLayer>,
}

impl CheckpointJson {
    fn from_network(net: &Network) -> Self {
        let g = net.geometry();
        let first = &net.layers[0];
        CheckpointJson {
            version: 1,
            geometry: CheckpointGeometry {
                k: net.layer_count(),
                m: g.period(),
                m1: first.bank.m1(),
                m2: first.bank.m2(),
                l: first.bank.half_width(),
                dims: g.dims(),
            },
            gamma: net.gamma,
            activation: CheckpointActivation {
                kind: first.act.kind.name().to_string(),
                alphas: net.layers.iter().map(|l| l.act.alpha).collect(),
            },
            layers: net
                .layers
                .iter()
                .map(|layer| CheckpointLayer {
                    filters: (0..layer.bank.m1())
                        .flat_map(|j| {
                            (0..layer.bank.m2()).map(move |i| layer.bank.cell(j, i).to_vec())
                        })
                        .collect(),
                    bias: layer.bias.clone(),
                })
                .collect(),
        }
    }

    fn into_network(self) -> Result<Network> {
        ensure!(
            self.version == 1,
            "unsupported checkpoint version {} (expected 1)",
            self.version
        );
        let g = &self.geometry;
        ensure!(g.k >= 1, "checkpoint declares zero layers");
        ensure!(
            self.layers.len() == g.k && self.activation.alphas.len() == g.k,
            "checkpoint layer count mismatch: geometry says {}, found {} layers and {} alphas",
            g.k,
            self.layers.len(),
            self.activation.alphas.len()
        );
        let geometry = match g.dims {
            1 => Geometry::OneD { m: g.m },
            2 => Geometry::TwoD { m: g.m },
            d => return Err(Error::validation(format!("unsupported dims {d}"))),
        };
        let support = match g.l {
            Some(l) => Support::Window { l },
            None => Support::Full,
        };
        let kind = ActivationKind::from_name(&self.activation.kind)?;
        let layers = self
            .layers
            .into_iter()
            .zip(self.activation.alphas.iter())
            .map(|(layer, &alpha)| {
                ensure!(
                    layer.filters.len() == g.m1 * g.m2,
                    "checkpoint filter grid has {} entries, expected {}",
                    layer.filters.len(),
                    g.m1 * g.m2
                );
                let mut taps = Vec::with_capacity(layer.filters.len() * support.tap_len(geometry));
                for f in &layer.filters {
                    ensure!(
                        f.len() == support.tap_len(geometry),
                        "checkpoint filter has {} taps, expected {}",
                        f.len(),
                        support.tap_len(geometry)
                    );
                    taps.extend_from_slice(f);
                }
                let bank = FilterBank::new(geometry, g.m1, g.m2, support, taps)?;
                Layer::new(bank, layer.bias, Activation::new(kind, alpha)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers, self.gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn stream_bank(m: usize, m1: usize, m2: usize, l: usize, rng: &mut Rng) -> FilterBank {
        let geometry = Geometry::OneD { m };
        let support = Support::Window { l };
        let mut taps = vec![0.0; m1 * m2 * (2 * l + 1)];
        rng.fill_normal(&mut taps);
        for t in &mut taps {
            *t *= 0.3;
        }
        FilterBank::new(geometry, m1, m2, support, taps).unwrap()
    }

    fn small_network(kind: ActivationKind, alpha: f64, seed: u64) -> Network {
        let mut rng = Rng::new(seed);
        let act = Activation::new(kind, alpha).unwrap();
        let layers = (0..2)
            .map(|_| {
                let bank = stream_bank(8, 2, 2, 1, &mut rng);
                let mut bias = vec![0.0; 2];
                rng.fill_normal(&mut bias);
                Layer::new(bank, bias, act).unwrap()
            })
            .collect();
        Network::new(layers, 1.5).unwrap()
    }

    #[test]
    fn scalar_block_by_hand() {
        // period 1, one channel: block(z) = c * sigma(c z + b)
        let geometry = Geometry::OneD { m: 1 };
        let bank = FilterBank::new(geometry, 1, 1, Support::Full, vec![0.5]).unwrap();
        let layer = Layer::new(
            bank,
            vec![1.0],
            Activation::new(ActivationKind::Linear, 1.0).unwrap(),
        )
        .unwrap();
        let out = layer.building_block(&[2.0]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // loss L = 0.5 |chain(z) - y|^2; smooth activations only, since
        // finite differences are meaningless across kinks
        for kind in [
            ActivationKind::Linear,
            ActivationKind::BentIdentity,
            ActivationKind::Elliot,
            ActivationKind::Isru,
            ActivationKind::Isrlu,
        ] {
            let mut net = small_network(kind, 0.7, 42);
            let mut rng = Rng::new(99);
            let mut z = vec![0.0; net.stream_len()];
            let mut y = vec![0.0; net.stream_len()];
            rng.fill_normal(&mut z);
            rng.fill_normal(&mut y);

            let loss = |net: &Network, z: &[f64]| -> f64 {
                let (out, _) = net.forward(z).unwrap();
                0.5 * out
                    .iter()
                    .zip(y.iter())
                    .map(|(&o, &t)| (o - t) * (o - t))
                    .sum::<f64>()
            };

            let (out, tape) = net.forward(&z).unwrap();
            let upstream: Vec<f64> = out.iter().zip(y.iter()).map(|(&o, &t)| o - t).collect();
            let bw = net.backward(&tape, &upstream).unwrap();

            let h = 1e-5;
            let rel = |analytic: f64, fd: f64| {
                (analytic - fd).abs() / (1.0 + analytic.abs().max(fd.abs()))
            };

            // tap gradients
            for k in 0..net.layer_count() {
                for idx in [0usize, 3, 7] {
                    let base = net.layers()[k].bank().taps()[idx];
                    net.layers_mut()[k].bank_mut().taps_mut()[idx] = base + h;
                    let up = loss(&net, &z);
                    net.layers_mut()[k].bank_mut().taps_mut()[idx] = base - h;
                    let down = loss(&net, &z);
                    net.layers_mut()[k].bank_mut().taps_mut()[idx] = base;
                    let fd = (up - down) / (2.0 * h);
                    assert!(
                        rel(bw.layers[k].taps[idx], fd) < 1e-5,
                        "{kind:?} tap grad layer {k} idx {idx}: {} vs {fd}",
                        bw.layers[k].taps[idx]
                    );
                }
                // bias gradient
                let base = net.layers()[k].bias()[1];
                net.layers_mut()[k].bias_mut()[1] = base + h;
                let up = loss(&net, &z);
                net.layers_mut()[k].bias_mut()[1] = base - h;
                let down = loss(&net, &z);
                net.layers_mut()[k].bias_mut()[1] = base;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel(bw.layers[k].bias[1], fd) < 1e-5,
                    "{kind:?} bias grad layer {k}: {} vs {fd}",
                    bw.layers[k].bias[1]
                );
                // alpha gradient
                if kind.has_parameter() {
                    let base = net.layers()[k].activation().alpha;
                    net.layers_mut()[k].set_alpha(base + h).unwrap();
                    let up = loss(&net, &z);
                    net.layers_mut()[k].set_alpha(base - h).unwrap();
                    let down = loss(&net, &z);
                    net.layers_mut()[k].set_alpha(base).unwrap();
                    let fd = (up - down) / (2.0 * h);
                    assert!(
                        rel(bw.layers[k].alpha, fd) < 1e-5,
                        "{kind:?} alpha grad layer {k}: {} vs {fd}",
                        bw.layers[k].alpha
                    );
                }
            }

            // input gradient
            for idx in [0usize, 5, 11] {
                let base = z[idx];
                z[idx] = base + h;
                let up = loss(&net, &z);
                z[idx] = base - h;
                let down = loss(&net, &z);
                z[idx] = base;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel(bw.input[idx], fd) < 1e-5,
                    "{kind:?} input grad idx {idx}: {} vs {fd}",
                    bw.input[idx]
                );
            }
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = small_network(ActivationKind::Isru, 1.0, 7);
        let z = vec![0.25; net.stream_len()];
        let (_, tape) = net.forward(&z).unwrap();
        net.layers_mut()[0].bank_mut().taps_mut()[0] += 1e-9;
        let upstream = vec![1.0; net.stream_len()];
        let err = net.backward(&tape, &upstream).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }

    #[test]
    fn lift_unlift_is_an_isometry_pair() {
        let net = small_network(ActivationKind::Relu, 1.0, 3);
        let mut rng = Rng::new(11);
        let mut x = vec![0.0; net.signal_len()];
        rng.fill_normal(&mut x);
        let lifted = net.lift(&x).unwrap();
        let norm_x: f64 = x.iter().map(|v| v * v).sum();
        let norm_l: f64 = lifted.iter().map(|v| v * v).sum();
        assert!((norm_x - norm_l).abs() < 1e-12);
        let back = net.unlift(&lifted).unwrap();
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn on_manifold_linear_identity_denoises_to_zero_at_unit_gamma() {
        // taps (0.6, 0.8) on two hidden channels of a single stream channel:
        // T'^t T' = 1, so with a linear activation and zero bias the residual
        // is the identity and denoise at gamma = 1 annihilates the input
        let geometry = Geometry::OneD { m: 16 };
        let bank = FilterBank::new(
            geometry,
            2,
            1,
            Support::Window { l: 0 },
            vec![0.6, 0.8],
        )
        .unwrap();
        let layer = Layer::new(
            bank,
            vec![0.0; 2],
            Activation::new(ActivationKind::Linear, 1.0).unwrap(),
        )
        .unwrap();
        let net = Network::new(vec![layer], 1.0).unwrap();
        let mut rng = Rng::new(5);
        let mut x = vec![0.0; 16];
        rng.fill_normal(&mut x);
        let out = net.denoise(&x).unwrap();
        for v in out {
            assert!(v.abs() < 1e-12);
        }
        let report = net.certify(20, 1).unwrap();
        assert!(report.on_manifold);
        assert!(report.max_firm_defect < 1e-10, "{}", report.max_firm_defect);
    }

    #[test]
    fn extend_preserves_taps_bit_exactly() {
        let net = small_network(ActivationKind::SoftThreshold, 0.5, 21);
        let wide = net.extend(64).unwrap();
        assert_eq!(wide.geometry().period(), 64);
        for (a, b) in net.layers().iter().zip(wide.layers().iter()) {
            assert_eq!(a.bank().taps(), b.bank().taps());
            assert_eq!(a.bias(), b.bias());
        }
        assert!(net.extend(4).is_err());

        let geometry = Geometry::OneD { m: 4 };
        let bank =
            FilterBank::new(geometry, 1, 1, Support::Full, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let layer = Layer::new(
            bank,
            vec![0.0],
            Activation::new(ActivationKind::Relu, 1.0).unwrap(),
        )
        .unwrap();
        let full = Network::new(vec![layer], 1.0).unwrap();
        assert!(full.extend(8).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = small_network(ActivationKind::Elliot, 0.9, 33);
        net.save_checkpoint(&path).unwrap();
        let loaded = Network::load_checkpoint(&path).unwrap();
        assert_eq!(net.fingerprint(), loaded.fingerprint());

        // version gate
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replace("\"version\": 1", "\"version\": 2");
        std::fs::write(&path, bumped).unwrap();
        let err = Network::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn residual_backward_agrees_with_lifted_chain() {
        let net = small_network(ActivationKind::BentIdentity, 0.8, 55);
        let mut rng = Rng::new(4);
        let mut x = vec![0.0; net.signal_len()];
        let mut w = vec![0.0; net.signal_len()];
        rng.fill_normal(&mut x);
        rng.fill_normal(&mut w);

        let (r, tape) = net.residual(&x).unwrap();
        let bw = net.residual_backward(&tape, &w).unwrap();

        // finite-difference directional derivative of <w, residual(x)>
        let h = 1e-6;
        let mut dir = vec![0.0; net.signal_len()];
        rng.fill_normal(&mut dir);
        let xp: Vec<f64> = x.iter().zip(dir.iter()).map(|(&a, &d)| a + h * d).collect();
        let xm: Vec<f64> = x.iter().zip(dir.iter()).map(|(&a, &d)| a - h * d).collect();
        let (rp, _) = net.residual(&xp).unwrap();
        let (rm, _) = net.residual(&xm).unwrap();
        let fd: f64 = rp
            .iter()
            .zip(rm.iter())
            .zip(w.iter())
            .map(|((&p, &m), &wv)| wv * (p - m) / (2.0 * h))
            .sum();
        let an: f64 = bw.input.iter().zip(dir.iter()).map(|(&g, &d)| g * d).sum();
        assert!(
            (fd - an).abs() < 1e-6 * (1.0 + an.abs()),
            "directional derivative mismatch: {an} vs {fd}"
        );
        assert_eq!(r.len(), net.signal_len());
    }
}
