//! Encoder–decoder backbone with a Gaussian latent policy at the bottleneck.
//!
//! The encoder maps the concatenated `[moving, fixed]` pair to multi-scale
//! features `f_1 .. f_L`. Two 1×1×1 heads turn the top feature `f_L` into a
//! bounded mean `μ = λ·tanh(W_μ f_L)` and a clipped log-std. The decoder
//! consumes a latent `z` in place of `f_L`, upsamples, fuses the skip
//! features `f_1 .. f_{L-1}` and emits a 3-channel displacement field from a
//! zero-initialised flow head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::fields::{DisplacementField, Volume};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub levels: usize,
    /// Feature channels per encoder level, finest first.
    pub channels: Vec<usize>,
    pub in_channels: usize,
    /// Bound on |μ|.
    pub lambda_scale: f64,
    /// Clip range for the log-std head.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub leaky_slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            channels: vec![8, 16, 32],
            in_channels: 2,
            lambda_scale: 10.0,
            sigma_min: -10.0,
            sigma_max: 3.0,
            leaky_slope: 0.2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::InvalidArgument(format!(
                "backbone needs one channel count per level ({} levels, {} counts)",
                self.levels,
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if !(self.lambda_scale > 0.0) || !(self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidArgument(
                "need lambda_scale > 0 and sigma_min < sigma_max".into(),
            ));
        }
        Ok(())
    }

    /// Spatial downsampling between the input and the latent grid.
    pub fn latent_stride(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input_dims(&self, dims: [usize; 3]) -> Result<()> {
        let s = self.latent_stride();
        if dims.iter().any(|&e| e == 0 || e % s != 0) {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: format!("every extent must be divisible by {s}"),
            });
        }
        Ok(())
    }

    /// Latent dimensionality `N = C_L · D_L · H_L · W_L` for a given input.
    pub fn latent_dim(&self, dims: [usize; 3]) -> usize {
        let s = self.latent_stride();
        self.channels[self.levels - 1] * dims.iter().map(|e| e / s).product::<usize>()
    }
}

/// Named trainable tensors, addressed by [`ParamId`] (their index).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value with the same-named entry of `other`; names and
    /// shapes must agree exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (i, (name, value)) in other.iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} is '{name}', expected '{}'",
                    self.names[i]
                )));
            }
            if value.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    value.shape(),
                    self.values[i].shape()
                )));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

/// Parameters placed on one tape; index-aligned with the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

/// Output of the encoder for one pair.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Skip features `f_1 .. f_{L-1}`, finest first.
    pub skips: Vec<Var>,
    pub mu: Var,
    pub log_sigma: Var,
}

/// The Gaussian policy over latents at the bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPolicy {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub lambda_scale: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub tau: f64,
}

impl LatentPolicy {
    /// Latent dimensionality N.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    config: BackboneConfig,
    params: ParamStore,
    encoder: Vec<ConvLayer>,
    mu_head: ConvLayer,
    log_sigma_head: ConvLayer,
    /// Decoder fuse layers, coarsest first (level L-1 down to 1).
    decoder: Vec<ConvLayer>,
    flow: ConvLayer,
}

impl Network {
    /// Builds a freshly initialised network. Conv weights are drawn from a
    /// scaled normal; the flow head starts at zero so the initial field is
    /// the identity, and the log-std head starts at zero (σ = 1).
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let slope = config.leaky_slope;
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();

        let mut conv = |params: &mut ParamStore,
                        name: &str,
                        c_out: usize,
                        c_in: usize,
                        k: usize,
                        stride: usize,
                        std_scale: f64| {
            let fan_in = (c_in * k * k * k) as f64;
            let std = std_scale / fan_in.sqrt();
            let n = c_out * c_in * k * k * k;
            let data: Vec<f64> = if std > 0.0 {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            } else {
                vec![0.0; n]
            };
            let weight = params.push(
                format!("{name}.weight"),
                Tensor::new(&[c_out, c_in, k, k, k], data).expect("kernel shape"),
            );
            let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
            ConvLayer {
                weight,
                bias,
                stride,
                padding: k / 2,
            }
        };

        let mut encoder = Vec::with_capacity(config.levels);
        let mut c_prev = config.in_channels;
        for (l, &c) in config.channels.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            encoder.push(conv(&mut params, &format!("enc{}", l + 1), c, c_prev, 3, stride, gain));
            c_prev = c;
        }
        let c_top = config.channels[config.levels - 1];
        let mu_head = conv(&mut params, "mu_head", c_top, c_top, 1, 1, 1.0);
        let log_sigma_head = conv(&mut params, "log_sigma_head", c_top, c_top, 1, 1, 0.0);

        let mut decoder = Vec::new();
        let mut c_up = c_top;
        for l in (0..config.levels - 1).rev() {
            let c = config.channels[l];
            decoder.push(conv(&mut params, &format!("dec{}", l + 1), c, c_up + c, 3, 1, gain));
            c_up = c;
        }
        let flow = conv(&mut params, "flow", 3, config.channels[0], 3, 1, 0.0);

        Ok(Self {
            config,
            params,
            encoder,
            mu_head,
            log_sigma_head,
            decoder,
            flow,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter ids of the μ-head weight and bias.
    pub fn mu_head_params(&self) -> (ParamId, ParamId) {
        (self.mu_head.weight, self.mu_head.bias)
    }

    pub fn log_sigma_head_params(&self) -> (ParamId, ParamId) {
        (self.log_sigma_head.weight, self.log_sigma_head.bias)
    }

    pub fn flow_head_params(&self) -> (ParamId, ParamId) {
        (self.flow.weight, self.flow.bias)
    }

    /// Registers every parameter on the tape as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            (0..self.params.len())
                .map(|id| tape.param(id, self.params.get(id).clone()))
                .collect(),
        )
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(
            (0..self.params.len())
                .map(|id| tape.constant(self.params.get(id).clone()))
                .collect(),
        )
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, layer: &ConvLayer, x: Var) -> Result<Var> {
        tape.conv3d(x, p.0[layer.weight], Some(p.0[layer.bias]), layer.stride, layer.padding)
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, moving: &Volume, fixed: &Volume) -> Result<Encoded> {
        if moving.dims() != fixed.dims() {
            return Err(Error::shape(moving.tensor().shape(), fixed.tensor().shape()));
        }
        self.config.check_input_dims(moving.dims())?;
        if self.config.in_channels != 2 {
            return Err(Error::InvalidArgument("pair encoding expects in_channels = 2".into()));
        }
        let x = Tensor::concat_channels(&[moving.tensor(), fixed.tensor()])?;
        let mut h = tape.constant(x);
        let mut skips = Vec::with_capacity(self.config.levels - 1);
        for (l, layer) in self.encoder.iter().enumerate() {
            let c = self.apply(tape, p, layer, h)?;
            h = tape.leaky_relu(c, self.config.leaky_slope);
            if l + 1 < self.config.levels {
                skips.push(h);
            }
        }
        let m = self.apply(tape, p, &self.mu_head, h)?;
        let m = tape.tanh(m);
        let mu = tape.scale(m, self.config.lambda_scale);
        let s = self.apply(tape, p, &self.log_sigma_head, h)?;
        let log_sigma = tape.clip(s, self.config.sigma_min, self.config.sigma_max)?;
        Ok(Encoded { skips, mu, log_sigma })
    }

    /// Decodes a latent into a `(3, D, H, W)` displacement field node.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, skips: &[Var], z: Var) -> Result<Var> {
        if skips.len() != self.config.levels - 1 {
            return Err(Error::InvalidArgument(format!(
                "decoder expects {} skip features, got {}",
                self.config.levels - 1,
                skips.len()
            )));
        }
        let expect_c = self.config.channels[self.config.levels - 1];
        if tape.value(z).rank() != 4 || tape.value(z).shape()[0] != expect_c {
            return Err(Error::InvalidShape {
                shape: tape.value(z).shape().to_vec(),
                reason: format!("latent must be ({expect_c}, D_L, H_L, W_L)"),
            });
        }
        let mut h = z;
        for (layer, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = tape.upsample(h, 2)?;
            if tape.value(up).shape()[1..] != tape.value(skip).shape()[1..] {
                return Err(Error::shape(tape.value(up).shape(), tape.value(skip).shape()));
            }
            let cat = tape.concat_channels(&[up, skip])?;
            let c = self.apply(tape, p, layer, cat)?;
            h = tape.leaky_relu(c, self.config.leaky_slope);
        }
        self.apply(tape, p, &self.flow, h)
    }

    pub fn policy(&self, tape: &Tape, enc: &Encoded, tau: f64) -> LatentPolicy {
        LatentPolicy {
            mu: tape.value(enc.mu).clone(),
            log_sigma: tape.value(enc.log_sigma).clone(),
            lambda_scale: self.config.lambda_scale,
            sigma_min: self.config.sigma_min,
            sigma_max: self.config.sigma_max,
            tau,
        }
    }

    /// Deterministic forward pass (`z = μ`): policy and step field.
    pub fn predict(&self, moving: &Volume, fixed: &Volume) -> Result<(LatentPolicy, DisplacementField)> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let enc = self.encode(&mut tape, &p, moving, fixed)?;
        let u = self.decode(&mut tape, &p, &enc.skips, enc.mu)?;
        let policy = self.policy(&tape, &enc, 0.0);
        Ok((policy, DisplacementField::new(tape.value(u).clone())?))
    }
}

/// A standard-normal tensor drawn from a seeded ChaCha8 stream.
pub fn standard_normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Reparameterised sample `z = μ + τ·σ⊙ε`. Returns `(z, ε)`; with `τ = 0`
/// `z` is a bit-exact copy of `μ`.
pub fn sample_latent(p: &LatentPolicy, seed: u64) -> Result<(Tensor, Tensor)> {
    if !(p.tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be >= 0, got {}", p.tau)));
    }
    let eps = standard_normal(p.mu.shape(), seed);
    if p.tau == 0.0 {
        return Ok((p.mu.clone(), eps));
    }
    let mut z = p.mu.clone();
    for ((zi, ls), e) in z.data_mut().iter_mut().zip(p.log_sigma.data()).zip(eps.data()) {
        *zi += p.tau * ls.exp() * e;
    }
    Ok((z, eps))
}

/// Tape version of the reparameterised sample, differentiable in μ and
/// log σ with `ε` held fixed.
pub fn reparameterize(tape: &mut Tape, mu: Var, log_sigma: Var, eps: &Tensor, tau: f64) -> Result<Var> {
    if tau == 0.0 {
        return Ok(mu);
    }
    let sigma = tape.exp(log_sigma);
    let e = tape.constant(eps.scale(tau));
    let noise = tape.mul(sigma, e)?;
    tape.add(mu, noise)
}

fn check_log_pi_args(tau: f64, s: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "log-likelihood needs temperature > 0, got {tau}"
        )));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("scale s must be > 0, got {s}")));
    }
    Ok(())
}

/// Scaled Gaussian log-likelihood
/// `−(1/2s)·Σ_i [((z_i − μ_i)/(τσ_i))² + log(2π τ² σ_i²)]`.
pub fn log_pi(p: &LatentPolicy, z: &Tensor, s: f64) -> Result<f64> {
    check_log_pi_args(p.tau, s)?;
    if z.shape() != p.mu.shape() {
        return Err(Error::shape(z.shape(), p.mu.shape()));
    }
    let tau2 = p.tau * p.tau;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut acc = 0.0;
    for ((zi, mi), ls) in z.data().iter().zip(p.mu.data()).zip(p.log_sigma.data()) {
        let var = tau2 * (2.0 * ls).exp();
        acc += (zi - mi) * (zi - mi) / var + (two_pi * var).ln();
    }
    Ok(-acc / (2.0 * s))
}

/// Tape version of [`log_pi`]; `z` enters as a constant so gradients reach
/// only μ and log σ.
pub fn log_pi_var(tape: &mut Tape, mu: Var, log_sigma: Var, z: &Tensor, tau: f64, s: f64) -> Result<Var> {
    check_log_pi_args(tau, s)?;
    if z.shape() != tape.value(mu).shape() {
        return Err(Error::shape(z.shape(), tape.value(mu).shape()));
    }
    let n = z.len() as f64;
    let zc = tape.constant(z.clone());
    let diff = tape.sub(zc, mu)?;
    let d2 = tape.square(diff);
    let m2 = tape.scale(log_sigma, -2.0);
    let inv_var = tape.exp(m2);
    let q = tape.mul(d2, inv_var)?;
    let quad = tape.sum(q);
    let quad = tape.scale(quad, 1.0 / (tau * tau));
    let ls_sum = tape.sum(log_sigma);
    let ls_sum = tape.scale(ls_sum, 2.0);
    let total = tape.add(quad, ls_sum)?;
    let total = tape.add_scalar(total, n * (2.0 * std::f64::consts::PI * tau * tau).ln());
    Ok(tape.scale(total, -1.0 / (2.0 * s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(dims: [usize; 3]) -> (Volume, Volume) {
        let n: usize = dims.iter().product();
        let m = Volume::from_data(dims, (0..n).map(|i| ((i * 13 % 17) as f64) / 17.0).collect()).unwrap();
        let f = Volume::from_data(dims, (0..n).map(|i| ((i * 7 % 11) as f64) / 11.0).collect()).unwrap();
        (m, f)
    }

    #[test]
    fn encode_decode_shapes() {
        let net = Network::new(BackboneConfig::default(), 1).unwrap();
        let (m, f) = pair([16, 16, 16]);
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let enc = net.encode(&mut tape, &p, &m, &f).unwrap();
        assert_eq!(tape.value(enc.skips[0]).shape(), &[8, 16, 16, 16]);
        assert_eq!(tape.value(enc.skips[1]).shape(), &[16, 8, 8, 8]);
        assert_eq!(tape.value(enc.mu).shape(), &[32, 4, 4, 4]);
        let u = net.decode(&mut tape, &p, &enc.skips, enc.mu).unwrap();
        assert_eq!(tape.value(u).shape(), &[3, 16, 16, 16]);
        // zero flow head: identity transform
        assert!(tape.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_extent() {
        let net = Network::new(BackboneConfig::default(), 1).unwrap();
        let (m, f) = pair([16, 16, 10]);
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        assert!(matches!(
            net.encode(&mut tape, &p, &m, &f),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn zero_mu_head_gives_zero_mean() {
        let mut net = Network::new(BackboneConfig::default(), 3).unwrap();
        let (w, b) = net.mu_head_params();
        net.params_mut().get_mut(w).data_mut().fill(0.0);
        net.params_mut().get_mut(b).data_mut().fill(0.0);
        let (m, f) = pair([8, 8, 8]);
        let (policy, _) = net.predict(&m, &f).unwrap();
        assert!(policy.mu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn policy_outputs_respect_bounds() {
        let cfg = BackboneConfig {
            lambda_scale: 0.5,
            sigma_min: -0.01,
            sigma_max: 0.01,
            ..BackboneConfig::default()
        };
        let mut net = Network::new(cfg, 5).unwrap();
        let (w, _) = net.log_sigma_head_params();
        net.params_mut().get_mut(w).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin());
        let (w, _) = net.mu_head_params();
        net.params_mut().get_mut(w).data_mut().iter_mut().for_each(|v| *v *= 50.0);
        let (m, f) = pair([8, 8, 8]);
        let (policy, _) = net.predict(&m, &f).unwrap();
        assert!(policy.mu.max_abs() <= 0.5);
        assert!(policy.log_sigma.data().iter().all(|&v| (-0.01..=0.01).contains(&v)));
    }

    #[test]
    fn zero_temperature_sample_is_mean() {
        let p = LatentPolicy {
            mu: Tensor::from_vec(vec![-0.0, 1.5, -2.25]),
            log_sigma: Tensor::from_vec(vec![0.3, -1.0, 2.0]),
            lambda_scale: 10.0,
            sigma_min: -10.0,
            sigma_max: 3.0,
            tau: 0.0,
        };
        let (z, _) = sample_latent(&p, 9).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&z), bits(&p.mu));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = LatentPolicy {
            mu: Tensor::zeros(&[4, 2, 2, 2]),
            log_sigma: Tensor::zeros(&[4, 2, 2, 2]),
            lambda_scale: 10.0,
            sigma_min: -10.0,
            sigma_max: 3.0,
            tau: 1.0,
        };
        assert_eq!(sample_latent(&p, 11).unwrap(), sample_latent(&p, 11).unwrap());
        assert_ne!(sample_latent(&p, 11).unwrap().0, sample_latent(&p, 12).unwrap().0);
    }

    #[test]
    fn log_pi_scalar_values() {
        let mut p = LatentPolicy {
            mu: Tensor::scalar(0.0),
            log_sigma: Tensor::scalar(0.0),
            lambda_scale: 10.0,
            sigma_min: -10.0,
            sigma_max: 3.0,
            tau: 1.0,
        };
        let v = log_pi(&p, &Tensor::scalar(0.0), 1.0).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((v - (-0.9189385332046727)).abs() < 1e-12);

        let z = Tensor::scalar(0.7);
        assert_eq!(log_pi(&p, &z, 2.0).unwrap(), 0.5 * log_pi(&p, &z, 1.0).unwrap());

        p.tau = 0.0;
        assert!(log_pi(&p, &z, 1.0).is_err());
    }

    #[test]
    fn log_pi_at_mean_drops_quadratic() {
        let p = LatentPolicy {
            mu: Tensor::from_vec(vec![0.2, -0.4]),
            log_sigma: Tensor::from_vec(vec![0.1, -0.3]),
            lambda_scale: 10.0,
            sigma_min: -10.0,
            sigma_max: 3.0,
            tau: 0.8,
        };
        let s = 3.0;
        let expect: f64 = -p
            .log_sigma
            .data()
            .iter()
            .map(|ls| (2.0 * std::f64::consts::PI * 0.64 * (2.0 * ls).exp()).ln())
            .sum::<f64>()
            / (2.0 * s);
        assert!((log_pi(&p, &p.mu, s).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn log_pi_tape_matches_value() {
        let p = LatentPolicy {
            mu: Tensor::from_vec(vec![0.2, -0.4, 1.0]),
            log_sigma: Tensor::from_vec(vec![0.1, -0.3, 0.5]),
            lambda_scale: 10.0,
            sigma_min: -10.0,
            sigma_max: 3.0,
            tau: 0.6,
        };
        let z = Tensor::from_vec(vec![0.5, 0.1, -0.2]);
        let mut tape = Tape::new();
        let mu = tape.variable(p.mu.clone());
        let ls = tape.variable(p.log_sigma.clone());
        let lp = log_pi_var(&mut tape, mu, ls, &z, p.tau, 2.5).unwrap();
        assert!((tape.value(lp).item() - log_pi(&p, &z, 2.5).unwrap()).abs() < 1e-12);
    }
}
