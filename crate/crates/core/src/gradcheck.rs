//! Finite-difference checks of every differentiable tape operation and of
//! the composite training losses.
//!
//! Each [`GradCase`] records a scalar graph over a few input tensors. The
//! reverse-mode gradient w.r.t. each input is compared with
//! [`oracles::fd_gradient`] by [`oracles::relative_error`]. Inputs are drawn
//! away from the kinks of `clip`, `leaky_relu` and trilinear sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::fields::{LabelMap, Volume};
use crate::grpo;
use crate::network;
use crate::objectives::{self, WarmupWeights};
use crate::oracles::{fd_gradient, relative_error};
use crate::tensor::Tensor;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Minimum distance of sampled inputs from any kink.
pub const KINK_MARGIN: f64 = 1e-3;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl GradCase {
    fn new(name: impl Into<String>, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        GradCase {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    }

    /// Relative error of the tape gradient against central differences,
    /// one entry per input.
    pub fn errors(&self, h: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let mut errs = Vec::with_capacity(self.inputs.len());
        for (k, x) in self.inputs.iter().enumerate() {
            let mut probe = self.inputs.clone();
            let numeric = fd_gradient(
                |xk| {
                    probe[k] = xk.clone();
                    self.eval(&probe)
                },
                x,
                h,
            )?;
            errs.push(relative_error(&grads.wrt_or_zero(vars[k]), &numeric));
        }
        Ok(errs)
    }
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.0.gen_range(lo..hi)).collect()).expect("shape")
    }

    /// Uniform in `(lo, hi)` but at least [`KINK_MARGIN`] from every kink.
    fn avoiding(&mut self, shape: &[usize], lo: f64, hi: f64, kinks: &[f64]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let x = self.0.gen_range(lo..hi);
                if kinks.iter().all(|k| (x - k).abs() > KINK_MARGIN) {
                    break x;
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape")
    }

    /// Displacements in `±(margin, 0.5 − margin)` so sample points never sit
    /// on a grid plane.
    fn field(&mut self, n: usize) -> Tensor {
        let len = 3 * n * n * n;
        let data = (0..len)
            .map(|_| {
                let m = self.0.gen_range(KINK_MARGIN..0.5 - KINK_MARGIN);
                if self.0.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(&[3, n, n, n], data).expect("shape")
    }

    fn labels(&mut self, n: usize, classes: u16) -> LabelMap {
        let data = (0..n * n * n).map(|_| self.0.gen_range(0..=classes)).collect();
        LabelMap::new([n, n, n], data).expect("dims")
    }
}

/// Reduces any tensor node to a scalar through a fixed random projection so
/// every output element contributes a distinct weight.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = Sampler(ChaCha8Rng::seed_from_u64(seed)).uniform(&shape, -1.0, 1.0);
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

/// Every differentiable operation and composite loss on `n³` grids
/// (`n` even, at least 4).
pub fn catalogue(n: usize, seed: u64) -> Vec<GradCase> {
    let mut s = Sampler(ChaCha8Rng::seed_from_u64(seed));
    let vol = [2, n, n, n];
    let mut cases = Vec::new();

    macro_rules! unary {
        ($name:expr, $input:expr, |$t:ident, $a:ident| $body:expr) => {{
            let input = $input;
            cases.push(GradCase::new($name, vec![input], move |$t: &mut Tape, v: &[Var]| {
                let $a = v[0];
                let y = $body;
                project($t, y, 1)
            }));
        }};
    }
    macro_rules! binary {
        ($name:expr, $a_in:expr, $b_in:expr, |$t:ident, $a:ident, $b:ident| $body:expr) => {{
            let inputs = vec![$a_in, $b_in];
            cases.push(GradCase::new($name, inputs, move |$t: &mut Tape, v: &[Var]| {
                let ($a, $b) = (v[0], v[1]);
                let y = $body;
                project($t, y, 2)
            }));
        }};
    }

    binary!("add", s.uniform(&vol, -1.0, 1.0), s.uniform(&vol, -1.0, 1.0), |t, a, b| t.add(a, b)?);
    binary!("sub", s.uniform(&vol, -1.0, 1.0), s.uniform(&vol, -1.0, 1.0), |t, a, b| t.sub(a, b)?);
    binary!("mul", s.uniform(&vol, -1.0, 1.0), s.uniform(&vol, -1.0, 1.0), |t, a, b| t.mul(a, b)?);
    binary!("div", s.uniform(&vol, -1.0, 1.0), s.uniform(&vol, 0.5, 2.0), |t, a, b| t.div(a, b)?);
    unary!("neg", s.uniform(&vol, -1.0, 1.0), |t, a| t.neg(a));
    unary!("scale", s.uniform(&vol, -1.0, 1.0), |t, a| t.scale(a, -2.5));
    unary!("add_scalar", s.uniform(&vol, -1.0, 1.0), |t, a| t.add_scalar(a, 0.7));
    unary!("exp", s.uniform(&vol, -2.0, 2.0), |t, a| t.exp(a));
    unary!("log", s.uniform(&vol, 0.2, 3.0), |t, a| t.log(a));
    unary!("tanh", s.uniform(&vol, -2.0, 2.0), |t, a| t.tanh(a));
    unary!("square", s.uniform(&vol, -1.0, 1.0), |t, a| t.square(a));
    unary!("clip", s.avoiding(&vol, -2.0, 2.0, &[-1.0, 1.0]), |t, a| t.clip(a, -1.0, 1.0)?);
    unary!("leaky_relu", s.avoiding(&vol, -1.0, 1.0, &[0.0]), |t, a| t.leaky_relu(a, 0.2));
    unary!("sum", s.uniform(&vol, -1.0, 1.0), |t, a| {
        let x = t.square(a);
        t.sum(x)
    });
    unary!("mean", s.uniform(&vol, -1.0, 1.0), |t, a| {
        let x = t.square(a);
        t.mean(x)
    });
    unary!("sum_spatial", s.uniform(&vol, -1.0, 1.0), |t, a| t.sum_spatial(a)?);
    unary!("upsample", s.uniform(&[2, n / 2, n / 2, n / 2], -1.0, 1.0), |t, a| t.upsample(a, 2)?);
    binary!("concat_channels", s.uniform(&vol, -1.0, 1.0), s.uniform(&[1, n, n, n], -1.0, 1.0), |t, a, b| {
        t.concat_channels(&[a, b])?
    });
    for axis in 0..3 {
        unary!(format!("forward_diff[{axis}]"), s.uniform(&vol, -1.0, 1.0), |t, a| t.forward_diff(a, axis)?);
    }
    for stride in [1, 2] {
        let inputs = vec![
            s.uniform(&vol, -1.0, 1.0),
            s.uniform(&[3, 2, 3, 3, 3], -0.5, 0.5),
            s.uniform(&[3], -0.5, 0.5),
        ];
        cases.push(GradCase::new(format!("conv3d[stride {stride}]"), inputs, move |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), stride, 1)?;
            project(t, y, 3)
        }));
    }
    binary!("warp", s.uniform(&vol, 0.0, 1.0), s.field(n), |t, src, u| t.warp(src, u)?);

    let c = 4;
    let lat = [c, n / 2, n / 2, n / 2];
    let eps = s.uniform(&lat, -2.0, 2.0);
    binary!("reparameterize", s.uniform(&lat, -1.0, 1.0), s.uniform(&lat, -1.0, 0.5), |t, mu, ls| {
        network::reparameterize(t, mu, ls, &eps, 0.7)?
    });
    let z = s.uniform(&lat, -2.0, 2.0);
    binary!("log_pi", s.uniform(&lat, -1.0, 1.0), s.uniform(&lat, -1.0, 0.5), |t, mu, ls| {
        network::log_pi_var(t, mu, ls, &z, 0.8, 12.0)?
    });
    binary!("kl", s.uniform(&lat, -1.0, 1.0), s.uniform(&lat, -1.0, 0.5), |t, mu, ls| objectives::kl_var(t, mu, ls)?);
    binary!("mse", s.uniform(&vol, 0.0, 1.0), s.uniform(&vol, 0.0, 1.0), |t, a, b| objectives::mse_var(t, a, b)?);
    unary!("diffusion", s.uniform(&[3, n, n, n], -1.0, 1.0), |t, u| objectives::diffusion_var(t, u)?);
    binary!("compose", s.field(n).scale(0.5), s.field(n).scale(0.5), |t, p, u| grpo::compose_var(t, p, u)?);

    let classes = 3;
    let fixed_labels = s.labels(n, classes as u16);
    let moving_labels = s.labels(n, classes as u16);
    let g = fixed_labels.one_hot(classes).expect("labels");
    let m = moving_labels.one_hot(classes).expect("labels");
    {
        let (g, m) = (g.clone(), m.clone());
        cases.push(GradCase::new("loss: soft dice", vec![s.field(n)], move |t, v| {
            objectives::soft_dice_var(t, &g, &m, v[0])
        }));
    }

    let fixed = Volume::new(s.uniform(&[1, n, n, n], 0.0, 1.0)).expect("volume");
    let moving = Volume::new(s.uniform(&[1, n, n, n], 0.0, 1.0)).expect("volume");
    let weights = WarmupWeights::default();
    {
        let (f, mv) = (fixed.clone(), moving.clone());
        let inputs = vec![s.field(n), s.uniform(&lat, -1.0, 1.0), s.uniform(&lat, -1.0, 0.5)];
        cases.push(GradCase::new("loss: warm-up", inputs, move |t, v| {
            Ok(objectives::warmup_var(t, &f, &mv, v[0], v[0], v[1], v[2], &weights)?.total)
        }));
    }

    // Policy term over J latents, warm-up term on the composed z = μ field
    // and mean Dice over the J composed step fields. Inputs: μ, log σ, the
    // z = μ step field and one step field per trajectory. Positive
    // displacements keep every composed sample point off the grid planes.
    let j = 3;
    let zs: Vec<Tensor> = (0..j).map(|_| s.uniform(&lat, -2.0, 2.0)).collect();
    let adv = grpo::advantages(&[0.3, -1.2, 0.8], 1e-8).expect("J >= 2");
    let field = [3, n, n, n];
    let prev = s.uniform(&field, 0.05, 0.2);
    let mut inputs = vec![s.uniform(&lat, -1.0, 1.0), s.uniform(&lat, -1.0, 0.5)];
    inputs.extend((0..=j).map(|_| s.uniform(&field, 0.05, 0.25)));
    cases.push(GradCase::new("loss: grpo total", inputs, move |t, v| {
        let (mu, ls) = (v[0], v[1]);
        let rel = grpo::relative_log_likelihood_vars(t, mu, ls, &zs, 0.9, (lat.iter().product::<usize>() as f64).sqrt())?;
        let policy = grpo::policy_loss_var(t, &adv, &rel)?;
        let p = t.constant(prev.clone());
        let total0 = grpo::compose_var(t, p, v[2])?;
        let warm = objectives::warmup_var(t, &fixed, &moving, total0, v[2], mu, ls, &weights)?.total;
        let mut dice = Vec::with_capacity(j);
        for &u in &v[3..] {
            let p = t.constant(prev.clone());
            let total = grpo::compose_var(t, p, u)?;
            dice.push(objectives::soft_dice_var(t, &g, &m, total)?);
        }
        grpo::grpo_total_loss_var(t, policy, warm, &dice, 0.8, 5.0)
    }));
    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::FdConfig;

    #[test]
    fn every_case_matches_finite_differences_on_4_cubed() {
        let fd = FdConfig::default();
        for case in catalogue(4, 5) {
            for (k, e) in case.errors(fd.h).unwrap().into_iter().enumerate() {
                assert!(e <= fd.tolerance, "{} input {k}: relative error {e:.3e}", case.name);
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        let case = GradCase::new("detached square", vec![Tensor::from_vec(vec![0.5, -1.5])], |t, v| {
            let d = t.detach(v[0]);
            let y = t.mul(v[0], d)?;
            Ok(t.sum(y))
        });
        // The tape sees d(x·stop(x))/dx = x; the function's slope is 2x.
        assert!((case.errors(1e-5).unwrap()[0] - 0.5).abs() < 1e-6);
    }
}
