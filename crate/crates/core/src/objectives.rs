//! Loss terms and overlap metrics.
//!
//! Each differentiable loss comes in two forms: a plain function over
//! tensors and a `*_var` builder that records the same expression on a
//! [`Tape`]. Reductions are means so weights carry over across grid sizes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fields::{self, DisplacementField, Interpolation, LabelMap, Volume};
use crate::network::LatentPolicy;
use crate::tensor::Tensor;

/// Smoothing constant of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupWeights {
    pub lambda_reg: f64,
    pub beta_kl: f64,
}

impl Default for WarmupWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 0.1,
            beta_kl: 0.01,
        }
    }
}

impl WarmupWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_reg", self.lambda_reg), ("beta_kl", self.beta_kl)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub fn mse_similarity(fixed: &Volume, warped: &Volume) -> Result<f64> {
    let d = fixed.tensor().sub(warped.tensor())?;
    Ok(d.data().iter().map(|x| x * x).sum::<f64>() / d.len() as f64)
}

pub fn mse_var(tape: &mut Tape, fixed: Var, warped: Var) -> Result<Var> {
    let d = tape.sub(fixed, warped)?;
    let d2 = tape.square(d);
    Ok(tape.mean(d2))
}

/// `(1/3)·Σ_axis mean((∂_axis u)²)` over all three components, with forward
/// differences.
pub fn diffusion_regularizer(u: &DisplacementField) -> Result<f64> {
    let mut total = 0.0;
    for axis in 0..3 {
        let g = fields::forward_diff(u.tensor(), axis)?;
        total += g.data().iter().map(|x| x * x).sum::<f64>() / g.len() as f64;
    }
    Ok(total / 3.0)
}

pub fn diffusion_var(tape: &mut Tape, u: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for axis in 0..3 {
        let g = tape.forward_diff(u, axis)?;
        let g2 = tape.square(g);
        terms.push(tape.mean(g2));
    }
    let s = tape.add(terms[0], terms[1])?;
    let s = tape.add(s, terms[2])?;
    Ok(tape.scale(s, 1.0 / 3.0))
}

/// Per-dimension KL of the factorised Gaussian to `N(0, I)`:
/// `(1/2N)·Σ_i (μ_i² + σ_i² − log σ_i² − 1)`. Temperature is not involved.
pub fn kl_to_standard_normal(p: &LatentPolicy) -> f64 {
    kl_terms(&p.mu, &p.log_sigma)
}

fn kl_terms(mu: &Tensor, log_sigma: &Tensor) -> f64 {
    let s: f64 = mu
        .data()
        .iter()
        .zip(log_sigma.data())
        .map(|(m, ls)| m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0)
        .sum();
    s / (2.0 * mu.len() as f64)
}

pub fn kl_var(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let m2 = tape.square(mu);
    let two_ls = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_ls);
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, two_ls)?;
    let b = tape.add_scalar(b, -1.0);
    let m = tape.mean(b);
    Ok(tape.scale(m, 0.5))
}

fn check_labels(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(&a.dims(), &b.dims()));
    }
    Ok(())
}

/// Soft Dice loss between fixed labels and moving labels warped by `u`.
/// Moving labels are one-hot encoded and every channel is warped
/// trilinearly. `classes` counts foreground classes.
pub fn soft_dice_loss(fixed: &LabelMap, moving: &LabelMap, u: &DisplacementField, classes: usize) -> Result<f64> {
    check_labels(fixed, moving)?;
    let g = fixed.one_hot(classes)?;
    let p = fields::sample_trilinear(&moving.one_hot(classes)?, u.tensor())?;
    let plane = g.len() / classes;
    let mut dice = 0.0;
    for k in 0..classes {
        let pk = &p.data()[k * plane..(k + 1) * plane];
        let gk = &g.data()[k * plane..(k + 1) * plane];
        let inter: f64 = pk.iter().zip(gk).map(|(a, b)| a * b).sum();
        let sp: f64 = pk.iter().sum();
        let sg: f64 = gk.iter().sum();
        dice += (2.0 * inter + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH);
    }
    Ok(1.0 - dice / classes as f64)
}

/// Tape version of [`soft_dice_loss`] over pre-encoded one-hot tensors.
pub fn soft_dice_var(tape: &mut Tape, fixed_onehot: &Tensor, moving_onehot: &Tensor, field: Var) -> Result<Var> {
    if fixed_onehot.shape() != moving_onehot.shape() {
        return Err(Error::shape(fixed_onehot.shape(), moving_onehot.shape()));
    }
    let g = tape.constant(fixed_onehot.clone());
    let src = tape.constant(moving_onehot.clone());
    let p = tape.warp(src, field)?;
    let pg = tape.mul(p, g)?;
    let inter = tape.sum_spatial(pg)?;
    let sp = tape.sum_spatial(p)?;
    let sg = tape.sum_spatial(g)?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let den = tape.add(sp, sg)?;
    let den = tape.add_scalar(den, DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Hard Dice in percent, averaged over foreground classes `1..=K` where
/// `K` is the largest label present in either map. Classes absent from both
/// maps are skipped; a class present in only one map scores 0. Two maps
/// with no foreground at all score 100.
pub fn hard_dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    check_labels(a, b)?;
    let k = a.max_label().max(b.max_label()) as usize;
    let mut inter = vec![0usize; k + 1];
    let mut ca = vec![0usize; k + 1];
    let mut cb = vec![0usize; k + 1];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ca[x as usize] += 1;
        cb[y as usize] += 1;
        if x == y {
            inter[x as usize] += 1;
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 1..=k {
        if ca[c] + cb[c] == 0 {
            continue;
        }
        total += 100.0 * 2.0 * inter[c] as f64 / (ca[c] + cb[c]) as f64;
        counted += 1;
    }
    Ok(if counted == 0 { 100.0 } else { total / counted as f64 })
}

/// Warm-up objective `mse + λ_reg·diffusion + β_KL·KL` for a field `u`
/// produced from `z = μ`.
pub fn warmup_loss(
    fixed: &Volume,
    moving: &Volume,
    u: &DisplacementField,
    policy: &LatentPolicy,
    weights: &WarmupWeights,
) -> Result<f64> {
    weights.validate()?;
    let warped = fields::warp_volume(moving, u, Interpolation::Trilinear)?;
    Ok(mse_similarity(fixed, &warped)?
        + weights.lambda_reg * diffusion_regularizer(u)?
        + weights.beta_kl * kl_to_standard_normal(policy))
}

/// Tape nodes of the warm-up objective and its three components.
#[derive(Debug, Clone, Copy)]
pub struct WarmupTerms {
    pub total: Var,
    pub similarity: Var,
    pub regularizer: Var,
    pub kl: Var,
}

/// Records the warm-up objective. `field` deforms `moving` onto `fixed`;
/// `smooth_field` is the field the regulariser sees (the same node unless
/// the caller composes fields).
#[allow(clippy::too_many_arguments)]
pub fn warmup_var(
    tape: &mut Tape,
    fixed: &Volume,
    moving: &Volume,
    field: Var,
    smooth_field: Var,
    mu: Var,
    log_sigma: Var,
    weights: &WarmupWeights,
) -> Result<WarmupTerms> {
    weights.validate()?;
    let f = tape.constant(fixed.tensor().clone());
    let m = tape.constant(moving.tensor().clone());
    let warped = tape.warp(m, field)?;
    let similarity = mse_var(tape, f, warped)?;
    let regularizer = diffusion_var(tape, smooth_field)?;
    let kl = kl_var(tape, mu, log_sigma)?;
    let r = tape.scale(regularizer, weights.lambda_reg);
    let k = tape.scale(kl, weights.beta_kl);
    let total = tape.add(similarity, r)?;
    let total = tape.add(total, k)?;
    Ok(WarmupTerms {
        total,
        similarity,
        regularizer,
        kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(mu: Vec<f64>, ls: Vec<f64>) -> LatentPolicy {
        LatentPolicy {
            mu: Tensor::from_vec(mu),
            log_sigma: Tensor::from_vec(ls),
            lambda_scale: 10.0,
            sigma_min: -10.0,
            sigma_max: 3.0,
            tau: 0.0,
        }
    }

    #[test]
    fn mse_basics() {
        let a = Volume::filled([2, 2, 2], 0.0);
        let b = Volume::filled([2, 2, 2], 1.0);
        assert_eq!(mse_similarity(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_similarity(&a, &b).unwrap(), 1.0);
        let c = Volume::filled([2, 2, 3], 1.0);
        assert!(mse_similarity(&a, &c).is_err());
    }

    #[test]
    fn diffusion_basics() {
        let dims = [4, 4, 4];
        assert_eq!(diffusion_regularizer(&DisplacementField::zeros(dims)).unwrap(), 0.0);
        let c = DisplacementField::constant(dims, [0.3, -1.0, 2.0]);
        assert_eq!(diffusion_regularizer(&c).unwrap(), 0.0);
        let ramp = DisplacementField::from_fn(dims, |_, _, w| [0.0, 0.0, w as f64]);
        let gw = fields::forward_diff(ramp.tensor(), 2).unwrap();
        // the w-component differences along w are all exactly 1
        let plane = gw.len() / 3;
        assert!(gw.data()[2 * plane..].iter().all(|&v| v == 1.0));
        // one of three components, one of three axes
        assert!((diffusion_regularizer(&ramp).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert!(diffusion_regularizer(&DisplacementField::zeros([1, 4, 4])).is_err());
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_to_standard_normal(&policy(vec![0.0; 5], vec![0.0; 5])), 0.0);
        assert!((kl_to_standard_normal(&policy(vec![1.0], vec![0.0])) - 0.5).abs() < 1e-15);
        let p = policy(vec![0.3, -1.2, 0.0], vec![0.5, -0.7, 1.1]);
        assert!(kl_to_standard_normal(&p) > 0.0);
    }

    fn blocks(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> u16) -> LabelMap {
        let mut data = Vec::new();
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        LabelMap::new(dims, data).unwrap()
    }

    #[test]
    fn soft_dice_overlap_cases() {
        let dims = [4, 4, 8];
        let zero = DisplacementField::zeros(dims);
        let a = blocks(dims, |_, _, w| u16::from(w < 4));
        assert!(soft_dice_loss(&a, &a, &zero, 1).unwrap() <= 1e-4);
        let b = blocks(dims, |_, _, w| u16::from(w >= 4));
        assert!((soft_dice_loss(&a, &b, &zero, 1).unwrap() - 1.0).abs() < 1e-6);
        // equal-size masks sharing half their voxels: Dice = 1/2
        let c = blocks(dims, |_, _, w| u16::from((2..6).contains(&w)));
        assert!((soft_dice_loss(&a, &c, &zero, 1).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn soft_dice_two_thirds() {
        // |A| = |B| = 3 voxels per row, |A ∩ B| = 2: Dice = 2·2/6 = 2/3
        let dims = [2, 2, 4];
        let zero = DisplacementField::zeros(dims);
        let a = blocks(dims, |_, _, w| u16::from(w < 3));
        let b = blocks(dims, |_, _, w| u16::from(w >= 1));
        let loss = soft_dice_loss(&a, &b, &zero, 1).unwrap();
        assert!((loss - 1.0 / 3.0).abs() < 1e-6);
        assert!((hard_dice(&a, &b).unwrap() - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_tape_matches_value() {
        let dims = [4, 4, 4];
        let a = blocks(dims, |d, h, _| u16::from(d < 2) + u16::from(h < 2));
        let b = blocks(dims, |d, _, w| u16::from(w < 2) + u16::from(d > 1));
        let u = DisplacementField::from_fn(dims, |d, h, w| [0.3 * (h as f64).sin(), 0.2, -0.1 * (d + w) as f64 / 4.0]);
        let v = soft_dice_loss(&a, &b, &u, 2).unwrap();
        let mut tape = Tape::new();
        let f = tape.variable(u.tensor().clone());
        let l = soft_dice_var(&mut tape, &a.one_hot(2).unwrap(), &b.one_hot(2).unwrap(), f).unwrap();
        assert!((tape.value(l).item() - v).abs() < 1e-12);
    }

    #[test]
    fn hard_dice_cases() {
        let dims = [3, 3, 3];
        let a = blocks(dims, |d, h, w| ((d + h + w) % 4) as u16);
        assert_eq!(hard_dice(&a, &a).unwrap(), 100.0);
        let x = blocks(dims, |d, _, _| if d == 0 { 1 } else { 0 });
        let y = blocks(dims, |d, _, _| if d == 2 { 1 } else { 0 });
        assert_eq!(hard_dice(&x, &y).unwrap(), 0.0);
        // class 2 only in one map counts as 0; class 1 perfect
        let p = blocks(dims, |d, _, _| if d == 0 { 1 } else { 0 });
        let q = blocks(dims, |d, _, _| match d {
            0 => 1,
            1 => 2,
            _ => 0,
        });
        assert_eq!(hard_dice(&p, &q).unwrap(), 50.0);
        assert_eq!(hard_dice(&LabelMap::zeros(dims), &LabelMap::zeros(dims)).unwrap(), 100.0);
    }

    #[test]
    fn warmup_degenerate_cases() {
        let dims = [4, 4, 4];
        let n = 64;
        let m = Volume::from_data(dims, (0..n).map(|i| (i as f64 / 7.0).sin().abs()).collect()).unwrap();
        let zero = DisplacementField::zeros(dims);
        let p0 = policy(vec![0.0; 8], vec![0.0; 8]);
        let w = WarmupWeights::default();
        assert_eq!(warmup_loss(&m, &m, &zero, &p0, &w).unwrap(), 0.0);

        let f = Volume::from_data(dims, (0..n).map(|i| (i as f64 / 5.0).cos().abs()).collect()).unwrap();
        let u = DisplacementField::from_fn(dims, |d, h, _| [0.2 * h as f64 / 4.0, -0.3, 0.1 * d as f64]);
        let p = policy(vec![0.5, -0.2], vec![0.1, -0.4]);
        let none = WarmupWeights {
            lambda_reg: 0.0,
            beta_kl: 0.0,
        };
        let warped = fields::warp_volume(&m, &u, Interpolation::Trilinear).unwrap();
        assert_eq!(warmup_loss(&f, &m, &u, &p, &none).unwrap(), mse_similarity(&f, &warped).unwrap());
        assert!(WarmupWeights { lambda_reg: -1.0, beta_kl: 0.0 }.validate().is_err());
    }
}
