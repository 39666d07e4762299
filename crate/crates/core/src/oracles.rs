//! Brute-force reference implementations for checking the fast paths.
//!
//! Nothing here calls into `fields`, `objectives` or the tape; each
//! quantity is recomputed from raw voxel loops or scalar formulas.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{DisplacementField, LabelMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub h: f64,
    /// Largest accepted [`relative_error`].
    pub tolerance: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { h: 1e-5, tolerance: 1e-4 }
    }
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NumericAbort(format!("function is not finite near coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, and 0 when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = na.max(nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Hard Dice in percent by explicit per-class voxel counting.
pub fn brute_dice(a: &LabelMap, b: &LabelMap) -> f64 {
    let [dn, hn, wn] = a.dims();
    let mut top = 0u16;
    for d in 0..dn {
        for h in 0..hn {
            for w in 0..wn {
                top = top.max(a.get(d, h, w)).max(b.get(d, h, w));
            }
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in 1..=top {
        let (mut in_a, mut in_b, mut both) = (0usize, 0usize, 0usize);
        for d in 0..dn {
            for h in 0..hn {
                for w in 0..wn {
                    let x = a.get(d, h, w) == class;
                    let y = b.get(d, h, w) == class;
                    in_a += x as usize;
                    in_b += y as usize;
                    both += (x && y) as usize;
                }
            }
        }
        if in_a + in_b > 0 {
            total += 100.0 * 2.0 * both as f64 / (in_a + in_b) as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        100.0
    } else {
        total / counted as f64
    }
}

/// Percentage of voxels whose Jacobian `I + ∇u` has a negative
/// determinant, with forward differences (the last difference repeated at
/// the trailing edge) and the rule of Sarrus.
pub fn brute_njd(u: &DisplacementField) -> f64 {
    let [dn, hn, wn] = u.dims();
    let ext = [dn, hn, wn];
    let mut negative = 0usize;
    for d in 0..dn {
        for h in 0..hn {
            for w in 0..wn {
                let p = [d, h, w];
                let mut j = [[0.0f64; 3]; 3];
                for axis in 0..3 {
                    let mut lo = p;
                    let mut hi = p;
                    if p[axis] + 1 < ext[axis] {
                        hi[axis] += 1;
                    } else {
                        lo[axis] -= 1;
                    }
                    let a = u.at(lo[0], lo[1], lo[2]);
                    let b = u.at(hi[0], hi[1], hi[2]);
                    for c in 0..3 {
                        j[c][axis] = b[c] - a[c] + if c == axis { 1.0 } else { 0.0 };
                    }
                }
                let det = j[0][0] * j[1][1] * j[2][2] + j[0][1] * j[1][2] * j[2][0] + j[0][2] * j[1][0] * j[2][1]
                    - j[0][2] * j[1][1] * j[2][0]
                    - j[0][0] * j[1][2] * j[2][1]
                    - j[0][1] * j[1][0] * j[2][2];
                if det < 0.0 {
                    negative += 1;
                }
            }
        }
    }
    100.0 * negative as f64 / (dn * hn * wn) as f64
}

/// Log-density of a univariate normal at `x`.
pub fn normal_log_density(x: f64, mean: f64, std: f64) -> f64 {
    let r = (x - mean) / std;
    -0.5 * r * r - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Sum of per-dimension normal log-densities with std `τ·exp(log σ_i)`.
pub fn factorized_log_density(z: &[f64], mu: &[f64], log_sigma: &[f64], tau: f64) -> f64 {
    z.iter()
        .zip(mu)
        .zip(log_sigma)
        .map(|((&x, &m), &ls)| normal_log_density(x, m, tau * ls.exp()))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub std_unscaled: f64,
    pub std_scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
    /// Least-squares slope of `ln std_unscaled` against `ln N`.
    pub exponent: f64,
}

impl ProbeTable {
    /// `max / min` of the scaled series.
    pub fn scaled_ratio(&self) -> f64 {
        let it = self.rows.iter().map(|r| r.std_scaled);
        let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = it.fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// Monte-Carlo spread of group-centred log-likelihoods under a standard
/// normal policy (μ = 0, σ = 1, τ = 1).
///
/// Each trajectory's unscaled log-likelihood is `−Σ_i ½(ε_i² + ln 2π)`;
/// the pooled within-group standard deviation is reported without scaling
/// and with `s = √N`.
pub fn ldvn_variance_probe(ns: &[usize], groups: usize, j: usize, seed: u64) -> Result<ProbeTable> {
    if j < 2 || groups == 0 || ns.is_empty() || ns.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "probe needs J >= 2, groups >= 1 and positive N (got J={j}, groups={groups}, N={ns:?})"
        )));
    }
    let half_log_two_pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut rows = Vec::with_capacity(ns.len());
    for (k, &n) in ns.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
        let mut sq = 0.0;
        let mut group = vec![0.0; j];
        for _ in 0..groups {
            for g in group.iter_mut() {
                let mut acc = 0.0;
                for _ in 0..n {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    acc += 0.5 * e * e + half_log_two_pi;
                }
                *g = -acc;
            }
            let mean = group.iter().sum::<f64>() / j as f64;
            sq += group.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>();
        }
        let std_unscaled = (sq / (groups * j) as f64).sqrt();
        rows.push(ProbeRow {
            n,
            std_unscaled,
            std_scaled: std_unscaled / (n as f64).sqrt(),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.std_unscaled.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let exponent = if sxx > 0.0 { sxy / sxx } else { f64::NAN };
    Ok(ProbeTable { rows, exponent })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_examples() {
        let sq = |t: &Tensor| Ok(t.data().iter().map(|x| x * x).sum::<f64>());
        let g = fd_gradient(sq, &Tensor::from_vec(vec![1.0, 2.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let c = fd_gradient(|_| Ok(3.0), &Tensor::from_vec(vec![0.5; 3]), 1e-5).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));
        let s = fd_gradient(|t| Ok(t.sum()), &Tensor::from_vec(vec![-4.0, 0.1, 7.0]), 1e-5).unwrap();
        assert!(s.data().iter().all(|&x| (x - 1.0).abs() < 1e-9));
        assert!(fd_gradient(|t| Ok(t.data()[0].ln()), &Tensor::from_vec(vec![0.0]), 1e-5).is_err());
        assert!(fd_gradient(|_| Ok(0.0), &Tensor::from_vec(vec![0.0]), 0.0).is_err());
    }

    #[test]
    fn brute_metrics_basics() {
        let l = LabelMap::new([2, 2, 2], vec![0, 1, 2, 2, 0, 0, 1, 3]).unwrap();
        assert_eq!(brute_dice(&l, &l), 100.0);
        assert_eq!(brute_dice(&LabelMap::zeros([2, 2, 2]), &LabelMap::zeros([2, 2, 2])), 100.0);
        assert_eq!(brute_njd(&DisplacementField::zeros([3, 3, 3])), 0.0);
    }

    #[test]
    fn scalar_density() {
        assert!((normal_log_density(0.0, 0.0, 1.0) + 0.918_938_533_204_672_7).abs() < 1e-15);
        let v = factorized_log_density(&[0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], 1.0);
        assert!((v - (-2.0 * 0.918_938_533_204_672_7 - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn probe_single_dimension_is_unscaled() {
        let t = ldvn_variance_probe(&[1, 4], 32, 6, 1).unwrap();
        assert_eq!(t.rows[0].std_scaled, t.rows[0].std_unscaled);
        assert!(ldvn_variance_probe(&[1], 4, 1, 0).is_err());
    }
}
