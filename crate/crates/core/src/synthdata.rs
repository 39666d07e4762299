//! Labeled synthetic registration pairs.
//!
//! A scene is a set of labeled ellipsoids with per-class textures. The
//! moving image is the rendered scene; the fixed image is the moving image
//! warped by a smooth sum of Gaussian displacement bumps, optionally under
//! an independent smooth intensity bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{self, DisplacementField, Interpolation, LabelMap, Volume};

const MARGIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Foreground class in `1..=classes`.
    pub class: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub dims: [usize; 3],
    pub classes: usize,
    /// Explicit shapes. When empty, one ellipsoid per class is drawn from
    /// the seed.
    pub shapes: Vec<Ellipsoid>,
    pub background: f64,
    /// Base intensity per foreground class; missing entries are spread
    /// evenly over `(background, 1]`.
    pub class_intensity: Vec<f64>,
    /// Relative amplitude of the low-frequency texture modulation.
    pub modulation: f64,
    pub noise_std: f64,
    /// Relative amplitude of a smooth multiplicative bias applied to the
    /// fixed image only.
    pub bias: f64,
    pub bumps: usize,
    /// Largest displacement magnitude in voxels.
    pub amplitude: f64,
    /// Gaussian bump width σ_b in voxels.
    pub bump_width: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            dims: [16, 16, 16],
            classes: 3,
            shapes: Vec::new(),
            background: 0.1,
            class_intensity: Vec::new(),
            modulation: 0.3,
            noise_std: 0.0,
            bias: 0.0,
            bumps: 4,
            amplitude: 2.5,
            bump_width: 3.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dims.iter().any(|&d| (d as f64) < 2.0 * MARGIN + 2.0) {
            return bad(format!("grid {:?} too small for a {MARGIN}-voxel margin", self.dims));
        }
        if self.classes == 0 || self.classes > u16::MAX as usize {
            return bad(format!("classes must be in 1..=65535, got {}", self.classes));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad(format!("amplitude must be finite and >= 0, got {}", self.amplitude));
        }
        if !(self.bump_width > 0.0 && self.bump_width.is_finite()) {
            return bad(format!("bump width must be > 0, got {}", self.bump_width));
        }
        if self.amplitude > self.bump_width {
            return bad(format!(
                "amplitude {} exceeds bump width {}; generated fields could fold",
                self.amplitude, self.bump_width
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.modulation >= 0.0) || !(self.bias >= 0.0 && self.bias < 1.0) {
            return bad("noise and modulation must be >= 0 and bias in [0, 1)".into());
        }
        if self.class_intensity.len() > self.classes {
            return bad("more class intensities than classes".into());
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.class == 0 || s.class as usize > self.classes {
                return bad(format!("shape {i} has class {} outside 1..={}", s.class, self.classes));
            }
            for a in 0..3 {
                let lo = s.center[a] - s.semi_axes[a];
                let hi = s.center[a] + s.semi_axes[a];
                if !(s.semi_axes[a] > 0.0) || lo < MARGIN || hi > self.dims[a] as f64 - 1.0 - MARGIN {
                    return bad(format!("shape {i} leaves the grid margin on axis {a}"));
                }
            }
        }
        Ok(())
    }

    fn intensity(&self, class: u16) -> f64 {
        if class == 0 {
            return self.background;
        }
        let i = class as usize - 1;
        self.class_intensity.get(i).copied().unwrap_or_else(|| {
            self.background + (1.0 - self.background) * (i + 1) as f64 / self.classes as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_labels: LabelMap,
    pub fixed_labels: LabelMap,
    pub true_field: DisplacementField,
}

fn random_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    (1..=spec.classes as u16)
        .map(|class| {
            let mut center = [0.0; 3];
            let mut semi_axes = [0.0; 3];
            for a in 0..3 {
                let extent = spec.dims[a] as f64 - 1.0;
                let max_r = ((extent - 2.0 * MARGIN) / 2.0).min(extent / 4.0).max(1.0);
                let r = rng.gen_range(0.5 * max_r..=max_r);
                semi_axes[a] = r;
                center[a] = rng.gen_range(MARGIN + r..=extent - MARGIN - r);
            }
            Ellipsoid { center, semi_axes, class }
        })
        .collect()
}

fn render(spec: &SceneSpec, shapes: &[Ellipsoid], rng: &mut ChaCha8Rng) -> (Volume, LabelMap) {
    let [d, h, w] = spec.dims;
    let mut labels = LabelMap::zeros(spec.dims);
    for (i, v) in labels.data_mut().iter_mut().enumerate() {
        let p = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
        for s in shapes {
            let r2: f64 = (0..3).map(|a| ((p[a] - s.center[a]) / s.semi_axes[a]).powi(2)).sum();
            if r2 <= 1.0 {
                *v = s.class;
            }
        }
    }
    let pattern = smooth_pattern(rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = Vec::with_capacity(d * h * w);
    for (i, &l) in labels.data().iter().enumerate() {
        let p = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
        let mut x = spec.intensity(l) * (1.0 + spec.modulation * pattern(p));
        if spec.noise_std > 0.0 {
            x += noise.sample(rng);
        }
        data.push(x);
    }
    normalize(&mut data);
    (Volume::from_data(spec.dims, data).expect("dims match"), labels)
}

/// A random low-frequency sinusoid in `[-1, 1]`.
fn smooth_pattern(rng: &mut ChaCha8Rng) -> impl Fn([f64; 3]) -> f64 {
    let freq: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.5) * std::f64::consts::TAU / 16.0);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    move |p| (0..3).map(|a| (freq[a] * p[a] + phase[a]).sin()).sum::<f64>() / 3.0
}

/// Min-max rescale to `[0, 1]`.
fn normalize(data: &mut [f64]) {
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    for x in data {
        *x = if range > 0.0 { ((*x - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
    }
}

fn apply_bias(spec: &SceneSpec, v: Volume, rng: &mut ChaCha8Rng) -> Volume {
    if spec.bias == 0.0 {
        return v;
    }
    let pattern = smooth_pattern(rng);
    let [_, h, w] = spec.dims;
    let mut data = v.into_tensor().into_data();
    for (i, x) in data.iter_mut().enumerate() {
        let p = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
        *x *= 1.0 + spec.bias * pattern(p);
    }
    normalize(&mut data);
    Volume::from_data(spec.dims, data).expect("dims match")
}

fn bump_field(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<DisplacementField> {
    if spec.amplitude == 0.0 || spec.bumps == 0 {
        return Ok(DisplacementField::zeros(spec.dims));
    }
    let bumps: Vec<([f64; 3], [f64; 3])> = (0..spec.bumps)
        .map(|_| {
            let c = std::array::from_fn(|a| rng.gen_range(0.0..spec.dims[a] as f64 - 1.0));
            let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            (c, v)
        })
        .collect();
    let inv = 1.0 / (2.0 * spec.bump_width * spec.bump_width);
    let raw = DisplacementField::from_fn(spec.dims, |d, h, w| {
        let p = [d as f64, h as f64, w as f64];
        let mut u = [0.0; 3];
        for (c, v) in &bumps {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            let g = (-r2 * inv).exp();
            for a in 0..3 {
                u[a] += g * v[a];
            }
        }
        u
    });
    let t = raw.tensor();
    let n = t.len() / 3;
    let peak = (0..n)
        .map(|i| (0..3).map(|a| t.data()[a * n + i].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(DisplacementField::zeros(spec.dims));
    }
    let mut scale = spec.amplitude / peak;
    loop {
        let u = DisplacementField::new(t.scale(scale))?;
        if fields::njd_percent(&u)? == 0.0 {
            return Ok(u);
        }
        scale *= 0.9;
    }
}

/// Renders a scene and deforms it. Fully determined by `spec`.
pub fn generate_pair(spec: &SceneSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes = if spec.shapes.is_empty() {
        random_shapes(spec, &mut rng)
    } else {
        spec.shapes.clone()
    };
    let (moving, moving_labels) = render(spec, &shapes, &mut rng);
    let true_field = bump_field(spec, &mut rng)?;
    let fixed = fields::warp_volume(&moving, &true_field, Interpolation::Trilinear)?;
    let fixed = apply_bias(spec, fixed, &mut rng);
    let fixed_labels = fields::warp_labels(&moving_labels, &true_field)?;
    Ok(SyntheticPair {
        moving,
        fixed,
        moving_labels,
        fixed_labels,
        true_field,
    })
}
