//! Displacement-field algebra: warping, composition and Jacobian analysis.
//!
//! A [`DisplacementField`] is a `(3, D, H, W)` tensor of voxel-unit offsets
//! with component order `(Δd, Δh, Δw)`. Warping a source `S` by `u` reads
//! `S(x + u(x))`; sample coordinates are clamped to the volume border, so a
//! constant volume is a fixed point of every warp.

use crate::error::{Error, Result};
use crate::tensor::{spatial_dims, Tensor};

/// A single-channel intensity volume stored as a `(1, D, H, W)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume(Tensor);

impl Volume {
    pub fn new(tensor: Tensor) -> Result<Self> {
        spatial_dims(&tensor)?;
        if tensor.shape()[0] != 1 {
            return Err(Error::InvalidShape {
                shape: tensor.shape().to_vec(),
                reason: "a volume has exactly one channel".into(),
            });
        }
        Ok(Self(tensor))
    }

    pub fn from_data(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&[1, dims[0], dims[1], dims[2]], data)?)
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Self(Tensor::full(&[1, dims[0], dims[1], dims[2]], value))
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.0.shape()[1], self.0.shape()[2], self.0.shape()[3]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Integer class labels per voxel; 0 is background, `1..=K` foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: [usize; 3],
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], data: Vec<u16>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || data.len() != n {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: format!("label buffer has {} entries", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u16 {
        self.data[(d * self.dims[1] + h) * self.dims[2] + w]
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// One-hot encoding of the foreground classes `1..=classes` as a
    /// `(classes, D, H, W)` tensor. Background gets no channel.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        if classes == 0 {
            return Err(Error::InvalidArgument("one-hot needs at least one class".into()));
        }
        let plane = self.data.len();
        let mut out = vec![0.0; classes * plane];
        for (i, &l) in self.data.iter().enumerate() {
            if l as usize > classes {
                return Err(Error::InvalidArgument(format!(
                    "label {l} exceeds class count {classes}"
                )));
            }
            if l > 0 {
                out[(l as usize - 1) * plane + i] = 1.0;
            }
        }
        Tensor::new(&[classes, self.dims[0], self.dims[1], self.dims[2]], out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField(Tensor);

impl DisplacementField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        spatial_dims(&tensor)?;
        if tensor.shape()[0] != 3 {
            return Err(Error::InvalidShape {
                shape: tensor.shape().to_vec(),
                reason: "a displacement field has three components".into(),
            });
        }
        Ok(Self(tensor))
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self(Tensor::zeros(&[3, dims[0], dims[1], dims[2]]))
    }

    /// Field whose value is `offset` at every voxel.
    pub fn constant(dims: [usize; 3], offset: [f64; 3]) -> Self {
        let plane: usize = dims.iter().product();
        let data = offset
            .iter()
            .flat_map(|&o| std::iter::repeat(o).take(plane))
            .collect();
        Self(Tensor::new(&[3, dims[0], dims[1], dims[2]], data).expect("valid field shape"))
    }

    /// Builds a field by evaluating `f(d, h, w)` at every voxel.
    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> [f64; 3]) -> Self {
        let plane: usize = dims.iter().product();
        let mut data = vec![0.0; 3 * plane];
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let v = f(d, h, w);
                    let i = (d * dims[1] + h) * dims[2] + w;
                    for c in 0..3 {
                        data[c * plane + i] = v[c];
                    }
                }
            }
        }
        Self(Tensor::new(&[3, dims[0], dims[1], dims[2]], data).expect("valid field shape"))
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.0.shape()[1], self.0.shape()[2], self.0.shape()[3]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Displacement vector at a voxel.
    pub fn at(&self, d: usize, h: usize, w: usize) -> [f64; 3] {
        let [dn, hn, wn] = self.dims();
        let plane = dn * hn * wn;
        let i = (d * hn + h) * wn + w;
        let x = self.0.data();
        [x[i], x[plane + i], x[2 * plane + i]]
    }
}

/// One of the 48 axis permutations and reflections of the voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Symmetry {
    /// Output axis `k` reads input axis `perm[k]`.
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl Symmetry {
    pub const COUNT: usize = 48;

    pub fn identity() -> Self {
        Symmetry {
            perm: [0, 1, 2],
            flip: [false; 3],
        }
    }

    /// Enumerates the group: `index / 8` picks the permutation, the low
    /// three bits the reflections.
    pub fn from_index(index: usize) -> Self {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let i = index % Self::COUNT;
        Symmetry {
            perm: PERMS[i / 8],
            flip: [i & 1 != 0, i & 2 != 0, i & 4 != 0],
        }
    }

    /// Whether the transform maps a grid of `dims` onto itself.
    pub fn preserves(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|k| dims[self.perm[k]] == dims[k])
    }

    fn source_index(&self, dims: [usize; 3], out: [usize; 3]) -> usize {
        let mut src = [0usize; 3];
        for k in 0..3 {
            let a = self.perm[k];
            src[a] = if self.flip[k] { dims[a] - 1 - out[k] } else { out[k] };
        }
        (src[0] * dims[1] + src[1]) * dims[2] + src[2]
    }

    fn gather<T: Copy>(&self, dims: [usize; 3], data: &[T]) -> Vec<T> {
        let od = [dims[self.perm[0]], dims[self.perm[1]], dims[self.perm[2]]];
        let mut out = Vec::with_capacity(data.len());
        for d in 0..od[0] {
            for h in 0..od[1] {
                for w in 0..od[2] {
                    out.push(data[self.source_index(dims, [d, h, w])]);
                }
            }
        }
        out
    }

    fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        [dims[self.perm[0]], dims[self.perm[1]], dims[self.perm[2]]]
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        let dims = v.dims();
        Volume::from_data(self.out_dims(dims), self.gather(dims, v.data())).expect("same element count")
    }

    pub fn apply_labels(&self, l: &LabelMap) -> LabelMap {
        let dims = l.dims();
        LabelMap::new(self.out_dims(dims), self.gather(dims, l.data())).expect("same element count")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

/// Linear interpolation stencil along one axis for a clamped coordinate.
#[derive(Clone, Copy)]
struct Stencil {
    i0: usize,
    i1: usize,
    t: f64,
    /// Derivative of the clamped coordinate w.r.t. the raw one (0 or 1).
    live: f64,
}

#[inline]
fn stencil(p: f64, n: usize) -> Stencil {
    let last = (n - 1) as f64;
    if n == 1 {
        return Stencil { i0: 0, i1: 0, t: 0.0, live: 0.0 };
    }
    let (pc, live) = if p < 0.0 {
        (0.0, 0.0)
    } else if p > last {
        (last, 0.0)
    } else {
        (p, 1.0)
    };
    let i0 = (pc.floor() as usize).min(n - 2);
    Stencil { i0, i1: i0 + 1, t: pc - i0 as f64, live }
}

fn check_field_for(src: &Tensor, field: &Tensor) -> Result<[usize; 3]> {
    let dims = spatial_dims(src)?;
    let fdims = spatial_dims(field)?;
    if field.shape()[0] != 3 || fdims != dims {
        let want = [3, dims[0], dims[1], dims[2]];
        return Err(Error::shape(field.shape(), &want));
    }
    Ok(dims)
}

/// Samples every channel of `src` at `x + u(x)` with trilinear weights.
pub fn sample_trilinear(src: &Tensor, field: &Tensor) -> Result<Tensor> {
    let [dn, hn, wn] = check_field_for(src, field)?;
    let channels = src.shape()[0];
    let plane = dn * hn * wn;
    let u = field.data();
    let s = src.data();
    let mut out = vec![0.0; channels * plane];
    for d in 0..dn {
        for h in 0..hn {
            for w in 0..wn {
                let i = (d * hn + h) * wn + w;
                let sd = stencil(d as f64 + u[i], dn);
                let sh = stencil(h as f64 + u[plane + i], hn);
                let sw = stencil(w as f64 + u[2 * plane + i], wn);
                let corners = corner_weights(&sd, &sh, &sw, hn, wn);
                for c in 0..channels {
                    let sc = &s[c * plane..(c + 1) * plane];
                    out[c * plane + i] = corners.iter().map(|&(j, wt)| wt * sc[j]).sum();
                }
            }
        }
    }
    Tensor::new(src.shape(), out)
}

#[inline]
fn corner_weights(sd: &Stencil, sh: &Stencil, sw: &Stencil, hn: usize, wn: usize) -> [(usize, f64); 8] {
    let mut out = [(0usize, 0.0f64); 8];
    let mut n = 0;
    for (di, dw) in [(sd.i0, 1.0 - sd.t), (sd.i1, sd.t)] {
        for (hi, hw) in [(sh.i0, 1.0 - sh.t), (sh.i1, sh.t)] {
            for (wi, ww) in [(sw.i0, 1.0 - sw.t), (sw.i1, sw.t)] {
                out[n] = ((di * hn + hi) * wn + wi, dw * hw * ww);
                n += 1;
            }
        }
    }
    out
}

/// Backward pass of [`sample_trilinear`]: returns `(grad_src, grad_field)`.
/// The field gradient is the analytic derivative of the trilinear
/// interpolant; it is zero along axes where the coordinate was clamped.
pub fn sample_trilinear_backward(src: &Tensor, field: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let [dn, hn, wn] = check_field_for(src, field)?;
    if grad_out.shape() != src.shape() {
        return Err(Error::shape(grad_out.shape(), src.shape()));
    }
    let channels = src.shape()[0];
    let plane = dn * hn * wn;
    let u = field.data();
    let s = src.data();
    let g = grad_out.data();
    let mut gs = vec![0.0; channels * plane];
    let mut gu = vec![0.0; 3 * plane];
    for d in 0..dn {
        for h in 0..hn {
            for w in 0..wn {
                let i = (d * hn + h) * wn + w;
                let sd = stencil(d as f64 + u[i], dn);
                let sh = stencil(h as f64 + u[plane + i], hn);
                let sw = stencil(w as f64 + u[2 * plane + i], wn);
                let idx = |a: usize, b: usize, c: usize| (a * hn + b) * wn + c;
                let mut acc = [0.0; 3];
                for ch in 0..channels {
                    let go = g[ch * plane + i];
                    if go == 0.0 {
                        continue;
                    }
                    let sc = &s[ch * plane..(ch + 1) * plane];
                    let gc = &mut gs[ch * plane..(ch + 1) * plane];
                    let mut dv = [0.0; 3];
                    for (a, wa, da) in [(sd.i0, 1.0 - sd.t, -1.0), (sd.i1, sd.t, 1.0)] {
                        for (b, wb, db) in [(sh.i0, 1.0 - sh.t, -1.0), (sh.i1, sh.t, 1.0)] {
                            for (c, wc, dc) in [(sw.i0, 1.0 - sw.t, -1.0), (sw.i1, sw.t, 1.0)] {
                                let j = idx(a, b, c);
                                gc[j] += go * wa * wb * wc;
                                let v = sc[j];
                                dv[0] += da * wb * wc * v;
                                dv[1] += wa * db * wc * v;
                                dv[2] += wa * wb * dc * v;
                            }
                        }
                    }
                    acc[0] += go * dv[0];
                    acc[1] += go * dv[1];
                    acc[2] += go * dv[2];
                }
                gu[i] = acc[0] * sd.live;
                gu[plane + i] = acc[1] * sh.live;
                gu[2 * plane + i] = acc[2] * sw.live;
            }
        }
    }
    Ok((Tensor::new(src.shape(), gs)?, Tensor::new(field.shape(), gu)?))
}

#[inline]
fn nearest_index(p: f64, n: usize) -> usize {
    p.round().clamp(0.0, (n - 1) as f64) as usize
}

/// Warps an intensity volume by `u`.
pub fn warp_volume(vol: &Volume, u: &DisplacementField, mode: Interpolation) -> Result<Volume> {
    match mode {
        Interpolation::Trilinear => Volume::new(sample_trilinear(vol.tensor(), u.tensor())?),
        Interpolation::Nearest => {
            let [dn, hn, wn] = check_field_for(vol.tensor(), u.tensor())?;
            let src = vol.data();
            let out = nearest_gather([dn, hn, wn], u, |j| src[j]);
            Volume::from_data([dn, hn, wn], out)
        }
    }
}

/// Nearest-neighbour warp of an integer label map.
pub fn warp_labels(labels: &LabelMap, u: &DisplacementField) -> Result<LabelMap> {
    if labels.dims() != u.dims() {
        let [d, h, w] = labels.dims();
        return Err(Error::shape(u.tensor().shape(), &[3, d, h, w]));
    }
    let src = labels.data();
    let out = nearest_gather(labels.dims(), u, |j| src[j]);
    LabelMap::new(labels.dims(), out)
}

fn nearest_gather<T: Copy>(dims: [usize; 3], u: &DisplacementField, read: impl Fn(usize) -> T) -> Vec<T> {
    let [dn, hn, wn] = dims;
    let plane = dn * hn * wn;
    let x = u.tensor().data();
    let mut out = Vec::with_capacity(plane);
    for d in 0..dn {
        for h in 0..hn {
            for w in 0..wn {
                let i = (d * hn + h) * wn + w;
                let a = nearest_index(d as f64 + x[i], dn);
                let b = nearest_index(h as f64 + x[plane + i], hn);
                let c = nearest_index(w as f64 + x[2 * plane + i], wn);
                out.push(read((a * hn + b) * wn + c));
            }
        }
    }
    out
}

/// Composes two fields so that warping by the result approximates warping
/// by `prev` and then by `step`:
/// `u_total(x) = u_step(x) + u_prev(x + u_step(x))`.
pub fn compose(prev: &DisplacementField, step: &DisplacementField) -> Result<DisplacementField> {
    if prev.dims() != step.dims() {
        return Err(Error::shape(prev.tensor().shape(), step.tensor().shape()));
    }
    let resampled = sample_trilinear(prev.tensor(), step.tensor())?;
    DisplacementField::new(resampled.add(step.tensor())?)
}

/// Forward difference along spatial axis `axis` (0 = d, 1 = h, 2 = w) of a
/// `(C, D, H, W)` tensor; the output has that extent reduced by one.
pub fn forward_diff(t: &Tensor, axis: usize) -> Result<Tensor> {
    let dims = spatial_dims(t)?;
    if axis > 2 || dims[axis] < 2 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("forward difference along axis {axis} needs extent >= 2"),
        });
    }
    let shape = t.shape();
    let outer: usize = shape[..axis + 1].iter().product();
    let n = shape[axis + 1];
    let inner: usize = shape[axis + 2..].iter().product();
    let x = t.data();
    let mut out = Vec::with_capacity(outer * (n - 1) * inner);
    for o in 0..outer {
        for j in 0..n - 1 {
            let a = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
            let b = &x[(o * n + j + 1) * inner..(o * n + j + 2) * inner];
            out.extend(a.iter().zip(b).map(|(p, q)| q - p));
        }
    }
    let mut oshape = shape.to_vec();
    oshape[axis + 1] = n - 1;
    Tensor::new(&oshape, out)
}

/// Adjoint of [`forward_diff`].
pub fn forward_diff_adjoint(grad: &Tensor, axis: usize, input_shape: &[usize]) -> Result<Tensor> {
    let mut expect = input_shape.to_vec();
    expect[axis + 1] -= 1;
    if grad.shape() != expect.as_slice() {
        return Err(Error::shape(grad.shape(), &expect));
    }
    let outer: usize = input_shape[..axis + 1].iter().product();
    let n = input_shape[axis + 1];
    let inner: usize = input_shape[axis + 2..].iter().product();
    let g = grad.data();
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for j in 0..n - 1 {
            for q in 0..inner {
                let v = g[(o * (n - 1) + j) * inner + q];
                out[(o * n + j) * inner + q] -= v;
                out[(o * n + j + 1) * inner + q] += v;
            }
        }
    }
    Tensor::new(input_shape, out)
}

/// Per-voxel `det(I + ∇u)` as a `(D, H, W)` tensor.
///
/// `∂u_i/∂x_j` is a forward difference; at the trailing boundary of each
/// axis the last valid difference is repeated.
pub fn jacobian_determinant(u: &DisplacementField) -> Result<Tensor> {
    let [dn, hn, wn] = u.dims();
    if dn < 2 || hn < 2 || wn < 2 {
        return Err(Error::InvalidShape {
            shape: u.tensor().shape().to_vec(),
            reason: "jacobian needs every spatial extent >= 2".into(),
        });
    }
    let plane = dn * hn * wn;
    let x = u.tensor().data();
    let strides = [hn * wn, wn, 1];
    let extents = [dn, hn, wn];
    let mut out = Vec::with_capacity(plane);
    for d in 0..dn {
        for h in 0..hn {
            for w in 0..wn {
                let pos = [d, h, w];
                let i = (d * hn + h) * wn + w;
                let mut m = [[0.0; 3]; 3];
                for j in 0..3 {
                    let (a, b) = if pos[j] + 1 < extents[j] {
                        (i, i + strides[j])
                    } else {
                        (i - strides[j], i)
                    };
                    for (c, mrow) in m.iter_mut().enumerate() {
                        mrow[j] = x[c * plane + b] - x[c * plane + a];
                    }
                }
                for (c, mrow) in m.iter_mut().enumerate() {
                    mrow[c] += 1.0;
                }
                out.push(det3(&m));
            }
        }
    }
    Tensor::new(&[dn, hn, wn], out)
}

#[inline]
fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Percentage of voxels with a negative Jacobian determinant.
pub fn njd_percent(u: &DisplacementField) -> Result<f64> {
    let j = jacobian_determinant(u)?;
    let neg = j.data().iter().filter(|&&v| v < 0.0).count();
    Ok(100.0 * neg as f64 / j.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n: usize = dims.iter().product();
        Volume::from_data(dims, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let v = ramp([4, 5, 6]);
        let u = DisplacementField::zeros([4, 5, 6]);
        assert_eq!(warp_volume(&v, &u, Interpolation::Trilinear).unwrap(), v);
        assert_eq!(warp_volume(&v, &u, Interpolation::Nearest).unwrap(), v);
        let mut labels = LabelMap::zeros([4, 5, 6]);
        labels.data_mut()[17] = 2;
        assert_eq!(warp_labels(&labels, &u).unwrap(), labels);
    }

    #[test]
    fn unit_shift_moves_bright_voxel() {
        let dims = [3, 3, 5];
        let mut data = vec![0.0; 45];
        // bright voxel at (1, 1, 3)
        data[(3 + 1) * 5 + 3] = 1.0;
        let v = Volume::from_data(dims, data).unwrap();
        let u = DisplacementField::constant(dims, [0.0, 0.0, 1.0]);
        for mode in [Interpolation::Trilinear, Interpolation::Nearest] {
            let out = warp_volume(&v, &u, mode).unwrap();
            // out(x) = v(x + e_w): the bright voxel now sits at w = 2
            let t = out.tensor();
            assert_eq!(t.get(&[0, 1, 1, 2]), 1.0);
            assert_eq!(t.get(&[0, 1, 1, 3]), 0.0);
            // w = 4 samples w = 5, clamped to the border value at w = 4
            assert_eq!(t.get(&[0, 1, 1, 4]), 0.0);
        }
    }

    #[test]
    fn half_shift_averages() {
        let (a, b) = (1.5, 4.0);
        let v = Volume::from_data([1, 1, 2], vec![a, b]).unwrap();
        let u = DisplacementField::constant([1, 1, 2], [0.0, 0.0, 0.5]);
        let out = warp_volume(&v, &u, Interpolation::Trilinear).unwrap();
        assert_eq!(out.data()[0], 0.5 * a + 0.5 * b);
        assert_eq!(out.data()[1], b);
    }

    #[test]
    fn warp_shape_mismatch() {
        let v = ramp([4, 4, 4]);
        let u = DisplacementField::zeros([4, 4, 5]);
        assert!(matches!(
            warp_volume(&v, &u, Interpolation::Trilinear),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn compose_identity_laws() {
        let dims = [4, 4, 4];
        let u = DisplacementField::from_fn(dims, |d, h, w| {
            [0.1 * (h as f64).sin(), 0.2 * (w as f64 * 0.5).cos(), 0.05 * d as f64]
        });
        let z = DisplacementField::zeros(dims);
        assert_eq!(compose(&z, &u).unwrap(), u);
        assert_eq!(compose(&u, &z).unwrap(), u);
    }

    #[test]
    fn compose_two_unit_shifts() {
        let dims = [4, 4, 6];
        let s = DisplacementField::constant(dims, [0.0, 0.0, 1.0]);
        let c = compose(&s, &s).unwrap();
        for d in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(c.at(d, h, w), [0.0, 0.0, 2.0]);
                }
            }
        }
    }

    #[test]
    fn jacobian_identity_is_one() {
        let j = jacobian_determinant(&DisplacementField::zeros([3, 4, 5])).unwrap();
        assert!(j.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn jacobian_uniform_scaling() {
        let dims = [6, 6, 6];
        let u = DisplacementField::from_fn(dims, |d, h, w| {
            [0.1 * (d as f64 - 2.5), 0.1 * (h as f64 - 2.5), 0.1 * (w as f64 - 2.5)]
        });
        let j = jacobian_determinant(&u).unwrap();
        for v in j.data() {
            assert!((v - 1.331).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn folding_field_half_volume() {
        let dims = [8, 8, 8];
        let u = DisplacementField::from_fn(dims, |_, _, w| [0.0, 0.0, -2.0 * (w.min(4) as f64)]);
        let j = jacobian_determinant(&u).unwrap();
        assert_eq!(j.get(&[0, 0, 0]), -1.0);
        assert_eq!(j.get(&[0, 0, 5]), 1.0);
        assert_eq!(njd_percent(&u).unwrap(), 50.0);
        assert_eq!(njd_percent(&DisplacementField::zeros(dims)).unwrap(), 0.0);
    }

    #[test]
    fn jacobian_rejects_thin_axis() {
        assert!(jacobian_determinant(&DisplacementField::zeros([1, 4, 4])).is_err());
    }

    #[test]
    fn forward_diff_adjoint_is_transpose() {
        let t = Tensor::new(&[2, 3, 4, 2], (0..48).map(|i| ((i * 7) % 11) as f64).collect()).unwrap();
        for axis in 0..3 {
            let y = forward_diff(&t, axis).unwrap();
            let g = y.map(|v| v * 0.3 + 1.0);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gt = forward_diff_adjoint(&g, axis, t.shape()).unwrap();
            let rhs: f64 = t.data().iter().zip(gt.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn one_hot_rejects_excess_label() {
        let l = LabelMap::new([1, 1, 2], vec![0, 3]).unwrap();
        assert!(l.one_hot(2).is_err());
        let t = l.one_hot(3).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1, 2]);
        assert_eq!(t.get(&[2, 0, 0, 1]), 1.0);
    }

    #[test]
    fn symmetries_commute_with_warping() {
        let v = Volume::from_data([4, 4, 4], (0..64).map(|i| ((i * 37) % 11) as f64).collect()).unwrap();
        let u = DisplacementField::constant([4, 4, 4], [1.0, 0.0, 0.0]);
        let warped = warp_volume(&v, &u, Interpolation::Trilinear).unwrap();
        // permuting d and w and flipping the new w axis turns a +d shift into a -w shift
        let s = Symmetry { perm: [2, 1, 0], flip: [false, false, true] };
        let su = DisplacementField::constant([4, 4, 4], [0.0, 0.0, -1.0]);
        let lhs = s.apply_volume(&warped);
        let rhs = warp_volume(&s.apply_volume(&v), &su, Interpolation::Trilinear).unwrap();
        assert_eq!(lhs, rhs);
        let all: std::collections::HashSet<_> = (0..Symmetry::COUNT).map(|i| s_key(Symmetry::from_index(i))).collect();
        assert_eq!(all.len(), 48);
        assert_eq!(Symmetry::from_index(0), Symmetry::identity());
        assert!(Symmetry::from_index(8).preserves([2, 3, 3]));
        assert!(!Symmetry::from_index(16).preserves([2, 3, 3]));
    }

    fn s_key(s: Symmetry) -> ([usize; 3], [bool; 3]) {
        (s.perm, s.flip)
    }
}
