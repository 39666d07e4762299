//! Dense row-major `f64` tensors and the numeric kernels the rest of the
//! crate builds on.
//!
//! Spatial tensors are laid out channel-first as `(C, D, H, W)`, with flat
//! index `((c·D + d)·H + h)·W + w`. Convolutions use the cross-correlation
//! convention (no kernel flip). Trilinear upsampling uses the
//! align-corners-false convention: destination index `j` reads source
//! coordinate `(j + 0.5) / factor − 0.5`, clamped to the border.

use crate::error::{Error, Result};

/// Maximum number of axes a tensor may carry.
pub const MAX_RANK: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Binary elementwise operators. Division by zero follows IEEE-754.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Unary elementwise operators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Square,
    Clip { lo: f64, hi: f64 },
}

/// Right-hand operand of a binary op: a same-shape tensor or a scalar.
#[derive(Debug, Clone, Copy)]
pub enum Rhs<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    /// Row-major flat position of the maximum within the reduced axes,
    /// first occurrence on ties.
    Argmax,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

impl UnaryOp {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Square => x * x,
            UnaryOp::Clip { lo, hi } => x.clamp(lo, hi),
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be between 1 and {MAX_RANK}"),
        });
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be at least 1".into(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {n} elements, buffer has {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; for internal construction with shapes
    /// that are correct by construction.
    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when every extent is 1.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            assert!(i < e, "index {idx:?} out of bounds for {:?}", self.shape);
            acc * e + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn unary(&self, op: UnaryOp) -> Self {
        self.map(|x| op.apply(x))
    }

    pub fn binary(&self, op: BinaryOp, rhs: Rhs<'_>) -> Result<Self> {
        match rhs {
            Rhs::Tensor(b) => self.zip_map(b, |x, y| op.apply(x, y)),
            Rhs::Scalar(s) => Ok(self.map(|x| op.apply(x, s))),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.binary(BinaryOp::Add, Rhs::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.binary(BinaryOp::Sub, Rhs::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.binary(BinaryOp::Mul, Rhs::Tensor(other))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reduces over `axes`. With `keep_dims` the reduced extents stay as 1;
    /// otherwise they are removed (a full reduction yields shape `[1]`).
    /// An empty axis list returns a copy.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keep_dims: bool) -> Result<Self> {
        if axes.is_empty() {
            return Ok(self.clone());
        }
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidArgument(format!(
                    "reduction axis {a} out of range for rank {rank}"
                )));
            }
            reduced[a] = true;
        }
        let kept_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .map(|(&e, &r)| if r { 1 } else { e })
            .collect();
        let out_len: usize = kept_shape.iter().product();
        let count = self.len() / out_len;

        let mut acc = vec![
            match op {
                ReduceOp::Max | ReduceOp::Argmax => f64::NEG_INFINITY,
                _ => 0.0,
            };
            out_len
        ];
        let mut arg = vec![0usize; out_len];
        let mut seen = vec![0usize; out_len];
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for ax in 0..rank {
                o = o * kept_shape[ax] + if reduced[ax] { 0 } else { idx[ax] };
            }
            match op {
                ReduceOp::Sum | ReduceOp::Mean => acc[o] += v,
                ReduceOp::Max | ReduceOp::Argmax => {
                    if v > acc[o] || (seen[o] == 0 && v.is_nan()) {
                        acc[o] = v;
                        arg[o] = seen[o];
                    }
                }
            }
            seen[o] += 1;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < self.shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let data = match op {
            ReduceOp::Sum | ReduceOp::Max => acc,
            ReduceOp::Mean => acc.into_iter().map(|s| s / count as f64).collect(),
            ReduceOp::Argmax => arg.into_iter().map(|a| a as f64).collect(),
        };
        let shape = if keep_dims {
            kept_shape
        } else {
            let s: Vec<usize> = self
                .shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&e, _)| e)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        Tensor::new(&shape, data)
    }

    /// Concatenates 4-D `(C, D, H, W)` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let spatial = spatial_dims(first)?;
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if spatial_dims(p)? != spatial {
                return Err(Error::shape(first.shape(), p.shape()));
            }
            channels += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[channels, spatial[0], spatial[1], spatial[2]], data)
    }

    /// Copies channels `start..start+count` of a `(C, D, H, W)` tensor.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Self> {
        let [d, h, w] = spatial_dims(self)?;
        if start + count > self.shape[0] || count == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel range {start}..{} out of 0..{}",
                start + count,
                self.shape[0]
            )));
        }
        let plane = d * h * w;
        Tensor::new(
            &[count, d, h, w],
            self.data[start * plane..(start + count) * plane].to_vec(),
        )
    }
}

/// Spatial extents `[D, H, W]` of a rank-4 `(C, D, H, W)` tensor.
pub fn spatial_dims(t: &Tensor) -> Result<[usize; 3]> {
    if t.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: t.shape.clone(),
            reason: "expected a (C, D, H, W) tensor".into(),
        });
    }
    Ok([t.shape[1], t.shape[2], t.shape[3]])
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn tap_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o·stride + k − pad must lie in [0, in_len)
    let k = k as isize;
    let p = pad as isize;
    let s = stride as isize;
    let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
    let hi_num = in_len as isize - 1 + p - k;
    let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
    let lo = lo.min(out_len as isize) as usize;
    let hi = (hi.min(out_len as isize) as usize).max(lo);
    (lo, hi)
}

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::InvalidShape {
                shape: input.to_vec(),
                reason: "conv3d input must be (C, D, H, W)".into(),
            });
        }
        if kernel.len() != 5 || kernel[2] != kernel[3] || kernel[3] != kernel[4] {
            return Err(Error::InvalidShape {
                shape: kernel.to_vec(),
                reason: "conv3d kernel must be (C_out, C_in, k, k, k)".into(),
            });
        }
        if input[0] != kernel[1] {
            return Err(Error::ChannelMismatch {
                input: input[0],
                kernel: kernel[1],
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv3d stride must be >= 1".into()));
        }
        let k = kernel[2];
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a + 1] + 2 * pad;
            if span < k {
                return Err(Error::InvalidShape {
                    shape: input.to_vec(),
                    reason: format!("spatial extent too small for kernel size {k}"),
                });
            }
            output[a] = (span - k) / stride + 1;
        }
        Ok(Self {
            c_in: input[0],
            c_out: kernel[0],
            k,
            stride,
            pad,
            input: [input[1], input[2], input[3]],
            output,
        })
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    /// Visits every (output row, input row, column range) pairing for one
    /// kernel tap. `f(out_row_start, in_row_start, ow_lo, ow_hi, iw_lo)`.
    #[inline]
    fn for_each_row(&self, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [id_n, ih_n, iw_n] = self.input;
        let [od_n, oh_n, ow_n] = self.output;
        let (d_lo, d_hi) = tap_range(od_n, id_n, kd, self.stride, self.pad);
        let (h_lo, h_hi) = tap_range(oh_n, ih_n, kh, self.stride, self.pad);
        let (w_lo, w_hi) = tap_range(ow_n, iw_n, kw, self.stride, self.pad);
        if w_lo >= w_hi {
            return;
        }
        let iw_lo = w_lo * self.stride + kw - self.pad;
        for od in d_lo..d_hi {
            let id = od * self.stride + kd - self.pad;
            for oh in h_lo..h_hi {
                let ih = oh * self.stride + kh - self.pad;
                f((od * oh_n + oh) * ow_n, (id * ih_n + ih) * iw_n, w_lo, w_hi, iw_lo);
            }
        }
    }
}

/// Direct 3-D cross-correlation of a `(C_in, D, H, W)` input with a
/// `(C_out, C_in, k, k, k)` kernel. Output extent per axis is
/// `floor((in + 2·padding − k) / stride) + 1`.
pub fn conv3d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape(b.shape(), &[g.c_out]));
        }
    }
    let out_shape = g.out_shape();
    let out_plane = out_shape[1] * out_shape[2] * out_shape[3];
    let in_plane = g.input.iter().product::<usize>();
    let k3 = g.k * g.k * g.k;
    let mut out = vec![0.0; g.c_out * out_plane];
    let x = input.data();
    let wts = kernel.data();
    for co in 0..g.c_out {
        let oc = &mut out[co * out_plane..(co + 1) * out_plane];
        if let Some(b) = bias {
            oc.fill(b.data()[co]);
        }
        for ci in 0..g.c_in {
            let xc = &x[ci * in_plane..(ci + 1) * in_plane];
            let wbase = (co * g.c_in + ci) * k3;
            for kd in 0..g.k {
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = wts[wbase + (kd * g.k + kh) * g.k + kw];
                        g.for_each_row(kd, kh, kw, |orow, irow, lo, hi, ilo| {
                            let o = &mut oc[orow + lo..orow + hi];
                            if g.stride == 1 {
                                let i = &xc[irow + ilo..irow + ilo + (hi - lo)];
                                for (ov, iv) in o.iter_mut().zip(i) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (n, ov) in o.iter_mut().enumerate() {
                                    *ov += wv * xc[irow + ilo + n * g.stride];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    Tensor::new(&out_shape, out)
}

/// Gradient of [`conv3d`] with respect to its input.
pub fn conv3d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input_shape, kernel.shape(), stride, padding)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::shape(grad_out.shape(), &g.out_shape()));
    }
    let out_plane: usize = g.output.iter().product();
    let in_plane: usize = g.input.iter().product();
    let k3 = g.k * g.k * g.k;
    let mut gin = vec![0.0; g.c_in * in_plane];
    let go = grad_out.data();
    let wts = kernel.data();
    for ci in 0..g.c_in {
        let gc = &mut gin[ci * in_plane..(ci + 1) * in_plane];
        for co in 0..g.c_out {
            let oc = &go[co * out_plane..(co + 1) * out_plane];
            let wbase = (co * g.c_in + ci) * k3;
            for kd in 0..g.k {
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = wts[wbase + (kd * g.k + kh) * g.k + kw];
                        g.for_each_row(kd, kh, kw, |orow, irow, lo, hi, ilo| {
                            let o = &oc[orow + lo..orow + hi];
                            if g.stride == 1 {
                                let i = &mut gc[irow + ilo..irow + ilo + (hi - lo)];
                                for (iv, ov) in i.iter_mut().zip(o) {
                                    *iv += wv * ov;
                                }
                            } else {
                                for (n, ov) in o.iter().enumerate() {
                                    gc[irow + ilo + n * g.stride] += wv * ov;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, gin)
}

/// Gradient of [`conv3d`] with respect to its kernel.
pub fn conv3d_grad_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel_shape, stride, padding)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::shape(grad_out.shape(), &g.out_shape()));
    }
    let out_plane: usize = g.output.iter().product();
    let in_plane: usize = g.input.iter().product();
    let k3 = g.k * g.k * g.k;
    let mut gw = vec![0.0; g.c_out * g.c_in * k3];
    let go = grad_out.data();
    let x = input.data();
    for co in 0..g.c_out {
        let oc = &go[co * out_plane..(co + 1) * out_plane];
        for ci in 0..g.c_in {
            let xc = &x[ci * in_plane..(ci + 1) * in_plane];
            let wbase = (co * g.c_in + ci) * k3;
            for kd in 0..g.k {
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let mut acc = 0.0;
                        g.for_each_row(kd, kh, kw, |orow, irow, lo, hi, ilo| {
                            let o = &oc[orow + lo..orow + hi];
                            if g.stride == 1 {
                                let i = &xc[irow + ilo..irow + ilo + (hi - lo)];
                                acc += o.iter().zip(i).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for (n, ov) in o.iter().enumerate() {
                                    acc += ov * xc[irow + ilo + n * g.stride];
                                }
                            }
                        });
                        gw[wbase + (kd * g.k + kh) * g.k + kw] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(kernel_shape, gw)
}

/// Per-channel sum over the spatial axes: `(C, D, H, W) -> (C)`.
pub fn sum_spatial(t: &Tensor) -> Result<Tensor> {
    let c = t.shape()[0];
    let plane = t.len() / c;
    Ok(Tensor::from_vec(
        t.data().chunks(plane).map(|ch| ch.iter().sum()).collect(),
    ))
}

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn linear_taps(src_len: usize, factor: usize) -> Vec<Tap> {
    let last = (src_len - 1) as f64;
    (0..src_len * factor)
        .map(|j| {
            let s = ((j as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            Tap { i0, i1, w1: s - i0 as f64 }
        })
        .collect()
}

fn resample_axis(data: &[f64], shape: &[usize; 4], axis: usize, taps: &[Tap]) -> (Vec<f64>, [usize; 4]) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let m = taps.len();
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for (j, t) in taps.iter().enumerate() {
            let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
            let a = &data[(o * n + t.i0) * inner..(o * n + t.i0 + 1) * inner];
            let b = &data[(o * n + t.i1) * inner..(o * n + t.i1 + 1) * inner];
            let w0 = 1.0 - t.w1;
            for ((d, x), y) in dst.iter_mut().zip(a).zip(b) {
                *d = w0 * x + t.w1 * y;
            }
        }
    }
    let mut s = *shape;
    s[axis] = m;
    (out, s)
}

fn resample_axis_adjoint(grad: &[f64], shape: &[usize; 4], axis: usize, src_len: usize, taps: &[Tap]) -> (Vec<f64>, [usize; 4]) {
    let outer: usize = shape[..axis].iter().product();
    let m = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * src_len * inner];
    for o in 0..outer {
        for (j, t) in taps.iter().enumerate() {
            let g = &grad[(o * m + j) * inner..(o * m + j + 1) * inner];
            let w0 = 1.0 - t.w1;
            for (q, gv) in g.iter().enumerate() {
                out[(o * src_len + t.i0) * inner + q] += w0 * gv;
                out[(o * src_len + t.i1) * inner + q] += t.w1 * gv;
            }
        }
    }
    let mut s = *shape;
    s[axis] = src_len;
    (out, s)
}

/// Trilinear upsampling of a `(C, D, H, W)` tensor by an integer factor.
pub fn upsample_trilinear(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 2 {
        return Err(Error::InvalidArgument(format!(
            "upsample factor must be >= 2, got {factor}"
        )));
    }
    let [d, h, w] = spatial_dims(input)?;
    let mut shape = [input.shape()[0], d, h, w];
    let mut data = input.data().to_vec();
    for axis in 1..4 {
        let taps = linear_taps(shape[axis], factor);
        let (nd, ns) = resample_axis(&data, &shape, axis, &taps);
        data = nd;
        shape = ns;
    }
    Tensor::new(&shape, data)
}

/// Adjoint (transpose) of [`upsample_trilinear`], mapping an output-shaped
/// gradient back to `input_shape`.
pub fn upsample_trilinear_adjoint(grad_out: &Tensor, factor: usize, input_shape: &[usize]) -> Result<Tensor> {
    if input_shape.len() != 4 {
        return Err(Error::InvalidShape {
            shape: input_shape.to_vec(),
            reason: "expected (C, D, H, W)".into(),
        });
    }
    let expected: Vec<usize> = std::iter::once(input_shape[0])
        .chain(input_shape[1..].iter().map(|e| e * factor))
        .collect();
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::shape(grad_out.shape(), &expected));
    }
    let mut shape = [expected[0], expected[1], expected[2], expected[3]];
    let mut data = grad_out.data().to_vec();
    for axis in (1..4).rev() {
        let taps = linear_taps(input_shape[axis], factor);
        let (nd, ns) = resample_axis_adjoint(&data, &shape, axis, input_shape[axis], &taps);
        data = nd;
        shape = ns;
    }
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tanh_of_zero() {
        let t = Tensor::scalar(0.0).unary(UnaryOp::Tanh);
        assert_eq!(t.data(), &[0.0]);
    }

    #[test]
    fn clip_clamps() {
        let t = Tensor::from_vec(vec![-3.0, 0.5, 7.0]).unary(UnaryOp::Clip { lo: -1.0, hi: 1.0 });
        assert_eq!(t.data(), &[-1.0, 0.5, 1.0]);
    }

    #[test]
    fn exp_matches_std() {
        let t = Tensor::from_vec(vec![0.0, 1.0]).unary(UnaryOp::Exp);
        assert_eq!(t.data(), &[1.0, std::f64::consts::E]);
    }

    #[test]
    fn binary_shape_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn divide_by_zero_is_ieee() {
        let t = Tensor::from_vec(vec![1.0, -1.0, 0.0])
            .binary(BinaryOp::Div, Rhs::Scalar(0.0))
            .unwrap();
        assert_eq!(t.data()[0], f64::INFINITY);
        assert_eq!(t.data()[1], f64::NEG_INFINITY);
        assert!(t.data()[2].is_nan());
    }

    #[test]
    fn reductions() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(t.reduce(ReduceOp::Sum, &[0], false).unwrap().item(), 6.0);
        let t = Tensor::from_vec(vec![2.0, 4.0]);
        assert_eq!(t.reduce(ReduceOp::Mean, &[0], false).unwrap().item(), 3.0);
        let t = Tensor::from_vec(vec![0.1, 0.9, 0.3]);
        assert_eq!(t.reduce(ReduceOp::Argmax, &[0], false).unwrap().item(), 1.0);
        assert_eq!(t.reduce(ReduceOp::Max, &[0], false).unwrap().item(), 0.9);
        assert_eq!(t.reduce(ReduceOp::Sum, &[], false).unwrap(), t);
    }

    #[test]
    fn reduce_partial_axes() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows = t.reduce(ReduceOp::Sum, &[1], false).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[6.0, 15.0]);
        let cols = t.reduce(ReduceOp::Mean, &[0], true).unwrap();
        assert_eq!(cols.shape(), &[1, 3]);
        assert_eq!(cols.data(), &[2.5, 3.5, 4.5]);
        let am = t.reduce(ReduceOp::Argmax, &[0, 1], false).unwrap();
        assert_eq!(am.item(), 5.0);
        assert!(t.reduce(ReduceOp::Sum, &[2], false).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::ones(&[1, 1, 1, 1, 1]);
        assert_eq!(conv3d(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_all_ones_sum() {
        let x = Tensor::ones(&[1, 3, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3, 3]);
        let y = conv3d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 27.0);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Tensor::ones(&[1, 4, 4, 4]);
        let k = Tensor::ones(&[2, 1, 3, 3, 3]);
        let y = conv3d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2, 2]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::ones(&[2, 4, 4, 4]);
        let k = Tensor::ones(&[1, 3, 3, 3, 3]);
        assert!(matches!(
            conv3d(&x, &k, None, 1, 1),
            Err(Error::ChannelMismatch { input: 2, kernel: 3 })
        ));
    }

    /// Naive six-loop reference used to check the row-sliced kernels.
    fn conv_reference(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [ci_n, d, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let co_n = k.shape()[0];
        let ks = k.shape()[2];
        let od = (d + 2 * pad - ks) / stride + 1;
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let mut out = Tensor::zeros(&[co_n, od, oh, ow]);
        for co in 0..co_n {
            for a in 0..od {
                for b in 0..oh {
                    for c in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..ci_n {
                            for p in 0..ks {
                                for q in 0..ks {
                                    for r in 0..ks {
                                        let i = (a * stride + p) as isize - pad as isize;
                                        let j = (b * stride + q) as isize - pad as isize;
                                        let l = (c * stride + r) as isize - pad as isize;
                                        if i < 0 || j < 0 || l < 0 || i >= d as isize || j >= h as isize || l >= w as isize {
                                            continue;
                                        }
                                        s += k.get(&[co, ci, p, q, r]) * x.get(&[ci, i as usize, j as usize, l as usize]);
                                    }
                                }
                            }
                        }
                        out.set(&[co, a, b, c], s);
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_reference_and_adjoints() {
        for &(stride, pad, d, h, w) in &[(1, 1, 4, 5, 3), (2, 1, 4, 4, 5), (1, 0, 3, 4, 4), (2, 0, 5, 5, 5)] {
            let x = Tensor::new(&[2, d, h, w], pseudo(2 * d * h * w, 1)).unwrap();
            let k = Tensor::new(&[3, 2, 3, 3, 3], pseudo(3 * 2 * 27, 2)).unwrap();
            let y = conv3d(&x, &k, None, stride, pad).unwrap();
            let r = conv_reference(&x, &k, stride, pad);
            assert!(y.max_abs_diff(&r).unwrap() < 1e-12);

            // <conv(x), g> == <x, conv_in^T(g)> == <k, conv_k^T(g)>
            let g = Tensor::new(y.shape(), pseudo(y.len(), 3)).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gi = conv3d_grad_input(&g, &k, x.shape(), stride, pad).unwrap();
            let rhs_x: f64 = x.data().iter().zip(gi.data()).map(|(a, b)| a * b).sum();
            let gk = conv3d_grad_kernel(&g, &x, k.shape(), stride, pad).unwrap();
            let rhs_k: f64 = k.data().iter().zip(gk.data()).map(|(a, b)| a * b).sum();
            assert!(close(lhs, rhs_x, 1e-10), "{lhs} {rhs_x}");
            assert!(close(lhs, rhs_k, 1e-10), "{lhs} {rhs_k}");
        }
    }

    #[test]
    fn conv_bias_adds_per_channel() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let k = Tensor::ones(&[2, 1, 1, 1, 1]);
        let b = Tensor::from_vec(vec![0.5, -1.5]);
        let y = conv3d(&x, &k, Some(&b), 1, 0).unwrap();
        assert!(y.data()[..8].iter().all(|&v| v == 0.5));
        assert!(y.data()[8..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn upsample_constant_and_shape() {
        let x = Tensor::full(&[2, 2, 2, 2], 3.25);
        let y = upsample_trilinear(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn upsample_hand_evaluated_line() {
        // Degenerate extent along d and h; [a, b] along w.
        let (a, b) = (2.0, 6.0);
        let x = Tensor::new(&[1, 1, 1, 2], vec![a, b]).unwrap();
        let y = upsample_trilinear(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 4]);
        // sources: -0.25 -> 0 (clamped), 0.25, 0.75, 1.25 -> 1 (clamped)
        let expect = [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
        for (got, want) in y.data()[..4].iter().zip(expect) {
            assert!(close(*got, want, 1e-15));
        }
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        let x = Tensor::new(&[2, 2, 3, 2], pseudo(24, 7)).unwrap();
        let y = upsample_trilinear(&x, 2).unwrap();
        let g = Tensor::new(y.shape(), pseudo(y.len(), 8)).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = upsample_trilinear_adjoint(&g, 2, x.shape()).unwrap();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!(close(lhs, rhs, 1e-12));
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn set_then_get_round_trips(shape in proptest::collection::vec(1usize..5, 1..=5), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let mut t = Tensor::zeros(&shape);
            let vals = pseudo(n, seed);
            let mut idx = vec![0usize; shape.len()];
            for v in &vals {
                t.set(&idx, *v);
                prop_assert_eq!(t.get(&idx), *v);
                for ax in (0..shape.len()).rev() {
                    idx[ax] += 1;
                    if idx[ax] < shape[ax] { break; }
                    idx[ax] = 0;
                }
            }
            prop_assert_eq!(t.data(), vals.as_slice());
        }

        #[test]
        fn conv_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()) {
            let x = Tensor::new(&[2, 4, 4, 4], pseudo(128, seed)).unwrap();
            let y = Tensor::new(&[2, 4, 4, 4], pseudo(128, seed ^ 0xabc)).unwrap();
            let k = Tensor::new(&[2, 2, 3, 3, 3], pseudo(108, seed ^ 0x123)).unwrap();
            let mix = x.scale(alpha).add(&y.scale(beta)).unwrap();
            let lhs = conv3d(&mix, &k, None, 1, 1).unwrap();
            let rhs = conv3d(&x, &k, None, 1, 1).unwrap().scale(alpha)
                .add(&conv3d(&y, &k, None, 1, 1).unwrap().scale(beta)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }

        #[test]
        fn reduce_sum_matches_sequential(shape in proptest::collection::vec(1usize..6, 1..=4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let t = Tensor::new(&shape, pseudo(n, seed)).unwrap();
            let axes: Vec<usize> = (0..shape.len()).collect();
            let mut seq = 0.0;
            for v in t.data() { seq += v; }
            prop_assert!((t.reduce(ReduceOp::Sum, &axes, false).unwrap().item() - seq).abs() <= 1e-12);
        }
    }
}
