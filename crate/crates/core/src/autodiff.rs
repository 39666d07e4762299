//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every value produced during one forward pass together
//! with the rule for propagating gradients to its parents. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Tape::backward`] walks it once in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fields;
use crate::tensor::{self, Tensor};

/// Identifier of a trainable parameter inside a parameter store.
pub type ParamId = usize;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Square(Var),
    Clip(Var, f64, f64),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    SumSpatial(Var),
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Upsample(Var, usize),
    Concat(Vec<Var>),
    Warp { src: Var, field: Var },
    ForwardDiff(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the leaf `v`, or `None` when no gradient
    /// reached it. Interior nodes release their gradients during the sweep.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient w.r.t. `v`, materialising zeros when unreachable.
    pub fn wrt_or_zero(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient map over every parameter placed on the tape. Parameters the
    /// loss does not depend on map to zero tensors.
    pub fn params(&self) -> HashMap<ParamId, Tensor> {
        let mut out: HashMap<ParamId, Tensor> = HashMap::new();
        for &(id, v) in &self.params {
            let g = self.wrt_or_zero(v);
            match out.get_mut(&id) {
                Some(acc) => acc.add_assign(&g).expect("parameter shapes agree"),
                None => {
                    out.insert(id, g);
                }
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives gradients but is not a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Same value as `x`, with gradient flow blocked.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Div(a, b), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(y, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(y, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(y, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(y, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(y, Op::Log(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(y, Op::Tanh(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(y, Op::Square(a), rg)
    }

    /// Hard clip. The backward rule passes the gradient where
    /// `lo <= x <= hi` and blocks it outside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("clip bounds {lo} >= {hi}")));
        }
        let y = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        Ok(self.push(y, Op::Clip(a, lo, hi), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let y = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(y, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(y, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(y, Op::Mean(a), rg)
    }

    /// `(C, D, H, W) -> (C)` per-channel spatial sum.
    pub fn sum_spatial(&mut self, a: Var) -> Result<Var> {
        tensor::spatial_dims(self.value(a))?;
        let y = tensor::sum_spatial(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::SumSpatial(a), rg))
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let y = tensor::conv3d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            y,
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let y = tensor::upsample_trilinear(self.value(a), factor)?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::Upsample(a, factor), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(y, Op::Concat(parts.to_vec()), rg))
    }

    /// Trilinear warp of every channel of `src` by the `(3, D, H, W)` field.
    pub fn warp(&mut self, src: Var, field: Var) -> Result<Var> {
        let y = fields::sample_trilinear(self.value(src), self.value(field))?;
        let rg = self.rg(src) || self.rg(field);
        Ok(self.push(y, Op::Warp { src, field }, rg))
    }

    pub fn forward_diff(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = fields::forward_diff(self.value(a), axis)?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::ForwardDiff(a, axis), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.map(|p| (p, Var(i))))
            .collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, params, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            if !self.rg(v) {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.clone())?;
                }
                if self.rg(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.clone())?;
                }
                if self.rg(*b) {
                    acc(*b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.mul(val(*b))?)?;
                }
                if self.rg(*b) {
                    acc(*b, g.mul(val(*a))?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.rg(*a) {
                    acc(*a, g.zip_map(bv, |gi, bi| gi / bi)?)?;
                }
                if self.rg(*b) {
                    let t = g.zip_map(&node.value, |gi, yi| gi * yi)?;
                    acc(*b, t.zip_map(bv, |ti, bi| -ti / bi)?)?;
                }
            }
            Op::Neg(a) => acc(*a, g.scale(-1.0))?,
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::Exp(a) => acc(*a, g.mul(&node.value)?)?,
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |gi, x| gi / x)?)?,
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?)?,
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |gi, x| 2.0 * x * gi)?)?,
            Op::Clip(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    g.zip_map(val(*a), |gi, x| if x >= lo && x <= hi { gi } else { 0.0 })?,
                )?
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                acc(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { s * gi })?)?
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item()))?,
            Op::Mean(a) => {
                let x = val(*a);
                acc(*a, Tensor::full(x.shape(), g.item() / x.len() as f64))?
            }
            Op::SumSpatial(a) => {
                let x = val(*a);
                let plane = x.len() / x.shape()[0];
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gc| std::iter::repeat(gc).take(plane))
                    .collect();
                acc(*a, Tensor::new(x.shape(), data)?)?
            }
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                if self.rg(*input) {
                    let gi = tensor::conv3d_grad_input(g, val(*kernel), val(*input).shape(), *stride, *padding)?;
                    acc(*input, gi)?;
                }
                if self.rg(*kernel) {
                    let gk = tensor::conv3d_grad_kernel(g, val(*input), val(*kernel).shape(), *stride, *padding)?;
                    acc(*kernel, gk)?;
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        acc(*b, tensor::sum_spatial(g)?)?;
                    }
                }
            }
            Op::Upsample(a, factor) => {
                let ga = tensor::upsample_trilinear_adjoint(g, *factor, val(*a).shape())?;
                acc(*a, ga)?
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = val(p).shape()[0];
                    if self.rg(p) {
                        acc(p, g.channel_slice(start, c)?)?;
                    }
                    start += c;
                }
            }
            Op::Warp { src, field } => {
                let (gs, gf) = fields::sample_trilinear_backward(val(*src), val(*field), g)?;
                if self.rg(*src) {
                    acc(*src, gs)?;
                }
                if self.rg(*field) {
                    acc(*field, gf)?;
                }
            }
            Op::ForwardDiff(a, axis) => {
                let ga = fields::forward_diff_adjoint(g, *axis, val(*a).shape())?;
                acc(*a, ga)?
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient() {
        let mut t = Tape::new();
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.5]);
        let w = t.variable(Tensor::from_vec(vec![0.3, 0.1, -0.4]));
        let xc = t.constant(x.clone());
        let p = t.mul(w, xc).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &x);
        assert!(g.wrt(xc).is_none());
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut t = Tape::new();
        let w = t.variable(Tensor::scalar(0.0));
        let y = t.tanh(w);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::from_vec(vec![1.5, -0.5]));
        let d = t.detach(x);
        let loss = t.sum(d);
        let g = t.backward(loss).unwrap();
        assert!(g.wrt(x).is_none());
        assert_eq!(g.wrt_or_zero(x), Tensor::zeros(&[2]));
    }

    #[test]
    fn detach_severs_one_product_branch() {
        let mut t = Tape::new();
        let xv = Tensor::from_vec(vec![2.0, -3.0]);
        let x = t.variable(xv.clone());
        let d = t.detach(x);
        let p = t.mul(d, x).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        // d/dx [stop(x)·x] = stop(x)
        assert_eq!(g.wrt(x).unwrap(), &xv);
    }

    #[test]
    fn repeated_parameter_use_accumulates() {
        let wv = Tensor::from_vec(vec![0.7, -1.1]);
        let single = |coef: f64| {
            let mut t = Tape::new();
            let w = t.param(0, wv.clone());
            let s = t.square(w);
            let s = t.scale(s, coef);
            let loss = t.sum(s);
            t.backward(loss).unwrap().params()[&0].clone()
        };
        let mut t = Tape::new();
        let w = t.param(0, wv.clone());
        let a = t.square(w);
        let a = t.scale(a, 2.0);
        let b = t.square(w);
        let b = t.scale(b, -0.5);
        let s = t.add(a, b).unwrap();
        let loss = t.sum(s);
        let both = t.backward(loss).unwrap().params()[&0].clone();
        assert_eq!(both, single(2.0).add(&single(-0.5)).unwrap());
    }

    #[test]
    fn same_param_bound_twice_merges() {
        let mut t = Tape::new();
        let a = t.param(3, Tensor::scalar(2.0));
        let b = t.param(3, Tensor::scalar(2.0));
        let p = t.mul(a, b).unwrap();
        let g = t.backward(p).unwrap().params();
        assert_eq!(g[&3].item(), 4.0);
    }

    #[test]
    fn unreachable_param_is_zero() {
        let mut t = Tape::new();
        let a = t.param(0, Tensor::scalar(2.0));
        let _b = t.param(1, Tensor::from_vec(vec![1.0, 1.0]));
        let loss = t.square(a);
        let g = t.backward(loss).unwrap().params();
        assert_eq!(g[&0].item(), 4.0);
        assert_eq!(g[&1], Tensor::zeros(&[2]));
    }

    #[test]
    fn clip_rule() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::from_vec(vec![0.0, 3.0, -5.0]));
        let y = t.clip(x, -2.0, 2.0).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert!(t.clip(x, 1.0, 1.0).is_err());
    }
}
