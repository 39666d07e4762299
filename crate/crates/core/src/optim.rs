//! Adam optimizer over a [`ParamStore`].

use std::collections::HashMap;

use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::network::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clears the moment estimates and the bias-correction counter.
    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(0.0);
        }
    }

    /// Applies one update. Parameters missing from `grads` are treated as
    /// having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<ParamId, Tensor>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in grads {
            if *id >= params.len() {
                return Err(Error::InvalidArgument(format!("unknown parameter id {id}")));
            }
            if g.shape() != params.get(*id).shape() {
                return Err(Error::shape(g.shape(), params.get(*id).shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in 0..params.len() {
            let g = grads.get(&id);
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::from_vec(vec![1.0, -2.0, 0.0]));
        let mut opt = Adam::new(&p, 0.1).unwrap();
        let g = HashMap::from([(0, Tensor::from_vec(vec![3.0, -0.5, 0.0]))]);
        opt.step(&mut p, &g).unwrap();
        let w = p.get(0).data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-7);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::from_vec(vec![5.0, -3.0]));
        let mut opt = Adam::new(&p, 0.05).unwrap();
        for _ in 0..2000 {
            let g = p.get(0).scale(2.0);
            opt.step(&mut p, &HashMap::from([(0, g)])).unwrap();
        }
        assert!(p.get(0).max_abs() < 1e-3);
    }

    #[test]
    fn reset_restarts_bias_correction() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::from_vec(vec![0.0]));
        let mut opt = Adam::new(&p, 0.1).unwrap();
        let g = HashMap::from([(0, Tensor::from_vec(vec![1.0]))]);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.reset();
        assert_eq!(opt.steps_taken(), 0);
        let before = p.get(0).data()[0];
        opt.step(&mut p, &HashMap::from([(0, Tensor::from_vec(vec![-1.0]))])).unwrap();
        assert!((p.get(0).data()[0] - before - 0.1).abs() < 1e-7);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::from_vec(vec![0.0, 1.0]));
        let mut opt = Adam::new(&p, 0.1).unwrap();
        let g = HashMap::from([(0, Tensor::from_vec(vec![1.0]))]);
        assert!(matches!(opt.step(&mut p, &g), Err(Error::ShapeMismatch { .. })));
        assert!(Adam::new(&p, 0.0).is_err());
    }
}
