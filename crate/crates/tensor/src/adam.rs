use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed like the parameters they track.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: IndexMap::new(),
            v: IndexMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Parameters without an entry in
    /// `grads` are treated as having zero gradient.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| TensorError::invalid("adam", format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(TensorError::mismatch("adam", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        let (c1, c2) = (T::lit(c1), T::lit(c2));

        for (name, p) in params.iter_mut() {
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + ob1 * gi;
                let vi = b2 * v.data()[i] + ob2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.data_mut()[i] -= update;
            }
        }
        Ok(())
    }
}
