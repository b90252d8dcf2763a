//! Parameter registration and the small layers shared by every block.

use morphwin_tensor::{ParamStore, ParamVars, Real, Tensor, Var};

use crate::error::Result;
use crate::init::{fan_in_normal, trunc_normal, SeededRng};

pub const LINEAR_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut SeededRng,
}

impl<T: Real> Init<'_, T> {
    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        Ok(self.store.insert(name, value)?)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = trunc_normal(&[fan_in, fan_out], LINEAR_STD, self.rng);
        self.tensor(&format!("{name}.weight"), w)?;
        self.tensor(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))
    }

    /// Variance-preserving variant for linears that resample features
    /// rather than feed a residual branch.
    pub fn linear_fan_in(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = fan_in_normal(&[fan_in, fan_out], fan_in, 1.0, self.rng);
        self.tensor(&format!("{name}.weight"), w)?;
        self.tensor(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))
    }

    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, slope: f64) -> Result<()> {
        let w = fan_in_normal(&[k, k, k, cin, cout], k * k * k * cin, slope, self.rng);
        self.tensor(&format!("{name}.weight"), w)?;
        self.tensor(&format!("{name}.bias"), Tensor::zeros(&[cout]))
    }

    pub fn zero_conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        self.tensor(&format!("{name}.weight"), Tensor::zeros(&[k, k, k, cin, cout]))?;
        self.tensor(&format!("{name}.bias"), Tensor::zeros(&[cout]))
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Result<()> {
        self.tensor(&format!("{name}.gamma"), Tensor::ones(&[channels]))?;
        self.tensor(&format!("{name}.beta"), Tensor::zeros(&[channels]))
    }
}

/// `y = x W + b` over the last axis; weight is `[in, out]`.
#[derive(Clone, Copy)]
pub struct Linear<'t, T: Real> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Real> Linear<'t, T> {
    pub fn bind(p: &ParamVars<'t, T>, name: &str) -> Result<Self> {
        Ok(Linear {
            weight: p.get(&format!("{name}.weight"))?,
            bias: p.get(&format!("{name}.bias"))?,
        })
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let fan_in = *shape.last().unwrap_or(&0);
        let rows = shape.iter().product::<usize>() / fan_in.max(1);
        let y = x.reshape(&[rows, fan_in])?.matmul(self.weight)?.add(self.bias)?;
        let mut out = shape;
        *out.last_mut().expect("rank >= 1") = self.fan_out();
        Ok(y.reshape(&out)?)
    }
}

#[derive(Clone, Copy)]
pub struct Conv<'t, T: Real> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
    pub stride: usize,
}

impl<'t, T: Real> Conv<'t, T> {
    pub fn bind(p: &ParamVars<'t, T>, name: &str, stride: usize) -> Result<Self> {
        Ok(Conv {
            weight: p.get(&format!("{name}.weight"))?,
            bias: p.get(&format!("{name}.bias"))?,
            stride,
        })
    }

    /// Same-padded convolution plus bias.
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let k = self.weight.shape()[0];
        Ok(x.conv3d(self.weight, self.stride, k / 2)?.add(self.bias)?)
    }
}

#[derive(Clone, Copy)]
pub struct Norm<'t, T: Real> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
}

impl<'t, T: Real> Norm<'t, T> {
    pub fn bind(p: &ParamVars<'t, T>, name: &str) -> Result<Self> {
        Ok(Norm {
            gamma: p.get(&format!("{name}.gamma"))?,
            beta: p.get(&format!("{name}.beta"))?,
        })
    }

    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.layer_norm(self.gamma, self.beta, NORM_EPS)?)
    }
}

/// Sigmoid approximation of GELU, `x * sigmoid(1.702 x)`.
pub fn gelu<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.mul(x.mul_scalar(1.702).sigmoid())?)
}
