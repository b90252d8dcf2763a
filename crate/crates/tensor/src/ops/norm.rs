use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, Var};
use crate::tensor::{normalize_axis, split_at_axis, Tensor};

struct LayerNormOp<T> {
    channels: usize,
    mean: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> Backward<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = self.channels;
        let cf = T::lit(c as f64);
        let xs = x.data();
        let gs = grad.data();
        let gm = gamma.data();

        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); xs.len()];
            dx.par_chunks_mut(c).enumerate().for_each(|(r, out)| {
                let (mu, rs) = (self.mean[r], self.rstd[r]);
                let xr = &xs[r * c..(r + 1) * c];
                let gr = &gs[r * c..(r + 1) * c];
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for j in 0..c {
                    let d = gr[j] * gm[j];
                    sum_d += d;
                    sum_dx += d * (xr[j] - mu) * rs;
                }
                let (md, mdx) = (sum_d / cf, sum_dx / cf);
                for j in 0..c {
                    let xhat = (xr[j] - mu) * rs;
                    out[j] = rs * (gr[j] * gm[j] - md - xhat * mdx);
                }
            });
            Tensor::new(x.shape(), dx).unwrap()
        });
        let dgamma = needs[1].then(|| {
            let mut acc = vec![T::zero(); c];
            for (r, (xr, gr)) in xs.chunks(c).zip(gs.chunks(c)).enumerate() {
                for j in 0..c {
                    acc[j] += gr[j] * (xr[j] - self.mean[r]) * self.rstd[r];
                }
            }
            Tensor::new(&[c], acc).unwrap()
        });
        let dbeta = needs[2].then(|| {
            let mut acc = vec![T::zero(); c];
            for gr in gs.chunks(c) {
                for j in 0..c {
                    acc[j] += gr[j];
                }
            }
            Tensor::new(&[c], acc).unwrap()
        });
        vec![dx, dgamma, dbeta]
    }
}

struct SoftmaxOp {
    axis: usize,
}

impl<T: Real> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (outer, len, inner) = split_at_axis(output.shape(), self.axis);
        let (y, g) = (output.data(), grad.data());
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let dot: T = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                for j in 0..len {
                    dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                }
            }
        }
        vec![Some(Tensor::new(output.shape(), dx).unwrap())]
    }
}

pub(crate) fn softmax_raw<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).fold(T::neg_infinity(), |m, j| m.max(xs[at(j)]));
            let mut s = T::zero();
            for j in 0..len {
                let e = (xs[at(j)] - m).exp();
                out[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                out[at(j)] /= s;
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

impl<'t, T: Real> Var<'t, T> {
    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&0);
        if c == 0 {
            return Err(TensorError::invalid("layer_norm", "channel axis has length 0"));
        }
        if eps <= 0.0 {
            return Err(TensorError::invalid("layer_norm", "eps must be positive"));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::mismatch("layer_norm", x.shape(), &gamma.shape()));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let (gm, bt) = (gv.data(), bv.data());
        let cf = T::lit(c as f64);
        let rows = x.numel() / c;
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for (r, (xr, or)) in x.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let mu = xr.iter().copied().sum::<T>() / cf;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
            let rs = T::one() / (var + T::lit(eps)).sqrt();
            for j in 0..c {
                or[j] = (xr[j] - mu) * rs * gm[j] + bt[j];
            }
            mean[r] = mu;
            rstd[r] = rs;
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.tape.record(
            out,
            &[self, gamma, beta],
            LayerNormOp {
                channels: c,
                mean,
                rstd,
            },
        ))
    }

    /// Numerically stable softmax along `axis` (negative counts from the end).
    pub fn softmax(self, axis: isize) -> Result<Var<'t, T>> {
        let x = self.value();
        let axis = normalize_axis(axis, x.rank(), "softmax")?;
        let out = softmax_raw(&x, axis);
        Ok(self.tape.record(out, &[self], SoftmaxOp { axis }))
    }
}
