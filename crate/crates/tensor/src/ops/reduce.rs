use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, Var};
use crate::tensor::{normalize_axis, reduce_to_shape, zip_broadcast, Tensor};

struct MeanOp {
    keep_shape: Vec<usize>,
    count: usize,
}

impl<T: Real> Backward<T> for MeanOp {
    fn name(&self) -> &'static str {
        "reduce_mean"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let scale = T::one() / T::lit(self.count as f64);
        let g = grad.reshape(&self.keep_shape).unwrap().map(|v| v * scale);
        let spread = zip_broadcast(&Tensor::zeros(inputs[0].shape()), &g, "reduce_mean", |_, v| v);
        vec![Some(spread.unwrap())]
    }
}

struct SumOp;

impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))]
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Arithmetic mean over `axes`; reduced axes are removed. An empty axis
    /// list is the identity.
    pub fn mean_axes(self, axes: &[isize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut ax: Vec<usize> = axes
            .iter()
            .map(|&a| normalize_axis(a, rank, "reduce_mean"))
            .collect::<Result<_>>()?;
        ax.sort_unstable();
        if ax.windows(2).any(|w| w[0] == w[1]) {
            return Err(TensorError::invalid("reduce_mean", format!("repeated axis in {axes:?}")));
        }
        if ax.is_empty() {
            return Ok(self);
        }
        if ax.iter().any(|&a| x.shape()[a] == 0) {
            return Err(TensorError::invalid("reduce_mean", "cannot average a zero-length axis"));
        }
        let keep_shape: Vec<usize> = (0..rank)
            .map(|i| if ax.contains(&i) { 1 } else { x.shape()[i] })
            .collect();
        let out_shape: Vec<usize> = (0..rank)
            .filter(|i| !ax.contains(i))
            .map(|i| x.shape()[i])
            .collect();
        let count = ax.iter().map(|&a| x.shape()[a]).product::<usize>();
        let scale = T::one() / T::lit(count as f64);
        let summed = reduce_to_shape(&x, &keep_shape).map(|v| v * scale);
        let out = summed.reshape(&out_shape)?;
        Ok(self.tape.record(out, &[self], MeanOp { keep_shape, count }))
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean(self) -> Var<'t, T> {
        let rank = self.value().rank() as isize;
        if rank == 0 {
            return self;
        }
        let axes: Vec<isize> = (0..rank).collect();
        self.mean_axes(&axes).expect("all axes are valid")
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.record(Tensor::scalar(s), &[self], SumOp)
    }
}
