use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, Var};
use crate::tensor::{broadcast_shapes, broadcast_strides, numel, reduce_to_shape, Tensor};

/// Below this many multiply-adds the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

struct Layout {
    batch: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

impl Layout {
    fn of(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(TensorError::invalid(
                "matmul",
                format!("operands need rank >= 2, got {a:?} and {b:?}"),
            ));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(TensorError::mismatch("matmul", a, b));
        }
        let a_batch = a[..a.len() - 2].to_vec();
        let b_batch = b[..b.len() - 2].to_vec();
        let batch =
            broadcast_shapes(&a_batch, &b_batch).ok_or_else(|| TensorError::mismatch("matmul", a, b))?;
        Ok(Layout {
            batch,
            a_batch,
            b_batch,
            m,
            k,
            n,
        })
    }

    /// Matrix offsets (in units of matrices) of each output batch entry.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let sa = broadcast_strides(&self.a_batch, &self.batch);
        let sb = broadcast_strides(&self.b_batch, &self.batch);
        let nb = numel(&self.batch);
        let mut idx = vec![0usize; self.batch.len()];
        let mut out = Vec::with_capacity(nb);
        for _ in 0..nb {
            let oa = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
            let ob = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
            out.push((oa, ob));
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < self.batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        out
    }

    fn shape_with(&self, r: usize, c: usize) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.extend([r, c]);
        s
    }
}

/// c[m,n] = a[m,k] * b[k,n], row by row.
fn gemm_row<T: Real>(a_row: &[T], b: &[T], n: usize, c_row: &mut [T]) {
    for (p, &x) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (c, &y) in c_row.iter_mut().zip(b_row) {
            *c += x * y;
        }
    }
}

/// c[m,k] = g[m,n] * b[k,n]^T
fn gemm_nt_row<T: Real>(g_row: &[T], b: &[T], n: usize, c_row: &mut [T]) {
    for (p, c) in c_row.iter_mut().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        *c = g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
    }
}

pub(crate) fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let l = Layout::of(a.shape(), b.shape())?;
    let (m, k, n) = (l.m, l.k, l.n);
    let offsets = l.offsets();
    let mut out = vec![T::zero(); offsets.len() * m * n];
    let work = offsets.len() * m * k * n;
    let run = |(bi, c): (usize, &mut [T])| {
        let (oa, ob) = offsets[bi / m];
        let i = bi % m;
        let a_row = &a.data()[oa * m * k + i * k..oa * m * k + (i + 1) * k];
        gemm_row(a_row, &b.data()[ob * k * n..(ob + 1) * k * n], n, c);
    };
    if n > 0 {
        if work >= PAR_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(run);
        } else {
            out.chunks_mut(n).enumerate().for_each(run);
        }
    }
    Tensor::new(&l.shape_with(m, n), out)
}

struct MatMulOp;

impl<T: Real> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let l = Layout::of(a.shape(), b.shape()).expect("validated in forward");
        let (m, k, n) = (l.m, l.k, l.n);
        let offsets = l.offsets();
        let work = offsets.len() * m * k * n;
        let g = grad.data();

        let ga = needs[0].then(|| {
            // da[i,p] = sum_j g[i,j] b[p,j]
            let mut da = vec![T::zero(); offsets.len() * m * k];
            let run = |(bi, c): (usize, &mut [T])| {
                let (_, ob) = offsets[bi / m];
                let gi = bi * n;
                gemm_nt_row(&g[gi..gi + n], &b.data()[ob * k * n..(ob + 1) * k * n], n, c);
            };
            if k > 0 {
                if work >= PAR_THRESHOLD {
                    da.par_chunks_mut(k).enumerate().for_each(run);
                } else {
                    da.chunks_mut(k).enumerate().for_each(run);
                }
            }
            let full = Tensor::new(&l.shape_with(m, k), da).unwrap();
            reduce_to_shape(&full, a.shape())
        });

        let gb = needs[1].then(|| {
            // db[p,j] = sum_i a[i,p] g[i,j]
            let mut db = vec![T::zero(); offsets.len() * k * n];
            let run = |(bi, c): (usize, &mut [T])| {
                let (oa, _) = offsets[bi / k];
                let p = bi % k;
                let a_mat = &a.data()[oa * m * k..(oa + 1) * m * k];
                let g_mat = &g[(bi / k) * m * n..(bi / k + 1) * m * n];
                for i in 0..m {
                    let x = a_mat[i * k + p];
                    for (c, &y) in c.iter_mut().zip(&g_mat[i * n..(i + 1) * n]) {
                        *c += x * y;
                    }
                }
            };
            if n > 0 {
                if work >= PAR_THRESHOLD {
                    db.par_chunks_mut(n).enumerate().for_each(run);
                } else {
                    db.chunks_mut(n).enumerate().for_each(run);
                }
            }
            let full = Tensor::new(&l.shape_with(k, n), db).unwrap();
            reduce_to_shape(&full, b.shape())
        });
        vec![ga, gb]
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs)?;
        let out = matmul_forward(&self.value(), &rhs.value())?;
        Ok(self.tape.record(out, &[self, rhs], MatMulOp))
    }
}
