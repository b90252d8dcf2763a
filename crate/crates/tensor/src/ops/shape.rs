//! Pure data-movement primitives. Each adjoint is the inverse movement.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, Var};
use crate::tensor::{
    broadcast_shapes, check_perm, normalize_axis, numel, permute_raw, reduce_to_shape,
    split_at_axis, strides, zip_broadcast, Tensor,
};

struct ReshapeOp;

impl<T: Real> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.reshape(inputs[0].shape()).unwrap())]
    }
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl<T: Real> Backward<T> for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(permute_raw(grad, &self.inverse))]
    }
}

struct ConcatOp {
    axis: usize,
}

impl<T: Real> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut start = 0;
        inputs
            .iter()
            .zip(needs)
            .map(|(x, &need)| {
                let len = x.shape()[self.axis];
                let g = need.then(|| slice_raw(grad, self.axis, start, len));
                start += len;
                g
            })
            .collect()
    }
}

struct SliceOp {
    axis: usize,
    start: usize,
}

impl<T: Real> Backward<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].shape();
        let (outer, len, inner) = split_at_axis(shape, self.axis);
        let glen = grad.shape()[self.axis];
        let mut out = vec![T::zero(); numel(shape)];
        let g = grad.data();
        for o in 0..outer {
            let dst = (o * len + self.start) * inner;
            let src = o * glen * inner;
            out[dst..dst + glen * inner].copy_from_slice(&g[src..src + glen * inner]);
        }
        vec![Some(Tensor::new(shape, out).unwrap())]
    }
}

struct ExpandOp;

impl<T: Real> Backward<T> for ExpandOp {
    fn name(&self) -> &'static str {
        "expand"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(reduce_to_shape(grad, inputs[0].shape()))]
    }
}

struct RollOp {
    shifts: Vec<isize>,
}

impl<T: Real> Backward<T> for RollOp {
    fn name(&self) -> &'static str {
        "roll"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let neg: Vec<isize> = self.shifts.iter().map(|s| -s).collect();
        vec![Some(roll_raw(grad, &neg))]
    }
}

struct IndexSelectOp {
    indices: Vec<usize>,
}

impl<T: Real> Backward<T> for IndexSelectOp {
    fn name(&self) -> &'static str {
        "index_select"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].shape();
        let row = numel(&shape[1..]);
        let mut out = vec![T::zero(); numel(shape)];
        for (r, &src) in self.indices.iter().enumerate() {
            for (d, &g) in out[src * row..(src + 1) * row].iter_mut().zip(&grad.data()[r * row..(r + 1) * row]) {
                *d += g;
            }
        }
        vec![Some(Tensor::new(shape, out).unwrap())]
    }
}

pub(crate) fn slice_raw<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, full, inner) = split_at_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[src..src + len * inner]);
    }
    Tensor::new(&shape, out).unwrap()
}

/// Toroidal roll: `out[i] = x[(i - shift) mod n]` along every axis.
pub(crate) fn roll_raw<T: Real>(x: &Tensor<T>, shifts: &[isize]) -> Tensor<T> {
    let shape = x.shape();
    let st = strides(shape);
    let rank = shape.len();
    let norm: Vec<usize> = shifts
        .iter()
        .zip(shape)
        .map(|(&s, &n)| if n == 0 { 0 } else { s.rem_euclid(n as isize) as usize })
        .collect();
    if norm.iter().all(|&s| s == 0) {
        return x.clone();
    }
    let mut out = vec![T::zero(); x.numel()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for a in 0..rank {
            let n = shape[a];
            src += ((idx[a] + n - norm[a]) % n) * st[a];
        }
        *o = x.data()[src];
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::new(shape, out).unwrap()
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(out, &[self], ReshapeOp))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        check_perm(perm, x.rank())?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out = permute_raw(&x, perm);
        Ok(self.tape.record(out, &[self], PermuteOp { inverse }))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: x.rank(),
            });
        }
        if start + len > x.shape()[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, x.shape()),
            ));
        }
        let out = slice_raw(&x, axis, start, len);
        Ok(self.tape.record(out, &[self], SliceOp { axis, start }))
    }

    /// Broadcasts to `shape` under trailing-dimension rules.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if broadcast_shapes(x.shape(), shape).as_deref() != Some(shape) {
            return Err(TensorError::mismatch("expand", x.shape(), shape));
        }
        let out = zip_broadcast(&Tensor::zeros(shape), &x, "expand", |_, v| v)?;
        Ok(self.tape.record(out, &[self], ExpandOp))
    }

    /// Toroidal roll by `shifts[a]` along each axis `a` (positive moves
    /// elements toward higher indices).
    pub fn roll(self, shifts: &[isize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if shifts.len() != x.rank() {
            return Err(TensorError::invalid(
                "roll",
                format!("{} shifts for rank {}", shifts.len(), x.rank()),
            ));
        }
        let out = roll_raw(&x, shifts);
        Ok(self.tape.record(out, &[self], RollOp { shifts: shifts.to_vec() }))
    }

    /// Gathers rows (entries along axis 0).
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(TensorError::invalid("index_select", "scalar has no rows"));
        }
        let rows = x.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "index_select",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let row = numel(&x.shape()[1..]);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(&shape, out)?;
        Ok(self.tape.record(out, &[self], IndexSelectOp { indices: indices.to_vec() }))
    }

    /// Appends `amount[a]` zeros at the end of each axis `a`.
    pub fn pad_end(self, amount: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if amount.len() != shape.len() {
            return Err(TensorError::invalid("pad", "one pad amount per axis required"));
        }
        let mut cur = self;
        for (axis, &p) in amount.iter().enumerate() {
            if p == 0 {
                continue;
            }
            let mut zshape = cur.shape();
            zshape[axis] = p;
            let zeros = self.tape.constant(Tensor::zeros(&zshape));
            cur = Var::concat(&[cur, zeros], axis as isize)?;
        }
        Ok(cur)
    }

    pub fn concat(parts: &[Var<'t, T>], axis: isize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rank = values[0].rank();
        let axis = normalize_axis(axis, rank, "concat")?;
        let mut shape = values[0].shape().to_vec();
        shape[axis] = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let ok = v.rank() == rank
                && (0..rank).all(|a| a == axis || v.shape()[a] == values[0].shape()[a]);
            if !ok {
                return Err(TensorError::mismatch("concat", values[0].shape(), v.shape()));
            }
            shape[axis] += v.shape()[axis];
        }
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(first.tape.record(out, parts, ConcatOp { axis }))
    }
}
