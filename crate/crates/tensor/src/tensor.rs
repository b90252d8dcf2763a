use crate::error::{Result, TensorError};
use crate::real::Real;

/// Dense row-major array.
///
/// The shape is fixed at construction; `reshape` and friends return new
/// tensors. A rank-0 tensor (empty shape) holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = numel(shape);
        if n != data.len() {
            return Err(TensorError::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable element access; the shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(TensorError::mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, self.rank())?;
        Ok(permute_raw(self, perm))
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes aligned at the trailing dimension.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed as broadcast into `out` (0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_row_start, a_offset, b_offset)` once per contiguous row of the
/// output (last axis), with the per-row strides given by the last entries.
fn for_each_row(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let row = out[rank - 1];
    let rows = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for r in 0..rows {
        f(r * row, oa, ob);
        // odometer increment over leading axes
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Elementwise binary map with broadcasting.
pub(crate) fn zip_broadcast<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shapes(&a.shape, &b.shape)
        .ok_or_else(|| TensorError::mismatch(op, &a.shape, &b.shape))?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let n = numel(&out);
    let mut data = vec![T::zero(); n];
    if n == 0 {
        return Ok(Tensor { shape: out, data });
    }
    let rank = out.len();
    let row = if rank == 0 { 1 } else { out[rank - 1] };
    let (la, lb) = if rank == 0 { (0, 0) } else { (sa[rank - 1], sb[rank - 1]) };
    for_each_row(&out, &sa, &sb, |o, oa, ob| {
        for j in 0..row {
            data[o + j] = f(a.data[oa + j * la], b.data[ob + j * lb]);
        }
    });
    Ok(Tensor { shape: out, data })
}

/// Sums `g` down to `shape`, the inverse of broadcasting `shape` up to `g`'s shape.
pub fn reduce_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape == shape {
        return g.clone();
    }
    debug_assert!(broadcast_shapes(shape, &g.shape).as_deref() == Some(&g.shape[..]));
    let st = broadcast_strides(shape, &g.shape);
    let zero = vec![0; g.shape.len()];
    let mut out = vec![T::zero(); numel(shape)];
    let rank = g.shape.len();
    if rank == 0 {
        out[0] = g.data[0];
        return Tensor {
            shape: shape.to_vec(),
            data: out,
        };
    }
    let row = g.shape[rank - 1];
    let lt = st[rank - 1];
    for_each_row(&g.shape, &st, &zero, |o, ot, _| {
        for j in 0..row {
            out[ot + j * lt] += g.data[o + j];
        }
    });
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(TensorError::invalid(
            "permute",
            format!("permutation {perm:?} has wrong length for rank {rank}"),
        ));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of 0..{rank}"),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn permute_raw<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let st = strides(&x.shape);
    let s_perm: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let zero = vec![0; perm.len()];
    let mut data = vec![T::zero(); x.numel()];
    let rank = perm.len();
    if rank == 0 || data.is_empty() {
        data.copy_from_slice(&x.data);
        return Tensor {
            shape: out_shape,
            data,
        };
    }
    let row = out_shape[rank - 1];
    let ls = s_perm[rank - 1];
    for_each_row(&out_shape, &s_perm, &zero, |o, oi, _| {
        if ls == 1 {
            data[o..o + row].copy_from_slice(&x.data[oi..oi + row]);
        } else {
            for j in 0..row {
                data[o + j] = x.data[oi + j * ls];
            }
        }
    });
    Tensor {
        shape: out_shape,
        data,
    }
}

pub(crate) fn normalize_axis(axis: isize, rank: usize, op: &'static str) -> Result<usize> {
    let a = if axis < 0 { axis + rank as isize } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis: axis.unsigned_abs(),
            rank,
        });
    }
    Ok(a as usize)
}

/// (outer, axis length, inner) decomposition around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}
