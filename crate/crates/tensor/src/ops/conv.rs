//! Direct 3D cross-correlation on channels-last volumes.
//!
//! Input `[D, H, W, Cin]`, kernel `[k, k, k, Cin, Cout]`, zero padding. All
//! three kernels below compute each output element with a fixed sequential
//! loop order, so results do not depend on the rayon thread count.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 || kernel.len() != 5 {
            return Err(TensorError::invalid(
                "conv3d",
                format!("expected input [D,H,W,C] and kernel [k,k,k,Cin,Cout], got {x:?} and {kernel:?}"),
            ));
        }
        let k = kernel[0];
        if kernel[1] != k || kernel[2] != k || k % 2 == 0 {
            return Err(TensorError::invalid(
                "conv3d",
                format!("kernel must be cubic with odd size, got {kernel:?}"),
            ));
        }
        if kernel[3] != x[3] {
            return Err(TensorError::mismatch("conv3d", x, kernel));
        }
        if stride < 1 {
            return Err(TensorError::invalid("conv3d", "stride must be >= 1"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let span = x[a] + 2 * padding;
            if span < k {
                return Err(TensorError::invalid(
                    "conv3d",
                    format!("output size < 1 along axis {a} (dim {}, k {k}, padding {padding})", x[a]),
                ));
            }
            output[a] = (span - k) / stride + 1;
        }
        Ok(ConvGeometry {
            input: [x[0], x[1], x[2]],
            output,
            k,
            cin: x[3],
            cout: kernel[4],
            stride,
            padding,
        })
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, axis: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.padding as isize;
        (p >= 0 && (p as usize) < self.input[axis]).then_some(p as usize)
    }

    /// Output coordinate that reads input `i` through tap `t`, if any.
    #[inline]
    fn dst(&self, i: usize, t: usize, axis: usize) -> Option<usize> {
        let q = (i + self.padding) as isize - t as isize;
        if q < 0 || q as usize % self.stride != 0 {
            return None;
        }
        let o = q as usize / self.stride;
        (o < self.output[axis]).then_some(o)
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.output[0], self.output[1], self.output[2], self.cout]
    }
}

pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let [od, oh, ow] = g.output;
    let [_, ih, iw] = g.input;
    let (k, cin, cout) = (g.k, g.cin, g.cout);
    let xs = x.data();
    let ks = kernel.data();
    let mut out = vec![T::zero(); od * oh * ow * cout];
    // one task per output (z, y) row
    out.par_chunks_mut((ow * cout).max(1))
        .enumerate()
        .for_each(|(row, dst)| {
            let (oz, oy) = (row / oh, row % oh);
            for ox in 0..ow {
                let acc = &mut dst[ox * cout..(ox + 1) * cout];
                for tz in 0..k {
                    let Some(iz) = g.src(oz, tz, 0) else { continue };
                    for ty in 0..k {
                        let Some(iy) = g.src(oy, ty, 1) else { continue };
                        for tx in 0..k {
                            let Some(ix) = g.src(ox, tx, 2) else { continue };
                            let xv = &xs[((iz * ih + iy) * iw + ix) * cin..][..cin];
                            let tap = ((tz * k + ty) * k + tx) * cin * cout;
                            for (ci, &a) in xv.iter().enumerate() {
                                let w = &ks[tap + ci * cout..tap + (ci + 1) * cout];
                                for (o, &b) in acc.iter_mut().zip(w) {
                                    *o += a * b;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(&g.out_shape(), out).expect("conv output size")
}

/// dL/dx, gathered per input voxel.
pub fn conv3d_input_grad<T: Real>(
    grad: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let (k, cin, cout) = (g.k, g.cin, g.cout);
    let gs = grad.data();
    let ks = kernel.data();
    let mut dx = vec![T::zero(); id * ih * iw * cin];
    dx.par_chunks_mut((iw * cin).max(1))
        .enumerate()
        .for_each(|(row, dst)| {
            let (iz, iy) = (row / ih, row % ih);
            for ix in 0..iw {
                let acc = &mut dst[ix * cin..(ix + 1) * cin];
                for tz in 0..k {
                    let Some(oz) = g.dst(iz, tz, 0) else { continue };
                    for ty in 0..k {
                        let Some(oy) = g.dst(iy, ty, 1) else { continue };
                        for tx in 0..k {
                            let Some(ox) = g.dst(ix, tx, 2) else { continue };
                            let gv = &gs[((oz * oh + oy) * ow + ox) * cout..][..cout];
                            let tap = ((tz * k + ty) * k + tx) * cin * cout;
                            for (ci, a) in acc.iter_mut().enumerate() {
                                let w = &ks[tap + ci * cout..tap + (ci + 1) * cout];
                                *a += gv.iter().zip(w).map(|(&u, &v)| u * v).sum::<T>();
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(&[id, ih, iw, cin], dx).expect("input grad size")
}

/// dL/dkernel, one task per kernel tap.
pub fn conv3d_kernel_grad<T: Real>(
    x: &Tensor<T>,
    grad: &Tensor<T>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let [od, oh, ow] = g.output;
    let [_, ih, iw] = g.input;
    let (k, cin, cout) = (g.k, g.cin, g.cout);
    let xs = x.data();
    let gs = grad.data();
    let mut dk = vec![T::zero(); k * k * k * cin * cout];
    dk.par_chunks_mut((cin * cout).max(1))
        .enumerate()
        .for_each(|(tap, dst)| {
            let (tz, ty, tx) = (tap / (k * k), (tap / k) % k, tap % k);
            for oz in 0..od {
                let Some(iz) = g.src(oz, tz, 0) else { continue };
                for oy in 0..oh {
                    let Some(iy) = g.src(oy, ty, 1) else { continue };
                    for ox in 0..ow {
                        let Some(ix) = g.src(ox, tx, 2) else { continue };
                        let xv = &xs[((iz * ih + iy) * iw + ix) * cin..][..cin];
                        let gv = &gs[((oz * oh + oy) * ow + ox) * cout..][..cout];
                        for (ci, &a) in xv.iter().enumerate() {
                            for (d, &b) in dst[ci * cout..(ci + 1) * cout].iter_mut().zip(gv) {
                                *d += a * b;
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(&[k, k, k, cin, cout], dk).expect("kernel grad size")
}

struct Conv3dOp {
    geom: ConvGeometry,
}

impl<T: Real> Backward<T> for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        vec![
            needs[0].then(|| conv3d_input_grad(grad, kernel, &self.geom)),
            needs[1].then(|| conv3d_kernel_grad(x, grad, &self.geom)),
        ]
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Cross-correlation of a `[D,H,W,Cin]` volume with a `[k,k,k,Cin,Cout]` kernel.
    pub fn conv3d(self, kernel: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.same_tape(&kernel)?;
        let geom = ConvGeometry::new(&self.shape(), &kernel.shape(), stride, padding)?;
        let out = conv3d_forward(&self.value(), &kernel.value(), &geom);
        Ok(self.tape.record(out, &[self, kernel], Conv3dOp { geom }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    /// Literal six-fold loop over the definition.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad).unwrap();
        let [od, oh, ow] = g.output;
        let mut out = Tensor::zeros(&[od, oh, ow, g.cout]);
        let mut idx = 0;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..g.cout {
                        let mut s = 0.0;
                        for tz in 0..g.k {
                            for ty in 0..g.k {
                                for tx in 0..g.k {
                                    let iz = (oz * stride + tz) as isize - pad as isize;
                                    let iy = (oy * stride + ty) as isize - pad as isize;
                                    let ix = (ox * stride + tx) as isize - pad as isize;
                                    if iz < 0 || iy < 0 || ix < 0 {
                                        continue;
                                    }
                                    let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                    if iz >= g.input[0] || iy >= g.input[1] || ix >= g.input[2] {
                                        continue;
                                    }
                                    for ci in 0..g.cin {
                                        s += x.at(&[iz, iy, ix, ci]) * w.at(&[tz, ty, tx, ci, co]);
                                    }
                                }
                            }
                        }
                        out.data_mut()[idx] = s;
                        idx += 1;
                    }
                }
            }
        }
        out
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn pointwise_kernel_scales() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[3, 3, 3, 1]));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 2.0));
        let y = x.conv3d(w, 1, 0).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn strided_output_size() {
        let g = ConvGeometry::new(&[4, 4, 4, 1], &[3, 3, 3, 1, 1], 2, 1).unwrap();
        assert_eq!(g.output, [2, 2, 2]);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ConvGeometry::new(&[4, 4, 4, 1], &[3, 3, 3, 1, 1], 0, 1).is_err());
        assert!(ConvGeometry::new(&[1, 4, 4, 1], &[3, 3, 3, 1, 1], 1, 0).is_err());
        assert!(ConvGeometry::new(&[4, 4, 4, 1], &[2, 2, 2, 1, 1], 1, 0).is_err());
        assert!(ConvGeometry::new(&[4, 4, 4, 2], &[3, 3, 3, 1, 1], 1, 1).is_err());
    }

    #[test]
    fn matches_direct_definition() {
        for (shape, stride, pad, seed) in [
            ([5, 4, 3, 2], 1, 1, 1),
            ([6, 5, 4, 3], 2, 1, 2),
            ([5, 5, 5, 1], 2, 0, 3),
            ([7, 3, 4, 2], 3, 1, 4),
        ] {
            let x = noise(&shape, seed);
            let w = noise(&[3, 3, 3, shape[3], 3], seed + 10);
            let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad).unwrap();
            let fast = conv3d_forward(&x, &w, &g);
            let slow = reference(&x, &w, stride, pad);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), g> == <x, conv_x^T(g)> == <w, conv_w^T(g)>
        let x = noise(&[5, 4, 6, 2], 7);
        let w = noise(&[3, 3, 3, 2, 3], 8);
        let g = ConvGeometry::new(x.shape(), w.shape(), 2, 1).unwrap();
        let y = conv3d_forward(&x, &w, &g);
        let gy = noise(y.shape(), 9);
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let dx = conv3d_input_grad(&gy, &w, &g);
        let dw = conv3d_kernel_grad(&x, &gy, &g);
        let rx: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let rw: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-10);
        assert!((lhs - rw).abs() < 1e-10);
    }
}
