//! Warping volumes by a displacement field.
//!
//! A field is `[D, H, W, 3]` in voxel units with components `(dz, dy, dx)`.
//! Voxel `v` samples the source at `v + phi[v]`.

use morphwin_tensor::{Backward, Real, Tensor, Var};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// What a sample outside the volume sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Border {
    /// Coordinates are clamped into the volume (edge replication).
    #[default]
    Clamp,
    /// Voxels outside the volume read as zero.
    Zeros,
}

/// Interpolation data along one axis for one sample.
struct Taps<T> {
    idx: [usize; 2],
    weight: [T; 2],
    inside: [bool; 2],
    /// d(position)/d(displacement): 0 where clamping is active.
    slope: T,
}

/// Floor-based cell selection, so a sample on an integer coordinate takes
/// the cell to its right and derivatives there are right-sided.
fn taps<T: Real>(pos: T, n: usize, border: Border) -> Taps<T> {
    let last = T::lit((n - 1) as f64);
    match border {
        Border::Clamp => {
            let (p, slope) = if pos < T::zero() {
                (T::zero(), T::zero())
            } else if pos > last {
                (last, T::zero())
            } else {
                (pos, T::one())
            };
            let i0 = p.floor().to_usize().unwrap_or(0).min(n - 1);
            let f = p - T::lit(i0 as f64);
            Taps {
                idx: [i0, (i0 + 1).min(n - 1)],
                weight: [T::one() - f, f],
                inside: [true, true],
                slope,
            }
        }
        Border::Zeros => {
            let fl = pos.floor();
            let f = pos - fl;
            let i0 = fl.to_i64().unwrap_or(i64::MIN / 2);
            let inside = |i: i64| i >= 0 && i < n as i64;
            Taps {
                idx: [i0.clamp(0, n as i64 - 1) as usize, (i0 + 1).clamp(0, n as i64 - 1) as usize],
                weight: [T::one() - f, f],
                inside: [inside(i0), inside(i0 + 1)],
                slope: T::one(),
            }
        }
    }
}

fn check_shapes(img: &[usize], phi: &[usize]) -> Result<[usize; 3]> {
    if img.len() != 4 || phi.len() != 4 || phi[3] != 3 || img[..3] != phi[..3] {
        return Err(Error::Config(format!(
            "warp needs image [D,H,W,C] and field [D,H,W,3] on the same grid, got {img:?} and {phi:?}"
        )));
    }
    Ok([img[0], img[1], img[2]])
}

fn voxel_taps<T: Real>(phi: &[T], v: usize, dims: [usize; 3], border: Border) -> [Taps<T>; 3] {
    let [_, h, w] = dims;
    let coord = [v / (h * w), (v / w) % h, v % w];
    [0, 1, 2].map(|a| taps(T::lit(coord[a] as f64) + phi[v * 3 + a], dims[a], border))
}

/// Calls `f(flat_index, weight, [dw/dz, dw/dy, dw/dx])` for the 8 corners.
fn for_corners<T: Real>(t: &[Taps<T>; 3], dims: [usize; 3], mut f: impl FnMut(usize, T, [T; 3])) {
    let [_, h, w] = dims;
    let sign = [-T::one(), T::one()];
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                if !(t[0].inside[a] && t[1].inside[b] && t[2].inside[c]) {
                    continue;
                }
                let (wz, wy, wx) = (t[0].weight[a], t[1].weight[b], t[2].weight[c]);
                let idx = (t[0].idx[a] * h + t[1].idx[b]) * w + t[2].idx[c];
                let grad = [
                    sign[a] * wy * wx * t[0].slope,
                    wz * sign[b] * wx * t[1].slope,
                    wz * wy * sign[c] * t[2].slope,
                ];
                f(idx, wz * wy * wx, grad);
            }
        }
    }
}

/// Trilinear resampling of a plain tensor.
pub fn warp_image<T: Real>(img: &Tensor<T>, phi: &Tensor<T>, border: Border) -> Result<Tensor<T>> {
    let dims = check_shapes(img.shape(), phi.shape())?;
    let ch = img.shape()[3];
    let (src, ph) = (img.data(), phi.data());
    let mut out = vec![T::zero(); img.numel()];
    out.par_chunks_mut(ch.max(1)).enumerate().for_each(|(v, dst)| {
        let t = voxel_taps(ph, v, dims, border);
        for_corners(&t, dims, |idx, wgt, _| {
            for (o, &s) in dst.iter_mut().zip(&src[idx * ch..(idx + 1) * ch]) {
                *o += wgt * s;
            }
        });
    });
    Ok(Tensor::new(img.shape(), out)?)
}

struct WarpOp {
    border: Border,
}

impl<T: Real> Backward<T> for WarpOp {
    fn name(&self) -> &'static str {
        "warp_trilinear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (img, phi) = (inputs[0], inputs[1]);
        let dims = [img.shape()[0], img.shape()[1], img.shape()[2]];
        let ch = img.shape()[3];
        let (src, ph, g) = (img.data(), phi.data(), grad.data());
        let voxels = dims.iter().product::<usize>();

        let d_img = needs[0].then(|| {
            let mut acc = vec![T::zero(); img.numel()];
            for v in 0..voxels {
                let t = voxel_taps(ph, v, dims, self.border);
                let gv = &g[v * ch..(v + 1) * ch];
                for_corners(&t, dims, |idx, wgt, _| {
                    for (a, &gc) in acc[idx * ch..(idx + 1) * ch].iter_mut().zip(gv) {
                        *a += wgt * gc;
                    }
                });
            }
            Tensor::new(img.shape(), acc).expect("image gradient size")
        });

        let d_phi = needs[1].then(|| {
            let mut acc = vec![T::zero(); phi.numel()];
            acc.par_chunks_mut(3).enumerate().for_each(|(v, dst)| {
                let t = voxel_taps(ph, v, dims, self.border);
                let gv = &g[v * ch..(v + 1) * ch];
                for_corners(&t, dims, |idx, _, dw| {
                    let s: T = gv.iter().zip(&src[idx * ch..(idx + 1) * ch]).map(|(&a, &b)| a * b).sum();
                    for a in 0..3 {
                        dst[a] += dw[a] * s;
                    }
                });
            });
            Tensor::new(phi.shape(), acc).expect("field gradient size")
        });
        vec![d_img, d_phi]
    }
}

/// Differentiable trilinear warp of `img` by `phi`.
pub fn warp_trilinear<'t, T: Real>(img: Var<'t, T>, phi: Var<'t, T>, border: Border) -> Result<Var<'t, T>> {
    let out = warp_image(&img.value(), &phi.value(), border)?;
    Ok(img.tape().record(out, &[img, phi], WarpOp { border }))
}

/// Nearest-neighbour warp of a label map, with clamping. Ties round away
/// from zero.
pub fn warp_nearest<T: Real>(labels: &LabelMap, phi: &Tensor<T>) -> Result<LabelMap> {
    let dims = labels.dims;
    if phi.shape() != [dims[0], dims[1], dims[2], 3] {
        return Err(Error::Config(format!(
            "label map {dims:?} and field {:?} differ in grid",
            phi.shape()
        )));
    }
    let [_, h, w] = dims;
    let ph = phi.data();
    let data = (0..labels.data.len())
        .map(|v| {
            let coord = [v / (h * w), (v / w) % h, v % w];
            let src = [0, 1, 2].map(|a| {
                let p = coord[a] as f64 + ph[v * 3 + a].as_f64();
                p.clamp(0.0, (dims[a] - 1) as f64).round() as usize
            });
            labels.at(src[0], src[1], src[2])
        })
        .collect();
    Ok(LabelMap { dims, data })
}
