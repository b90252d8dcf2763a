//! 3D window partitioning, cyclic shifts and the shifted-window mask.

use morphwin_tensor::{Real, Tensor, Var};

use crate::error::{Error, Result};

/// Additive logit penalty for pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;

/// Window geometry for one feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub dims: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowSpec {
    /// Spec with the standard half-window shift. Every axis must be divisible
    /// by its window size.
    pub fn new(dims: [usize; 3], window: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if window[a] == 0 || dims[a] == 0 || dims[a] % window[a] != 0 {
                return Err(Error::Indivisible {
                    axis: a,
                    dim: dims[a],
                    window: window[a],
                });
            }
        }
        Ok(WindowSpec {
            dims,
            window,
            shift: window.map(|w| w / 2),
        })
    }

    /// Spec for a network stage. Axes shorter than the window use one window
    /// spanning the axis; axes covered by a single window are not shifted.
    pub fn fit(dims: [usize; 3], window: [usize; 3]) -> Result<Self> {
        let mut eff = window;
        for a in 0..3 {
            if dims[a] < window[a] {
                eff[a] = dims[a];
            }
        }
        let mut spec = WindowSpec::new(dims, eff)?;
        for a in 0..3 {
            if eff[a] == dims[a] {
                spec.shift[a] = 0;
            }
        }
        Ok(spec)
    }

    pub fn unshifted(mut self) -> Self {
        self.shift = [0; 3];
        self
    }

    pub fn with_shift(mut self, shift: [usize; 3]) -> Self {
        self.shift = shift;
        self
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s != 0)
    }

    pub fn grid(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.dims[a] / self.window[a])
    }

    /// Number of windows N.
    pub fn count(&self) -> usize {
        self.grid().iter().product()
    }

    /// Elements per window K.
    pub fn elements(&self) -> usize {
        self.window.iter().product()
    }
}

/// A partitioned feature map, `[N, K, C]`.
#[derive(Clone, Copy)]
pub struct WindowSequence<'t, T: Real> {
    pub data: Var<'t, T>,
    pub spec: WindowSpec,
}

impl<'t, T: Real> WindowSequence<'t, T> {
    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn map(self, data: Var<'t, T>) -> Self {
        WindowSequence { data, spec: self.spec }
    }
}

pub fn window_partition<'t, T: Real>(x: Var<'t, T>, spec: &WindowSpec) -> Result<WindowSequence<'t, T>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[..3] != spec.dims {
        return Err(Error::Config(format!(
            "window partition expects [{}, {}, {}, C], got {shape:?}",
            spec.dims[0], spec.dims[1], spec.dims[2]
        )));
    }
    for a in 0..3 {
        if spec.dims[a] % spec.window[a] != 0 {
            return Err(Error::Indivisible {
                axis: a,
                dim: spec.dims[a],
                window: spec.window[a],
            });
        }
    }
    let c = shape[3];
    let [gd, gh, gw] = spec.grid();
    let [d, h, w] = spec.window;
    let data = x
        .reshape(&[gd, d, gh, h, gw, w, c])?
        .permute(&[0, 2, 4, 1, 3, 5, 6])?
        .reshape(&[spec.count(), spec.elements(), c])?;
    Ok(WindowSequence { data, spec: *spec })
}

pub fn window_reverse<'t, T: Real>(seq: &WindowSequence<'t, T>) -> Result<Var<'t, T>> {
    let spec = &seq.spec;
    let shape = seq.data.shape();
    if shape.len() != 3 || shape[0] != spec.count() || shape[1] != spec.elements() {
        return Err(Error::Config(format!(
            "window sequence {shape:?} inconsistent with {} windows of {} elements",
            spec.count(),
            spec.elements()
        )));
    }
    let c = shape[2];
    let [gd, gh, gw] = spec.grid();
    let [d, h, w] = spec.window;
    let [dd, hh, ww] = spec.dims;
    Ok(seq
        .data
        .reshape(&[gd, gh, gw, d, h, w, c])?
        .permute(&[0, 3, 1, 4, 2, 5, 6])?
        .reshape(&[dd, hh, ww, c])?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDirection {
    /// Content moves toward higher indices.
    Forward,
    /// Inverse of `Forward`; used before partitioning shifted windows.
    Backward,
}

/// Toroidal roll of the three spatial axes of `[D, H, W, C]`.
pub fn cyclic_shift<'t, T: Real>(x: Var<'t, T>, shifts: [usize; 3], direction: ShiftDirection) -> Result<Var<'t, T>> {
    let sign = match direction {
        ShiftDirection::Forward => 1,
        ShiftDirection::Backward => -1,
    };
    let s = shifts.map(|v| sign * v as isize);
    Ok(x.roll(&[s[0], s[1], s[2], 0])?)
}

/// Region id of coordinate `p` on one axis of the back-shifted map: 0 for
/// the bulk, 1 for the last window's unwrapped part, 2 for wrapped voxels.
fn region(p: usize, dim: usize, window: usize, shift: usize) -> usize {
    if shift == 0 || p < dim - window {
        0
    } else if p < dim - shift {
        1
    } else {
        2
    }
}

/// `[N, K, K]` additive mask for attention over back-shifted windows.
pub fn shifted_window_mask<T: Real>(spec: &WindowSpec) -> Tensor<T> {
    let (n, k) = (spec.count(), spec.elements());
    let [gd, gh, gw] = spec.grid();
    let [d, h, w] = spec.window;
    let mut labels = vec![0usize; n * k];
    for wz in 0..gd {
        for wy in 0..gh {
            for wx in 0..gw {
                let win = (wz * gh + wy) * gw + wx;
                for ez in 0..d {
                    for ey in 0..h {
                        for ex in 0..w {
                            let e = (ez * h + ey) * w + ex;
                            let p = [wz * d + ez, wy * h + ey, wx * w + ex];
                            let r = (0..3).fold(0, |acc, a| {
                                acc * 3 + region(p[a], spec.dims[a], spec.window[a], spec.shift[a])
                            });
                            labels[win * k + e] = r;
                        }
                    }
                }
            }
        }
    }
    let masked = T::lit(MASK_VALUE);
    Tensor::from_fn(&[n, k, k], |idx| {
        let (win, i, j) = (idx / (k * k), (idx / k) % k, idx % k);
        if labels[win * k + i] == labels[win * k + j] {
            T::zero()
        } else {
            masked
        }
    })
}
