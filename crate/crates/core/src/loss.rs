//! Training objective: intensity MSE after warping plus a diffusion penalty.

use morphwin_tensor::{Real, Var};

use crate::error::{Error, Result};
use crate::spatial::{warp_trilinear, Border};

pub const DEFAULT_LAMBDA: f64 = 0.04;

pub fn mse<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!("mse of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.square().mean())
}

/// Squared forward differences of every component along every axis, summed
/// and divided by `3 * D * H * W`. The last slice along an axis has no
/// forward neighbour and contributes nothing.
pub fn diffusion_regularizer<'t, T: Real>(phi: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = phi.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::Config(format!("field shape {shape:?} is not [D, H, W, 3]")));
    }
    let denom = (shape.iter().product::<usize>()) as f64;
    let mut total: Option<Var<'t, T>> = None;
    for axis in 0..3 {
        let n = shape[axis];
        if n < 2 {
            continue;
        }
        let ahead = phi.slice(axis, 1, n - 1)?;
        let here = phi.slice(axis, 0, n - 1)?;
        let s = ahead.sub(here)?.square().sum();
        total = Some(match total {
            Some(t) => t.add(s)?,
            None => s,
        });
    }
    Ok(match total {
        Some(t) => t.mul_scalar(1.0 / denom),
        None => phi.mul_scalar(0.0).sum(),
    })
}

/// Plain numbers from one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub similarity: f64,
    pub regularity: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Recorded loss components; `total` is the one to differentiate.
#[derive(Clone, Copy)]
pub struct LossTerms<'t, T: Real> {
    pub warped: Var<'t, T>,
    pub similarity: Var<'t, T>,
    pub regularity: Var<'t, T>,
    pub total: Var<'t, T>,
    pub lambda: f64,
}

impl<T: Real> LossTerms<'_, T> {
    pub fn breakdown(&self) -> LossBreakdown {
        let item = |v: &Var<'_, T>| v.value().item().map_or(f64::NAN, Real::as_f64);
        LossBreakdown {
            similarity: item(&self.similarity),
            regularity: item(&self.regularity),
            lambda: self.lambda,
            total: item(&self.total),
        }
    }
}

pub fn total_loss<'t, T: Real>(
    moving: Var<'t, T>,
    fixed: Var<'t, T>,
    phi: Var<'t, T>,
    lambda: f64,
    border: Border,
) -> Result<LossTerms<'t, T>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let warped = warp_trilinear(moving, phi, border)?;
    let similarity = mse(warped, fixed)?;
    let regularity = diffusion_regularizer(phi)?;
    let total = similarity.add(regularity.mul_scalar(lambda))?;
    Ok(LossTerms { warped, similarity, regularity, total, lambda })
}
