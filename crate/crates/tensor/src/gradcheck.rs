//! Central finite-difference verification of recorded adjoints.
//!
//! The function under test may return any shape; it is projected onto a fixed
//! random cotangent `w`, so the analytic side is one vector-Jacobian product
//! and the numeric side is `(<w, f(x + e)> - <w, f(x - e)>) / 2e`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::Result;
use crate::tape::{AdjointFault, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Denominator floor: `rel = |a - n| / max(|a|, |n|, floor)`, so gradients
    /// far below the floor are judged on absolute error instead.
    pub floor: f64,
    /// Coordinates per input; inputs with fewer elements are checked exhaustively.
    pub coords_per_input: usize,
    pub seed: u64,
    pub fault: Option<AdjointFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tolerance: 1e-6,
            floor: 1e-3,
            coords_per_input: 64,
            seed: 0x6d77,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coords_checked > 0 && self.max_rel_error <= self.tolerance
    }

    /// Combines reports of the same primitive into one worst-case summary.
    pub fn merge(name: &str, reports: &[GradCheckReport]) -> GradCheckReport {
        let worst = reports
            .iter()
            .filter_map(|r| r.worst.clone())
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
        GradCheckReport {
            name: name.to_string(),
            tolerance: reports.iter().map(|r| r.tolerance).fold(f64::INFINITY, f64::min),
            coords_checked: reports.iter().map(|r| r.coords_checked).sum(),
            max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
            worst,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    let err = (analytic - numeric).abs() / denom;
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

fn project(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Checks d<w, f(inputs)>/d inputs against central differences.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let tape = match &opts.fault {
        Some(fault) => Tape::with_fault(fault.clone()),
        None => Tape::new(),
    };
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let out_shape = out.shape();
    let w = if out.value().numel() == 1 {
        Tensor::ones(&out_shape)
    } else {
        Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0))
    };
    let grads = tape.backward_with_seed(out, w.clone())?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_, f64>> = xs.iter().map(|x| t.constant(x.clone())).collect();
        Ok(project(&f(&t, &vs)?.value(), &w))
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        tolerance: opts.tolerance,
        coords_checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_input).into_vec()
        };
        for c in coords {
            let orig = x.data()[c];
            work[i].data_mut()[c] = orig + opts.eps;
            let fp = eval(&work)?;
            work[i].data_mut()[c] = orig - opts.eps;
            let fm = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[i].data()[c];
            let rel = relative_error(a, numeric, opts.floor);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(CoordError {
                    input: i,
                    index: c,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Finite-difference checks of every differentiable primitive on random
/// inputs, one report per primitive.
pub fn primitive_suite(fault: Option<AdjointFault>) -> Result<Vec<GradCheckReport>> {
    let opts = GradCheckOptions {
        fault,
        ..GradCheckOptions::default()
    };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let u = |s: &[usize], r: &mut Xoshiro256PlusPlus| uniform(s, -1.0, 1.0, r);

    let (a, b) = (u(&[3, 4], r), u(&[4], r));
    out.push(check_gradients("add", &[a.clone(), b.clone()], &opts, |_, v| v[0].add(v[1]))?);
    out.push(check_gradients("sub", &[a.clone(), b.clone()], &opts, |_, v| v[0].sub(v[1]))?);
    out.push(check_gradients("mul", &[a.clone(), b.clone()], &opts, |_, v| v[0].mul(v[1]))?);
    let den = Tensor::from_fn(&[3, 1], |_| {
        let m = r.random_range(0.5..1.5);
        if r.random_bool(0.5) { m } else { -m }
    });
    out.push(check_gradients("div", &[a.clone(), den], &opts, |_, v| v[0].div(v[1]))?);
    out.push(check_gradients("sigmoid", &[u(&[5, 3], r)], &opts, |_, v| Ok(v[0].sigmoid()))?);
    out.push(check_gradients("leaky_relu", &[away_from_zero(&[5, 3], 0.05, r)], &opts, |_, v| {
        Ok(v[0].leaky_relu(0.2))
    })?);
    out.push(check_gradients("exp", &[u(&[4, 2], r)], &opts, |_, v| Ok(v[0].exp()))?);
    out.push(check_gradients("sqrt", &[uniform(&[4, 2], 0.5, 1.5, r)], &opts, |_, v| Ok(v[0].sqrt()))?);
    out.push(check_gradients("add_scalar", &[u(&[3], r)], &opts, |_, v| Ok(v[0].add_scalar(0.3)))?);
    out.push(check_gradients("mul_scalar", &[u(&[3], r)], &opts, |_, v| Ok(v[0].mul_scalar(-1.7)))?);

    let mm = GradCheckReport::merge(
        "matmul",
        &[
            check_gradients("matmul", &[u(&[4, 5], r), u(&[5, 6], r), u(&[6, 3], r)], &opts, |_, v| {
                v[0].matmul(v[1])?.matmul(v[2])
            })?,
            check_gradients("matmul", &[u(&[2, 3, 4, 5], r), u(&[3, 5, 2], r)], &opts, |_, v| {
                v[0].matmul(v[1])
            })?,
        ],
    );
    out.push(mm);

    let conv = GradCheckReport::merge(
        "conv3d",
        &[
            check_gradients("conv3d", &[u(&[5, 5, 5, 2], r), u(&[3, 3, 3, 2, 3], r)], &opts, |_, v| {
                v[0].conv3d(v[1], 1, 1)
            })?,
            check_gradients("conv3d", &[u(&[6, 5, 4, 2], r), u(&[3, 3, 3, 2, 2], r)], &opts, |_, v| {
                v[0].conv3d(v[1], 2, 1)
            })?,
        ],
    );
    out.push(conv);

    out.push(check_gradients(
        "layer_norm",
        &[u(&[4, 6], r), uniform(&[6], 0.5, 1.5, r), u(&[6], r)],
        &opts,
        |_, v| v[0].layer_norm(v[1], v[2], 1e-5),
    )?);
    out.push(GradCheckReport::merge(
        "softmax",
        &[
            check_gradients("softmax", &[u(&[3, 5], r)], &opts, |_, v| v[0].softmax(-1))?,
            check_gradients("softmax", &[u(&[3, 4, 2], r)], &opts, |_, v| v[0].softmax(1))?,
        ],
    ));
    out.push(check_gradients("reduce_mean", &[u(&[3, 4, 5], r)], &opts, |_, v| {
        v[0].mean_axes(&[0, 2])
    })?);
    out.push(check_gradients("sum", &[u(&[3, 4], r)], &opts, |_, v| Ok(v[0].sum()))?);
    out.push(check_gradients("reshape", &[u(&[2, 6], r)], &opts, |_, v| v[0].reshape(&[3, 4]))?);
    out.push(check_gradients("permute", &[u(&[2, 3, 4], r)], &opts, |_, v| v[0].permute(&[2, 0, 1]))?);
    out.push(check_gradients("concat", &[u(&[2, 3], r), u(&[2, 2], r)], &opts, |_, v| {
        Var::concat(&[v[0], v[1]], 1)
    })?);
    out.push(check_gradients("slice", &[u(&[4, 5], r)], &opts, |_, v| v[0].slice(1, 1, 3))?);
    out.push(check_gradients("expand", &[u(&[3, 1], r)], &opts, |_, v| v[0].expand(&[2, 3, 4]))?);
    out.push(check_gradients("roll", &[u(&[3, 4, 2], r)], &opts, |_, v| v[0].roll(&[1, -3, 1]))?);
    out.push(check_gradients("index_select", &[u(&[4, 3], r)], &opts, |_, v| {
        v[0].index_select(&[3, 0, 3, 1])
    })?);
    Ok(out)
}
