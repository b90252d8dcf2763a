//! Finite-difference checks of the model's building blocks and of the full
//! training loss, in double precision.

use morphwin_tensor::gradcheck::{check_gradients, primitive_suite, GradCheckOptions, GradCheckReport};
use morphwin_tensor::{AdjointFault, ParamStore, ParamVars, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::error::Result;
use crate::init::{rng, SeededRng};
use crate::layers::{Init, Linear, Norm};
use crate::loss::{diffusion_regularizer, mse, total_loss, DEFAULT_LAMBDA};
use crate::phantom::{make_pair, PhantomSpec};
use crate::rfrnet::{init_params, patch_expanding, patch_merging, ArchConfig, Network};
use crate::spatial::{warp_trilinear, Border};
use crate::swin::{relative_position_bias, swin_block_pair, window_msa, AttentionParams, BlockParams, BlockShape};
use crate::windowing::{shifted_window_mask, WindowSequence, WindowSpec};
use crate::wwa::{cross_channel_attention, cross_window_attention, wwa, WwaOptions, WwaParams};

const SUITE_STREAM: u64 = 21;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_MIN_COORDS: usize = 20;
/// Round-off in the loss differences is ~1e-13, so smaller gradients are
/// judged on absolute error.
const END_TO_END_FLOOR: f64 = 1e-8;
const SIGNIFICANT: f64 = 1e-6;

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut SeededRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Replaces every parameter with draws large enough that no branch of the
/// model is numerically silent; norm gains stay near one.
fn randomize(store: &mut ParamStore<f64>, r: &mut SeededRng) {
    for (name, t) in store.iter_mut() {
        let (lo, hi) = if name.ends_with(".gamma") { (0.5, 1.5) } else { (-0.5, 0.5) };
        *t = uniform(t.shape(), lo, hi, r);
    }
}

fn named(store: &ParamStore<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    store.iter().map(|(k, v)| (k.to_string(), v.clone())).unzip()
}

fn rebind<'t>(names: &[String], vars: &[Var<'t, f64>]) -> ParamVars<'t, f64> {
    ParamVars::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// Checks `f(extras, params)` with both the extra inputs and every parameter
/// of `store` as differentiable leaves.
fn check_with_params<F>(
    name: &str,
    extras: &[Tensor<f64>],
    store: &ParamStore<f64>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>], &ParamVars<'t, f64>) -> Result<Var<'t, f64>>,
{
    let (names, tensors) = named(store);
    let mut inputs = extras.to_vec();
    inputs.extend(tensors);
    let k = extras.len();
    Ok(check_gradients(name, &inputs, opts, |_, v| f(&v[..k], &rebind(&names, &v[k..])).map_err(model_error))?)
}

/// Model errors raised inside a check surface through the tensor checker.
fn model_error(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::invalid("gradcheck", other.to_string()),
    }
}

fn sequence<'t>(x: Var<'t, f64>, spec: WindowSpec) -> WindowSequence<'t, f64> {
    WindowSequence { data: x, spec }
}

/// One report per model component: attention, bias, both weighting phases
/// and their composition, a shifted block pair, patch merging/expanding, the
/// warp and the loss terms.
pub fn component_suite(fault: Option<AdjointFault>) -> Result<Vec<GradCheckReport>> {
    let opts = GradCheckOptions { fault, ..GradCheckOptions::default() };
    let mut r = rng(opts.seed, SUITE_STREAM);
    let mut out = Vec::new();

    // Two windows of 2x2x2 elements with 4 channels, shifted geometry so the
    // mask is exercised.
    let spec = WindowSpec::new([4, 2, 2], [2, 2, 2])?.with_shift([1, 1, 1]);
    let (n, k, c, heads) = (spec.count(), spec.elements(), 4, 2);
    let mask = shifted_window_mask::<f64>(&spec);
    let seq = uniform(&[n, k, c], -1.0, 1.0, &mut r);

    let mut attn = ParamStore::new();
    AttentionParams::<f64>::init(&mut Init { store: &mut attn, rng: &mut r }, "attn", c, heads, spec.window)?;
    randomize(&mut attn, &mut r);
    out.push(check_with_params("window_msa", &[seq.clone()], &attn, &opts, |v, p| {
        let a = AttentionParams::bind(p, "attn", heads, spec.window)?;
        Ok(window_msa(&sequence(v[0], spec), &a, Some(&mask))?.data)
    })?);
    out.push(check_with_params("relative_position_bias", &[], &attn, &opts, |_, p| {
        relative_position_bias(&AttentionParams::bind(p, "attn", heads, spec.window)?)
    })?);

    let mut gates = ParamStore::new();
    WwaParams::<f64>::init(&mut Init { store: &mut gates, rng: &mut r }, "wwa", c, n)?;
    randomize(&mut gates, &mut r);
    let wopts = WwaOptions::default();
    out.push(check_with_params("wwa_channel", &[seq.clone()], &gates, &opts, |v, p| {
        Ok(cross_channel_attention(&sequence(v[0], spec), &WwaParams::bind(p, "wwa")?, &wopts)?.data)
    })?);
    out.push(check_with_params("wwa_window", &[seq.clone()], &gates, &opts, |v, p| {
        Ok(cross_window_attention(&sequence(v[0], spec), &WwaParams::bind(p, "wwa")?, &wopts)?.data)
    })?);
    out.push(check_with_params("wwa", &[seq.clone()], &gates, &opts, |v, p| {
        Ok(wwa(&sequence(v[0], spec), &WwaParams::bind(p, "wwa")?, &wopts)?.data)
    })?);

    // Kept small: finite-difference round-off grows with the output size.
    let block_spec = WindowSpec::fit([4, 2, 2], [2, 2, 2])?;
    let shape = BlockShape { channels: 4, heads: 2, window: block_spec.window, wwa_windows: Some(block_spec.count()) };
    let mut blocks = ParamStore::new();
    {
        let mut init = Init { store: &mut blocks, rng: &mut r };
        BlockParams::<f64>::init(&mut init, "b0", &shape)?;
        BlockParams::<f64>::init(&mut init, "b1", &shape)?;
    }
    randomize(&mut blocks, &mut r);
    let x = uniform(&[4, 2, 2, 4], -1.0, 1.0, &mut r);
    out.push(check_with_params("swin_block_pair", &[x], &blocks, &opts, |v, p| {
        let pair = [BlockParams::bind(p, "b0", &shape)?, BlockParams::bind(p, "b1", &shape)?];
        swin_block_pair(v[0], &pair, &block_spec, &wopts)
    })?);

    let mut lin = ParamStore::new();
    {
        let mut init = Init { store: &mut lin, rng: &mut r };
        init.linear("merge", 8 * 3, 6)?;
        init.linear("expand", 4, 16)?;
        init.norm("norm", 5)?;
    }
    randomize(&mut lin, &mut r);
    let x = uniform(&[4, 2, 2, 3], -1.0, 1.0, &mut r);
    out.push(check_with_params("patch_merging", &[x], &lin, &opts, |v, p| {
        patch_merging(v[0], &Linear::bind(p, "merge")?)
    })?);
    let x = uniform(&[2, 1, 2, 4], -1.0, 1.0, &mut r);
    out.push(check_with_params("patch_expanding", &[x], &lin, &opts, |v, p| {
        patch_expanding(v[0], &Linear::bind(p, "expand")?)
    })?);
    let x = uniform(&[2, 3, 5], -1.0, 1.0, &mut r);
    out.push(check_with_params("layer_norm", &[x], &lin, &opts, |v, p| Norm::bind(p, "norm")?.forward(v[0]))?);

    // Sample positions kept inside the volume and away from cell faces,
    // where trilinear interpolation is not differentiable.
    let dims = [3, 4, 3];
    let img = uniform(&[dims[0], dims[1], dims[2], 2], -1.0, 1.0, &mut r);
    let phi = Tensor::from_fn(&[dims[0], dims[1], dims[2], 3], |i| {
        let axis = i % 3;
        let p = (i / 3 / [dims[1] * dims[2], dims[2], 1][axis]) % dims[axis];
        let target = r.random_range(0.2..(dims[axis] - 1) as f64 - 0.2);
        let frac = target - target.floor();
        let target = if (0.15..0.85).contains(&frac) { target } else { target.floor() + 0.5 };
        target - p as f64
    });
    for border in [Border::Clamp, Border::Zeros] {
        let name = match border {
            Border::Clamp => "warp_trilinear",
            Border::Zeros => "warp_trilinear_zeros",
        };
        out.push(check_gradients(name, &[img.clone(), phi.clone()], &opts, |_, v| {
            warp_trilinear(v[0], v[1], border).map_err(model_error)
        })?);
    }

    let a = uniform(&[3, 2, 4, 1], 0.0, 1.0, &mut r);
    let b = uniform(&[3, 2, 4, 1], 0.0, 1.0, &mut r);
    out.push(check_gradients("mse", &[a.clone(), b.clone()], &opts, |_, v| {
        mse(v[0], v[1]).map_err(model_error)
    })?);
    let field = uniform(&[3, 2, 4, 3], -1.0, 1.0, &mut r);
    out.push(check_gradients("diffusion_regularizer", &[field], &opts, |_, v| {
        diffusion_regularizer(v[0]).map_err(model_error)
    })?);
    let field = Tensor::from_fn(&[3, 2, 4, 3], |_| {
        let m = r.random_range(0.2..0.4);
        if r.random_bool(0.5) { m } else { -m }
    });
    out.push(check_gradients("total_loss", &[a, b, field], &opts, |_, v| {
        total_loss(v[0], v[1], v[2], 0.5, Border::Clamp)
            .map(|t| t.total)
            .map_err(model_error)
    })?);
    Ok(out)
}

/// Configuration of the end-to-end check: 16x8x8 input, embedding 8,
/// window 2x2x2, two heads at every stage.
pub fn end_to_end_config() -> ArchConfig {
    ArchConfig::toy([16, 8, 8], 8, vec![2, 2, 2, 2], [2, 2, 2])
}

/// Gradient of the full training loss with respect to network parameters.
/// The head gets random weights so the predicted field, and with it every
/// upstream gradient, is nonzero.
pub fn end_to_end_check(fault: Option<AdjointFault>, coords: usize) -> Result<GradCheckReport> {
    let cfg = end_to_end_config();
    let mut r = rng(7, SUITE_STREAM);
    let mut store: ParamStore<f64> = init_params(&cfg, 7)?;
    for (name, t) in store.iter_mut() {
        if name == "head.weight" {
            *t = uniform(t.shape(), -0.05, 0.05, &mut r);
        }
    }
    let pair = make_pair(&PhantomSpec { seed: 7, dims: cfg.input_dims, organs: 2, control_spacing: 4, amplitude: 1.5, ..PhantomSpec::default() })?;
    let moving = pair.moving.intensity.cast::<f64>();
    let fixed = pair.fixed.intensity.cast::<f64>();

    let (names, tensors) = named(&store);
    let eval = |ts: &[Tensor<f64>], tape: &Tape<f64>| -> Result<f64> {
        let vars: Vec<Var<'_, f64>> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let p = rebind(&names, &vars);
        let net = Network::bind(&p, &cfg)?;
        let m = tape.constant(moving.clone());
        let f = tape.constant(fixed.clone());
        let phi = net.forward(m, f)?;
        Ok(total_loss(m, f, phi, DEFAULT_LAMBDA, cfg.border)?.breakdown().total)
    };

    let tape = match &fault {
        Some(f) => Tape::with_fault(f.clone()),
        None => Tape::new(),
    };
    let vars: Vec<Var<'_, f64>> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let p = rebind(&names, &vars);
    let net = Network::bind(&p, &cfg)?;
    let m = tape.constant(moving.clone());
    let f = tape.constant(fixed.clone());
    let phi = net.forward(m, f)?;
    let loss = total_loss(m, f, phi, DEFAULT_LAMBDA, cfg.border)?.total;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    // Half the coordinates uniformly over tensors, half among entries whose
    // gradient is clearly above finite-difference round-off.
    let wanted = coords.max(END_TO_END_MIN_COORDS);
    let significant: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(t, g)| g.data().iter().enumerate().filter(|(_, v)| v.abs() > SIGNIFICANT).map(move |(e, _)| (t, e)))
        .collect();
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    while chosen.len() < wanted {
        let pick = if chosen.len() % 2 == 1 && !significant.is_empty() {
            significant[r.random_range(0..significant.len())]
        } else {
            let t = r.random_range(0..tensors.len());
            (t, r.random_range(0..tensors[t].numel()))
        };
        if !chosen.contains(&pick) {
            chosen.push(pick);
        }
    }

    let eps = GradCheckOptions::default().eps;
    let mut report = GradCheckReport {
        name: "end_to_end".into(),
        tolerance: END_TO_END_TOLERANCE,
        coords_checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = tensors.clone();
    for (t, e) in chosen {
        let analytic = analytic[t].data()[e];
        let orig = tensors[t].data()[e];
        work[t].data_mut()[e] = orig + eps;
        let fp = eval(&work, &Tape::new())?;
        work[t].data_mut()[e] = orig - eps;
        let fm = eval(&work, &Tape::new())?;
        work[t].data_mut()[e] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = morphwin_tensor::gradcheck::relative_error(analytic, numeric, END_TO_END_FLOOR);
        report.coords_checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(morphwin_tensor::gradcheck::CoordError { input: t, index: e, analytic, numeric, rel_error: rel });
        }
    }
    Ok(report)
}

/// Primitive checks, component checks and the end-to-end check in order.
pub fn full_suite(fault: Option<AdjointFault>, coords: usize) -> Result<Vec<GradCheckReport>> {
    let mut all = primitive_suite(fault.clone())?;
    all.extend(component_suite(fault.clone())?);
    all.push(end_to_end_check(fault, coords)?);
    Ok(all)
}

/// One line per report: name, verdict, worst relative error, coordinates.
pub fn format_report(r: &GradCheckReport) -> String {
    format!(
        "{:<24} {} max_rel_err={:.3e} tol={:.0e} coords={}",
        r.name,
        if r.passed() { "PASS" } else { "FAIL" },
        r.max_rel_error,
        r.tolerance,
        r.coords_checked
    )
}
