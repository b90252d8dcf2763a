//! Applies a trained model to one moving/fixed pair.

use std::path::PathBuf;

use morphwin_core::metrics::folding_ratio;
use morphwin_core::rfrnet::predict_field;
use morphwin_core::spatial::{warp_image, warp_nearest};
use morphwin_core::train::{check_compatible, register, Registration};
use morphwin_core::volume::{load_volume, save_field, save_volume, LabeledVolume};
use morphwin_tensor::{ParamStore, Tensor};

use crate::config::{provenance, Precision, RunConfig};
use crate::error::{CliError, CliResult};
use crate::synth::mean_dice;

pub const FIELD: &str = "field.mwvol";
pub const WARPED: &str = "warped.mwvol";
pub const SUMMARY: &str = "register.txt";

pub struct RegisterOptions {
    pub moving: PathBuf,
    pub fixed: PathBuf,
}

fn register_f64(params: &ParamStore<f32>, cfg: &RunConfig, moving: &LabeledVolume, fixed: &LabeledVolume) -> CliResult<Registration> {
    let field: Tensor<f64> = predict_field(&params.cast(), cfg.arch(), &moving.intensity.cast(), &fixed.intensity.cast())?;
    let field: Tensor<f32> = field.cast();
    let warped = LabeledVolume {
        intensity: warp_image(&moving.intensity, &field, cfg.arch().border)?,
        labels: warp_nearest(&moving.labels, &field)?,
        spacing: moving.spacing,
    };
    Ok(Registration { field, warped })
}

pub fn run(cfg: &RunConfig, opts: &RegisterOptions) -> CliResult<()> {
    let ckpt = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Validation("missing checkpoint (flag or `checkpoint = ...` in the config)".into()))?;
    let out = cfg.out.as_deref().ok_or_else(|| CliError::Validation("missing out directory".into()))?;
    cfg.arch().validate()?;
    let params = ParamStore::<f32>::load(ckpt).map_err(|e| CliError::from(e).context(ckpt.display()))?;
    check_compatible(&params, cfg.arch())?;
    let moving = load_volume(&opts.moving).map_err(|e| CliError::from(e).context(opts.moving.display()))?;
    let fixed = load_volume(&opts.fixed).map_err(|e| CliError::from(e).context(opts.fixed.display()))?;
    if moving.dims() != cfg.arch().input_dims {
        return Err(CliError::Validation(format!(
            "volumes have dims {:?} but the network is configured for {:?}",
            moving.dims(),
            cfg.arch().input_dims
        )));
    }
    let reg = match cfg.precision {
        Precision::F32 => register(&params, cfg.arch(), &moving, &fixed)?,
        Precision::F64 => register_f64(&params, cfg, &moving, &fixed)?,
    };
    std::fs::create_dir_all(out)?;
    save_field(out.join(FIELD), &reg.field, moving.spacing)?;
    save_volume(out.join(WARPED), &reg.warped)?;
    let max = reg.field.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let summary = format!(
        "{}max_displacement_voxels = {max}\nfolding_percent = {}\ndice_before = {}\ndice_after = {}\n",
        provenance(
            Some(cfg),
            &[("moving", opts.moving.display().to_string()), ("fixed", opts.fixed.display().to_string())]
        ),
        folding_ratio(&reg.field),
        mean_dice(&moving, &fixed),
        mean_dice(&reg.warped, &fixed),
    );
    std::fs::write(out.join(SUMMARY), summary)?;
    log::info!("wrote {} and {} to {}", FIELD, WARPED, out.display());
    Ok(())
}
