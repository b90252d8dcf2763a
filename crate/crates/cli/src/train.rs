//! Training with a loss log, periodic checkpoints and a dump on divergence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use morphwin_core::train::{image_pair, LossRow, Trainer};
use morphwin_core::volume::save_volume;
use morphwin_core::Error;

use crate::config::{provenance, Precision, RunConfig};
use crate::error::{CliError, CliResult};
use crate::synth::{load_pairs, read_manifest};

pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.csv";
pub const CONFIG: &str = "config.txt";
pub const NAN_DUMP: &str = "nan_dump";

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Validation(format!("missing {what} (flag or `{what} = ...` in the config)")))
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    if cfg.precision != Precision::F32 {
        return Err(CliError::Validation("training runs in f32; f64 is used by gradcheck and register".into()));
    }
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    cfg.arch().validate()?;
    let entries = read_manifest(data)?;
    let volumes = load_pairs(&entries)?;
    let want = cfg.arch().input_dims;
    for (e, (m, f)) in entries.iter().zip(&volumes) {
        for (v, path) in [(m, &e.moving), (f, &e.fixed)] {
            if v.dims() != want {
                return Err(CliError::Validation(format!(
                    "{} has dims {:?} but the network is configured for {want:?} (set `dims`)",
                    path.display(),
                    v.dims()
                )));
            }
        }
    }
    let pairs: Vec<_> = volumes.iter().map(|(m, f)| image_pair(m, f)).collect();

    std::fs::create_dir_all(out)?;
    let header = provenance(Some(cfg), &[("pairs", pairs.len().to_string())]);
    std::fs::write(out.join(CONFIG), format!("{header}{}", cfg.to_text()))?;
    let mut log = BufWriter::new(File::create(out.join(LOSS_LOG))?);
    write!(log, "{header}{}\n", LossRow::HEADER)?;

    let mut trainer = Trainer::new(cfg.train.clone(), pairs.len())?;
    let ckpt = out.join(CHECKPOINT);
    let total = cfg.train.iterations;
    for _ in 0..total {
        let row = match trainer.step(&pairs) {
            Ok(r) => r,
            Err(Error::NonFinite { iteration, pair }) => {
                log.flush()?;
                let dump = out.join(NAN_DUMP);
                std::fs::create_dir_all(&dump)?;
                let (m, f) = &volumes[pair];
                save_volume(dump.join("moving.mwvol"), m)?;
                save_volume(dump.join("fixed.mwvol"), f)?;
                trainer.params.save(dump.join("params_before_step.ckpt"))?;
                std::fs::write(
                    dump.join("README.txt"),
                    format!(
                        "{header}# iteration = {iteration}\n# pair = {pair}\n# moving = {}\n# fixed = {}\n",
                        entries[pair].moving.display(),
                        entries[pair].fixed.display()
                    ),
                )?;
                return Err(CliError::Runtime(format!(
                    "non-finite loss or gradient at iteration {iteration} on pair {pair}; inputs and parameters dumped to {}",
                    dump.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(log, "{}", row.to_csv())?;
        if row.iter == 1 || row.iter % 10 == 0 || row.iter == total {
            log::info!("iter {}/{total} sim {:.6} reg {:.6} total {:.6}", row.iter, row.similarity, row.regularity, row.total);
        }
        if cfg.checkpoint_every > 0 && row.iter % cfg.checkpoint_every == 0 {
            log.flush()?;
            trainer.params.save(&ckpt)?;
        }
    }
    log.flush()?;
    trainer.params.save(&ckpt)?;
    log::info!("checkpoint written to {}", ckpt.display());
    Ok(())
}
