//! Synthetic pair generation and the dataset manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use morphwin_core::metrics::dice;
use morphwin_core::phantom::{make_pair, pair_seed, PhantomSpec};
use morphwin_core::volume::{load_volume, save_field, save_volume, LabeledVolume};

use crate::config::provenance;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.csv";
const COLUMNS: &str = "index,seed,moving,fixed,field,dice_before";

pub struct SynthOptions {
    pub out: PathBuf,
    pub pairs: usize,
    pub seed: u64,
    pub spec: PhantomSpec,
}

/// Mean Dice over the fixed image's labels; 1 when it has none.
pub fn mean_dice(moving: &LabeledVolume, fixed: &LabeledVolume) -> f64 {
    let labels = fixed.labels.labels();
    if labels.is_empty() {
        return 1.0;
    }
    labels.iter().map(|&l| dice(&moving.labels, &fixed.labels, l)).sum::<f64>() / labels.len() as f64
}

fn spec_lines(spec: &PhantomSpec) -> Vec<(&'static str, String)> {
    vec![
        ("dims", format!("{}x{}x{}", spec.dims[0], spec.dims[1], spec.dims[2])),
        ("spacing", format!("{:?}", spec.spacing)),
        ("organs", spec.organs.to_string()),
        ("radius", format!("{:?}", spec.radius)),
        ("edge_softness", spec.edge_softness.to_string()),
        ("intensity", format!("{:?}", spec.intensity)),
        ("background", spec.background.to_string()),
        ("texture", spec.texture.to_string()),
        ("amplitude", spec.amplitude.to_string()),
        ("control_spacing", spec.control_spacing.to_string()),
    ]
}

pub fn run(opts: &SynthOptions) -> CliResult<()> {
    if !(opts.spec.amplitude >= 0.0) {
        return Err(CliError::Validation(format!("amplitude {} must be >= 0", opts.spec.amplitude)));
    }
    std::fs::create_dir_all(&opts.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", opts.out.display())))?;
    let mut extra = vec![("pairs", opts.pairs.to_string()), ("dataset_seed", opts.seed.to_string())];
    extra.extend(spec_lines(&opts.spec));
    let mut manifest = provenance(None, &extra);
    manifest.push_str(COLUMNS);
    manifest.push('\n');
    for i in 0..opts.pairs {
        let seed = pair_seed(opts.seed, i);
        let pair = make_pair(&PhantomSpec { seed, ..opts.spec.clone() })?;
        let names = ["moving", "fixed", "field"].map(|k| format!("pair_{i:03}_{k}.mwvol"));
        save_volume(opts.out.join(&names[0]), &pair.moving)?;
        save_volume(opts.out.join(&names[1]), &pair.fixed)?;
        save_field(opts.out.join(&names[2]), &pair.field, pair.fixed.spacing)?;
        let _ = writeln!(
            manifest,
            "{i},{seed},{},{},{},{}",
            names[0],
            names[1],
            names[2],
            mean_dice(&pair.moving, &pair.fixed)
        );
    }
    std::fs::write(opts.out.join(MANIFEST), manifest)?;
    log::info!("wrote {} pairs to {}", opts.pairs, opts.out.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub moving: PathBuf,
    pub fixed: PathBuf,
}

pub fn read_manifest(dir: &Path) -> CliResult<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Validation(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut rows = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    if rows.next() != Some(COLUMNS) {
        return Err(CliError::Validation(format!("{} does not start with `{COLUMNS}`", path.display())));
    }
    let entries = rows
        .enumerate()
        .map(|(n, row)| {
            let f: Vec<&str> = row.split(',').collect();
            let bad = || CliError::Validation(format!("{}: malformed row {}: {row:?}", path.display(), n + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                index: f[0].parse().map_err(|_| bad())?,
                seed: f[1].parse().map_err(|_| bad())?,
                moving: dir.join(f[2]),
                fixed: dir.join(f[3]),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    if entries.is_empty() {
        return Err(CliError::Validation(format!("{} lists no pairs", path.display())));
    }
    Ok(entries)
}

pub fn load_pairs(entries: &[ManifestEntry]) -> CliResult<Vec<(LabeledVolume, LabeledVolume)>> {
    entries
        .iter()
        .map(|e| {
            let m = load_volume(&e.moving).map_err(|err| CliError::from(err).context(e.moving.display()))?;
            let f = load_volume(&e.fixed).map_err(|err| CliError::from(err).context(e.fixed.display()))?;
            Ok((m, f))
        })
        .collect()
}
