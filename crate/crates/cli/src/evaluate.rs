//! Overlap, surface distance and folding reports, and paired comparisons
//! between two reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use morphwin_core::metrics::{paired_t_test, EvalReport};
use morphwin_core::volume::{load_field, load_volume};

use crate::config::provenance;
use crate::error::{CliError, CliResult};

pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const COMPARE: &str = "compare.txt";

pub struct EvaluateOptions {
    pub warped: PathBuf,
    pub fixed: PathBuf,
    pub field: Option<PathBuf>,
    pub labels: Option<Vec<u16>>,
    pub out: Option<PathBuf>,
}

fn write_or_print(out: Option<&Path>, name: &str, text: &str) -> CliResult<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(name), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn run(opts: &EvaluateOptions) -> CliResult<()> {
    let warped = load_volume(&opts.warped).map_err(|e| CliError::from(e).context(opts.warped.display()))?;
    let fixed = load_volume(&opts.fixed).map_err(|e| CliError::from(e).context(opts.fixed.display()))?;
    if warped.dims() != fixed.dims() {
        return Err(CliError::Validation(format!("warped {:?} and fixed {:?} differ in size", warped.dims(), fixed.dims())));
    }
    let field = match &opts.field {
        Some(p) => Some(load_field(p).map_err(|e| CliError::from(e).context(p.display()))?),
        None => None,
    };
    let report = EvalReport::compute(&warped.labels, &fixed.labels, fixed.spacing, field.as_ref(), opts.labels.as_deref());
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let mut extra = vec![("warped", opts.warped.display().to_string()), ("fixed", opts.fixed.display().to_string())];
    if let Some(p) = &opts.field {
        extra.push(("field", p.display().to_string()));
    }
    let header = provenance(None, &extra);
    write_or_print(opts.out.as_deref(), REPORT_TEXT, &format!("{header}{}", report.to_text()))?;
    if opts.out.is_some() {
        write_or_print(opts.out.as_deref(), REPORT_CSV, &format!("{header}{}", report.to_csv()))?;
    }
    Ok(())
}

/// Per-label Dice from a report table.
pub fn read_dice(path: &Path) -> CliResult<BTreeMap<u16, f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read report {}: {e}", path.display())))?;
    let mut rows = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    if rows.next() != Some("label,dice,hd95_mm") {
        return Err(CliError::Validation(format!("{} is not a report table", path.display())));
    }
    let mut out = BTreeMap::new();
    for row in rows {
        let mut f = row.split(',');
        let (Some(label), Some(dice)) = (f.next(), f.next()) else { continue };
        if let Ok(label) = label.parse::<u16>() {
            let dice = dice
                .parse()
                .map_err(|_| CliError::Validation(format!("{}: bad dice value in {row:?}", path.display())))?;
            out.insert(label, dice);
        }
    }
    Ok(out)
}

/// Paired t-test on the Dice of labels present in both reports.
pub fn compare(a: &Path, b: &Path, out: Option<&Path>) -> CliResult<()> {
    let (da, db) = (read_dice(a)?, read_dice(b)?);
    let shared: Vec<u16> = da.keys().filter(|l| db.contains_key(l)).copied().collect();
    let only: Vec<u16> = da.keys().chain(db.keys()).filter(|l| !shared.contains(l)).copied().collect();
    for l in &only {
        log::warn!("label {l} appears in only one report and is skipped");
    }
    let xa: Vec<f64> = shared.iter().map(|l| da[l]).collect();
    let xb: Vec<f64> = shared.iter().map(|l| db[l]).collect();
    let t = paired_t_test(&xa, &xb).map_err(|e| CliError::Validation(format!("cannot compare: {}", e.0)))?;
    let mut s = provenance(None, &[("a", a.display().to_string()), ("b", b.display().to_string())]);
    let mean_diff = xa.iter().zip(&xb).map(|(x, y)| x - y).sum::<f64>() / xa.len() as f64;
    let _ = writeln!(s, "labels = {}", shared.len());
    let _ = writeln!(s, "mean_dice_difference = {mean_diff}");
    let _ = writeln!(s, "t = {}", t.t);
    let _ = writeln!(s, "df = {}", t.df);
    let _ = writeln!(s, "p = {}", t.p);
    write_or_print(out, COMPARE, &s)
}
