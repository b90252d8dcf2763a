//! Resolved run configuration: defaults, then a `key = value` file, then
//! command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use morphwin_core::rfrnet::ArchConfig;
use morphwin_core::spatial::Border;
use morphwin_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub precision: Precision,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            checkpoint_every: 50,
            precision: Precision::F32,
            data: None,
            out: None,
            checkpoint: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "dims",
    "embed_dim",
    "window",
    "heads",
    "depths",
    "decoder_widths",
    "recovery_branch",
    "wwa",
    "wwa.hidden_slope",
    "wwa.eq7_multiplies_original",
    "conv_slope",
    "border",
    "lambda",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "iterations",
    "seed",
    "checkpoint_every",
    "precision",
    "data",
    "out",
    "checkpoint",
];

fn invalid(key: &str, value: &str, want: &str) -> CliError {
    CliError::Validation(format!("{key} = {value:?}: expected {want}"))
}

fn number<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> CliResult<T> {
    value.parse().map_err(|_| invalid(key, value, want))
}

fn list(key: &str, value: &str) -> CliResult<Vec<usize>> {
    value
        .split(',')
        .map(|v| number(key, v.trim(), "comma-separated positive integers"))
        .collect()
}

/// `48x32x16` (also accepts commas).
pub fn parse_triple(key: &str, value: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<&str> = value.split(['x', 'X', ',']).map(str::trim).collect();
    if parts.len() != 3 {
        return Err(invalid(key, value, "three extents such as 48x32x16"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = number(key, p, "three extents such as 48x32x16")?;
    }
    Ok(out)
}

fn boolean(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(invalid(key, value, "true or false")),
    }
}

fn triple(v: [usize; 3]) -> String {
    format!("{}x{}x{}", v[0], v[1], v[2])
}

fn joined(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn arch(&self) -> &ArchConfig {
        &self.train.arch
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let value = value.trim();
        let arch = &mut self.train.arch;
        let adam = &mut self.train.adam;
        match key {
            "dims" => arch.input_dims = parse_triple(key, value)?,
            "embed_dim" => arch.embed_dim = number(key, value, "a positive integer")?,
            "window" => arch.window = parse_triple(key, value)?,
            "heads" => arch.heads = list(key, value)?,
            "depths" => arch.depths = list(key, value)?,
            "decoder_widths" => arch.decoder_widths = if value == "auto" { None } else { Some(list(key, value)?) },
            "recovery_branch" => arch.recovery_branch = boolean(key, value)?,
            "wwa" => arch.wwa = boolean(key, value)?,
            "wwa.hidden_slope" => arch.wwa_options.hidden_slope = number(key, value, "a number")?,
            "wwa.eq7_multiplies_original" => arch.wwa_options.eq7_multiplies_original = boolean(key, value)?,
            "conv_slope" => arch.conv_slope = number(key, value, "a number")?,
            "border" => {
                arch.border = match value {
                    "clamp" => Border::Clamp,
                    "zeros" => Border::Zeros,
                    _ => return Err(invalid(key, value, "clamp or zeros")),
                }
            }
            "lambda" => self.train.lambda = number(key, value, "a number")?,
            "lr" => adam.lr = number(key, value, "a number")?,
            "beta1" => adam.beta1 = number(key, value, "a number")?,
            "beta2" => adam.beta2 = number(key, value, "a number")?,
            "eps" => adam.eps = number(key, value, "a number")?,
            "iterations" => self.train.iterations = number(key, value, "a non-negative integer")?,
            "seed" => self.train.seed = number(key, value, "an unsigned integer")?,
            "checkpoint_every" => self.checkpoint_every = number(key, value, "a non-negative integer")?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(invalid(key, value, "f32 or f64")),
                }
            }
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => {
                return Err(CliError::Validation(format!(
                    "unknown configuration key {key:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("{origin}:{}: expected `key = value`, got {line:?}", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Validation(format!("{origin}:{}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `key=value` pairs from the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> CliResult<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("--set expects key=value, got {p:?}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key in canonical order; parsing this text reproduces `self`.
    pub fn to_text(&self) -> String {
        let a = &self.train.arch;
        let adam = &self.train.adam;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("dims", triple(a.input_dims));
        line("embed_dim", a.embed_dim.to_string());
        line("window", triple(a.window));
        line("heads", joined(&a.heads));
        line("depths", joined(&a.depths));
        line("decoder_widths", a.decoder_widths.as_deref().map_or("auto".into(), joined));
        line("recovery_branch", a.recovery_branch.to_string());
        line("wwa", a.wwa.to_string());
        line("wwa.hidden_slope", format!("{:?}", a.wwa_options.hidden_slope));
        line("wwa.eq7_multiplies_original", a.wwa_options.eq7_multiplies_original.to_string());
        line("conv_slope", format!("{:?}", a.conv_slope));
        line("border", match a.border {
            Border::Clamp => "clamp".into(),
            Border::Zeros => "zeros".into(),
        });
        line("lambda", format!("{:?}", self.train.lambda));
        line("lr", format!("{:?}", adam.lr));
        line("beta1", format!("{:?}", adam.beta1));
        line("beta2", format!("{:?}", adam.beta2));
        line("eps", format!("{:?}", adam.eps));
        line("iterations", self.train.iterations.to_string());
        line("seed", self.train.seed.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        line("precision", match self.precision {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        });
        for (k, p) in [("data", path(&self.data)), ("out", path(&self.out)), ("checkpoint", path(&self.checkpoint))] {
            if let Some(p) = p {
                line(k, p);
            }
        }
        s
    }
}

/// Header lines prefixed with `#` recording the tool version, the exact
/// command line and the resolved configuration.
pub fn provenance(cfg: Option<&RunConfig>, extra: &[(&str, String)]) -> String {
    let mut s = format!("# morphwin {}\n", env!("CARGO_PKG_VERSION"));
    let argv: Vec<String> = std::env::args().collect();
    let _ = writeln!(s, "# command: {}", argv.join(" "));
    for (k, v) in extra {
        let _ = writeln!(s, "# {k} = {v}");
    }
    if let Some(cfg) = cfg {
        for l in cfg.to_text().lines() {
            let _ = writeln!(s, "# {l}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.train.lambda, 0.04);
        assert_eq!(c.train.adam.lr, 1e-4);
        assert_eq!(c.arch().embed_dim, 96);
        assert_eq!(c.arch().window, [6, 4, 2]);
        assert_eq!(c.arch().heads, vec![4, 4, 8, 8]);
    }

    #[test]
    fn text_roundtrip_reproduces_config() {
        let mut c = RunConfig::default();
        c.apply_text("dims = 48x32x16\nembed_dim=32\nheads = 2,2,4,4\nlambda = 0.5 # comment\nborder = zeros\ndata = /tmp/x\n", "t")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "t").unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.lambda, 0.5);
        assert_eq!(c.arch().input_dims, [48, 32, 16]);
        for k in KEYS {
            let rendered = c.to_text();
            let present = rendered.lines().any(|l| l.starts_with(&format!("{k} =")));
            assert!(present || ["out", "checkpoint"].contains(k), "{k} missing");
        }
    }

    #[test]
    fn later_sources_override_earlier_ones() {
        let mut c = RunConfig::default();
        c.apply_text("lambda = 0.1\nseed = 3", "file").unwrap();
        c.apply_overrides(&["lambda=0.2".to_string()]).unwrap();
        assert_eq!(c.train.lambda, 0.2);
        assert_eq!(c.train.seed, 3);
    }

    #[test]
    fn bad_lines_name_their_location() {
        let mut c = RunConfig::default();
        let e = c.apply_text("lambda = 0.1\nnonsense", "cfg").unwrap_err();
        assert!(e.message().contains("cfg:2"), "{}", e.message());
        let e = c.apply_text("colour = red", "cfg").unwrap_err();
        assert!(e.message().contains("colour"));
        assert!(c.apply_text("dims = 4x4", "cfg").is_err());
        assert!(c.apply_text("wwa = maybe", "cfg").is_err());
    }
}
