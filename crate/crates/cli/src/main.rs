mod config;
mod error;
mod evaluate;
mod gradcheck;
mod register;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use morphwin_core::phantom::PhantomSpec;

use config::{parse_triple, RunConfig};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "morphwin", version, about = "Deformable registration with weighted window attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic moving/fixed pairs and a manifest.
    Synth(SynthArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a network on a synthetic dataset.
    Train(TrainArgs),
    /// Predict and apply a deformation for one pair.
    Register(RegisterArgs),
    /// Score a registration, or compare two reports.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "48x32x16")]
    dims: String,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest ground-truth displacement (voxels).
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    organs: Option<usize>,
    /// Control-point spacing of the deformation and texture (voxels).
    #[arg(long)]
    control_spacing: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Sampled coordinates for the end-to-end check.
    #[arg(long, default_value_t = 40)]
    coords: usize,
    /// Test hook: scale the adjoint of PRIMITIVE (NAME or NAME:SCALE).
    #[arg(long, value_name = "PRIMITIVE")]
    corrupt_adjoint: Option<String>,
}

/// Configuration sources shared by train and register.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input extents, e.g. 48x32x16.
    #[arg(long)]
    dims: Option<String>,
    /// Seed for initialisation and pair order.
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the recovery branch.
    #[arg(long)]
    no_rb: bool,
    /// Drop weighted window attention.
    #[arg(long)]
    no_wwa: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Weight of the smoothness term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Save the checkpoint every N iterations (0: only at the end).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "compare")]
    warped: Option<PathBuf>,
    #[arg(long, required_unless_present = "compare")]
    fixed: Option<PathBuf>,
    #[arg(long)]
    field: Option<PathBuf>,
    /// Comma-separated labels (default: every label present).
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<u16>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Paired t-test on per-label Dice of two report tables.
    #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"], conflicts_with_all = ["warped", "fixed", "field"])]
    compare: Option<Vec<PathBuf>>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags, then `--set`.
    fn resolve(&self, flags: Vec<(&str, String)>) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let mut all = flags;
        all.extend(self.out.as_ref().map(|p| ("out", p.display().to_string())));
        all.extend(self.dims.clone().map(|d| ("dims", d)));
        all.extend(self.seed.map(|s| ("seed", s.to_string())));
        if self.no_rb {
            all.push(("recovery_branch", "false".into()));
        }
        if self.no_wwa {
            all.push(("wwa", "false".into()));
        }
        for (k, v) in all {
            cfg.set(k, &v)?;
        }
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

fn some<T: ToString>(key: &'static str, v: &Option<T>) -> Option<(&'static str, String)> {
    v.as_ref().map(|v| (key, v.to_string()))
}

/// Caps rayon's pool; `MORPHWIN_THREADS` applies where parallelism is allowed.
fn init_threads(single: bool) -> CliResult<()> {
    let threads = if single {
        1
    } else {
        match std::env::var("MORPHWIN_THREADS") {
            Ok(v) => v
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Validation(format!("MORPHWIN_THREADS={v:?} is not a positive integer")))?,
            Err(_) => 0,
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => {
            init_threads(false)?;
            let mut spec = PhantomSpec { dims: parse_triple("dims", &a.dims)?, ..PhantomSpec::default() };
            spec.amplitude = a.amplitude.unwrap_or(spec.amplitude);
            spec.organs = a.organs.unwrap_or(spec.organs);
            spec.control_spacing = a.control_spacing.unwrap_or(spec.control_spacing);
            synth::run(&synth::SynthOptions { out: a.out, pairs: a.pairs, seed: a.seed, spec })
        }
        Command::Gradcheck(a) => {
            init_threads(false)?;
            let fault = a.corrupt_adjoint.as_deref().map(gradcheck::parse_fault).transpose()?;
            gradcheck::run(a.coords, fault)
        }
        Command::Train(a) => {
            init_threads(true)?;
            let flags = [
                some("data", &a.data.as_ref().map(|p| p.display())),
                some("lambda", &a.lambda),
                some("lr", &a.lr),
                some("iterations", &a.iterations),
                some("checkpoint_every", &a.checkpoint_every),
            ];
            let cfg = a.common.resolve(flags.into_iter().flatten().collect())?;
            train::run(&cfg)
        }
        Command::Register(a) => {
            init_threads(false)?;
            let flags = [some("checkpoint", &a.checkpoint.as_ref().map(|p| p.display()))];
            let cfg = a.common.resolve(flags.into_iter().flatten().collect())?;
            register::run(&cfg, &register::RegisterOptions { moving: a.moving, fixed: a.fixed })
        }
        Command::Evaluate(a) => {
            init_threads(false)?;
            if let Some(runs) = &a.compare {
                return evaluate::compare(&runs[0], &runs[1], a.out.as_deref());
            }
            let (Some(warped), Some(fixed)) = (a.warped, a.fixed) else {
                return Err(CliError::Validation("--warped and --fixed are required".into()));
            };
            evaluate::run(&evaluate::EvaluateOptions { warped, fixed, field: a.field, labels: a.labels, out: a.out })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
