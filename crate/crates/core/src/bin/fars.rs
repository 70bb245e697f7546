use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fars::faqr::Direction;
use fars::pipeline::{self, PipelineConfig, QuantileMode, Stage};
use fars::report::{self, PlotKind};
use fars::uncertainty::GammaMode;
use fars::{FarsError, Result};

/// Multi-level factor models, stressed scenarios and quantile-based density
/// forecasts.
#[derive(Parser)]
#[command(name = "fars", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the multi-level factor model.
    Estimate(RunArgs),
    /// Re-estimate the model on cross-sectional subsamples.
    Subsample(RunArgs),
    /// Build confidence-ellipsoid scenarios from the subsamples.
    Scenario(RunArgs),
    /// Fit the quantile regressions (stressed when a scenario exists).
    Quantiles(RunArgs),
    /// Fit skew-t densities to the forecast quantiles.
    Density(RunArgs),
    /// Extract the tail quantile of every density.
    Risk(RunArgs),
    /// Estimate, quantiles, density and risk without stress.
    RunUnstressed(RunArgs),
    /// The full stressed pipeline.
    RunStressed(RunArgs),
    /// Print an artifact as long-format CSV.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    qtau: Option<f64>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    edge: Option<f64>,
    #[arg(long)]
    direction: Option<Direction>,
    #[arg(long)]
    gamma: Option<GammaMode>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    sample_size: Option<f64>,
    /// Density support as `lo,hi`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_support)]
    support: Option<[f64; 2]>,
}

#[derive(Args)]
struct PlotArgs {
    /// factors, quantiles, density or risk.
    #[arg(long)]
    kind: PlotKind,
    /// Artifact file; defaults to the artifact of `--kind` in the output
    /// directory.
    artifact: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_support(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected lo,hi, got {s:?}"));
    }
    let lo = parts[0].parse::<f64>().map_err(|e| format!("{}: {e}", parts[0]))?;
    let hi = parts[1].parse::<f64>().map_err(|e| format!("{}: {e}", parts[1]))?;
    Ok([lo, hi])
}

fn absolute(p: PathBuf) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p);
    }
    let cwd = std::env::current_dir().map_err(|e| FarsError::Config(format!("current directory: {e}")))?;
    Ok(cwd.join(p))
}

fn load_config(args: RunArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    let o = args.overrides;
    if let Some(v) = o.out {
        cfg.output = absolute(v)?;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = o.qtau {
        cfg.qtau = v;
    }
    if let Some(v) = o.h {
        cfg.h = v;
    }
    if let Some(v) = o.edge {
        cfg.edge = v;
    }
    if let Some(v) = o.direction {
        cfg.direction = v;
    }
    if let Some(v) = o.gamma {
        cfg.gamma_mode = v;
    }
    if let Some(v) = o.delta {
        cfg.delta = v;
    }
    if let Some(v) = o.n_samples {
        cfg.n_samples = v;
    }
    if let Some(v) = o.sample_size {
        cfg.sample_size = v;
    }
    if let Some(v) = o.support {
        cfg.support = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs, name: &str, stages: &[Stage]) -> Result<String> {
    let cfg = load_config(args)?;
    let manifest = pipeline::run_stages(&cfg, name, stages)?;
    report::run_summary(&cfg.layout(), &manifest)
}

fn dispatch(cli: Cli) -> Result<String> {
    use QuantileMode::*;
    match cli.command {
        Command::Estimate(a) => run(a, "estimate", &[Stage::Estimate]),
        Command::Subsample(a) => run(a, "subsample", &[Stage::Subsample]),
        Command::Scenario(a) => run(a, "scenario", &[Stage::Scenario]),
        Command::Quantiles(a) => run(a, "quantiles", &[Stage::Quantiles(Auto)]),
        Command::Density(a) => run(a, "density", &[Stage::Density]),
        Command::Risk(a) => run(a, "risk", &[Stage::Risk]),
        Command::RunUnstressed(a) => {
            let cfg = load_config(a)?;
            let m = pipeline::run_unstressed(&cfg)?;
            report::run_summary(&cfg.layout(), &m)
        }
        Command::RunStressed(a) => {
            let cfg = load_config(a)?;
            let m = pipeline::run_stressed(&cfg)?;
            report::run_summary(&cfg.layout(), &m)
        }
        Command::PlotData(a) => {
            let artifact = match (a.artifact, a.out, a.config) {
                (Some(p), _, _) => p,
                (None, Some(out), _) => a.kind.default_artifact(&pipeline::Layout::new(absolute(out)?)),
                (None, None, Some(cfg)) => a.kind.default_artifact(&PipelineConfig::load(cfg)?.layout()),
                (None, None, None) => {
                    return Err(FarsError::Parameter(
                        "plot-data needs an artifact path, --out or --config".into(),
                    ))
                }
            };
            report::plot_data(&artifact, a.kind)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FARS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| FarsError::Config(format!("FARS_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| FarsError::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = configure_threads().and_then(|_| dispatch(cli));
    match outcome {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
