//! Configured end-to-end runs with persisted intermediate artifacts.
//!
//! Every stage reads its inputs from the output directory (plus the raw data
//! named in the config) and writes its own artifacts there, so stages can be
//! re-run one at a time:
//!
//! ```text
//! out/
//!   model/        factors.csv loadings.csv residuals.csv meta.json
//!   subsamples/   001/ 002/ … meta.json
//!   scenario/     points_001.csv … meta.json
//!   fars/         quantiles.csv coefficients.csv … meta.json
//!   density/      density_grid.csv samples.csv params.csv meta.json
//!   risk.csv
//!   manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{load_panel, standardize, BlockSpec, FactorStructure, Node};
use crate::error::{FarsError, Result};
use crate::factors::{estimate_mldfm, InitMethod, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::faqr::{compute_fars, quantile_levels, Direction, DEFAULT_EDGE};
use crate::io;
use crate::skewt::{compute_density, quantile_risk, DEFAULT_EST_POINTS, DEFAULT_RANDOM_SAMPLES};
use crate::uncertainty::{create_scenario, subsample_estimates, GammaMode, DEFAULT_DELTA};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub blocks: Vec<usize>,
    pub count: usize,
}

fn yes() -> bool {
    true
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_h() -> usize {
    1
}
fn default_edge() -> f64 {
    DEFAULT_EDGE
}
fn default_qtau() -> f64 {
    DEFAULT_EDGE
}
fn default_alpha() -> f64 {
    0.95
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_n_samples() -> usize {
    100
}
fn default_sample_size() -> f64 {
    0.94
}
fn default_est_points() -> usize {
    DEFAULT_EST_POINTS
}
fn default_random_samples() -> usize {
    DEFAULT_RANDOM_SAMPLES
}
fn default_support() -> [f64; 2] {
    [-10.0, 10.0]
}
fn default_seed() -> u64 {
    42
}
fn default_output() -> PathBuf {
    PathBuf::from("fars_out")
}

/// A full run description, read from TOML. Relative paths resolve against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Panel CSV: rows are periods, columns variables.
    pub data: PathBuf,
    #[serde(default = "yes")]
    pub has_dates: bool,
    #[serde(default = "yes")]
    pub has_header: bool,
    /// A CSV path (first data column is used) or a column of `data`, which
    /// is then removed from the panel.
    pub dep_variable: String,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Number of variables per block, in column order.
    pub blocks: Vec<usize>,
    pub structure: Vec<NodeConfig>,
    #[serde(default)]
    pub method: InitMethod,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default = "default_edge")]
    pub edge: f64,
    #[serde(default = "default_qtau")]
    pub qtau: f64,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub gamma_mode: GammaMode,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_sample_size")]
    pub sample_size: f64,
    #[serde(default = "default_est_points")]
    pub est_points: usize,
    #[serde(default = "default_random_samples")]
    pub random_samples: usize,
    #[serde(default = "default_support")]
    pub support: [f64; 2],
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| FarsError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FarsError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base).map_err(|e| match e {
            FarsError::Config(msg) => FarsError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| FarsError::Config(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.output_dir())
    }

    pub fn block_spec(&self) -> Result<BlockSpec> {
        BlockSpec::from_sizes(&self.blocks).map_err(|e| FarsError::Config(e.to_string()))
    }

    pub fn factor_structure(&self) -> Result<FactorStructure> {
        let nodes = self
            .structure
            .iter()
            .map(|n| Node::new(n.blocks.iter().copied(), n.count))
            .collect::<Result<Vec<_>>>()?;
        FactorStructure::new(nodes)
    }

    /// Checks every parameter against its domain.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FarsError::Config(msg));
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return bad("blocks must list at least one positive block size".into());
        }
        let structure = self.factor_structure()?;
        if structure.max_block() > self.blocks.len() {
            return bad(format!(
                "structure references block {} but only {} blocks are defined",
                structure.max_block(),
                self.blocks.len()
            ));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if self.h == 0 {
            return bad("h must be at least 1".into());
        }
        quantile_levels(self.edge).map_err(|e| FarsError::Config(e.to_string()))?;
        for (name, v) in [("qtau", self.qtau), ("alpha", self.alpha)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if !(self.sample_size > 0.0 && self.sample_size <= 1.0) {
            return bad(format!("sample_size must lie in (0, 1], got {}", self.sample_size));
        }
        if self.est_points < 2 {
            return bad("est_points must be at least 2".into());
        }
        if self.random_samples == 0 {
            return bad("random_samples must be at least 1".into());
        }
        let [lo, hi] = self.support;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("support must satisfy lo < hi, got [{lo}, {hi}]"));
        }
        Ok(())
    }
}

/// Paths of every artifact below an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn subsamples(&self) -> PathBuf {
        self.root.join("subsamples")
    }
    pub fn scenario(&self) -> PathBuf {
        self.root.join("scenario")
    }
    pub fn fars(&self) -> PathBuf {
        self.root.join("fars")
    }
    pub fn density(&self) -> PathBuf {
        self.root.join("density")
    }
    pub fn risk(&self) -> PathBuf {
        self.root.join("risk.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

/// Model inputs after ingestion and standardization.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub x: DMatrix<f64>,
    pub dep: DVector<f64>,
    pub spec: BlockSpec,
    pub structure: FactorStructure,
    pub dates: Option<Vec<String>>,
}

pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let data_path = cfg.resolve(&cfg.data);
    let mut panel = load_panel(&data_path, cfg.has_dates, cfg.has_header)?;
    let dep_path = cfg.resolve(Path::new(&cfg.dep_variable));
    let dep: Vec<f64> = if dep_path.is_file() {
        let d = load_panel(&dep_path, cfg.has_dates, cfg.has_header)?;
        if d.periods() != panel.periods() {
            return Err(FarsError::Format(format!(
                "{} has {} periods but {} has {}",
                dep_path.display(),
                d.periods(),
                data_path.display(),
                panel.periods()
            )));
        }
        d.values().column(0).iter().copied().collect()
    } else {
        let j = panel
            .var_names()
            .and_then(|names| names.iter().position(|n| n == &cfg.dep_variable))
            .ok_or_else(|| {
                FarsError::Config(format!(
                    "dep_variable {:?} is neither a file nor a column of {}",
                    cfg.dep_variable,
                    data_path.display()
                ))
            })?;
        let (col, rest) = panel.split_column(j)?;
        panel = rest;
        col
    };
    if cfg.standardize {
        panel = standardize(&panel)?;
    }
    let spec = cfg.block_spec()?;
    spec.check_columns(panel.variables())?;
    Ok(Inputs {
        dates: panel.dates().map(<[String]>::to_vec),
        x: panel.into_values(),
        dep: DVector::from_vec(dep),
        spec,
        structure: cfg.factor_structure()?,
    })
}

/// Which quantiles a FA-QR stage produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantileMode {
    Unstressed,
    Stressed,
    /// Stressed when a scenario artifact exists.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Estimate,
    Subsample,
    Scenario,
    Quantiles(QuantileMode),
    Density,
    Risk,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Estimate => "estimate",
            Stage::Subsample => "subsample",
            Stage::Scenario => "scenario",
            Stage::Quantiles(_) => "quantiles",
            Stage::Density => "density",
            Stage::Risk => "risk",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| FarsError::io(dir, e))?;
    }
    io::ensure_dir(dir)
}

pub fn stage_estimate(cfg: &PipelineConfig) -> Result<StageOutput> {
    let inputs = load_inputs(cfg)?;
    let result = estimate_mldfm(&inputs.x, &inputs.spec, &inputs.structure, cfg.method, cfg.tol, cfg.max_iter)?;
    let files = io::write_mldfm(&cfg.layout().model(), &result)?;
    let mut warnings = Vec::new();
    if !result.converged {
        warnings.push(format!(
            "estimation did not converge within {} iterations (tol {})",
            cfg.max_iter, cfg.tol
        ));
    }
    Ok(StageOutput { files, warnings })
}

pub fn stage_subsample(cfg: &PipelineConfig) -> Result<StageOutput> {
    let inputs = load_inputs(cfg)?;
    let subs = subsample_estimates(
        &inputs.x,
        &inputs.spec,
        &inputs.structure,
        cfg.n_samples,
        cfg.sample_size,
        cfg.method,
        cfg.tol,
        cfg.max_iter,
        cfg.seed,
    )?;
    let not_converged: Vec<usize> = subs
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.converged)
        .map(|(i, _)| i + 1)
        .collect();
    let meta = io::SubsampleMeta {
        n_samples: cfg.n_samples,
        sample_size: cfg.sample_size,
        seed: cfg.seed,
        subsample_dim: subs[0].variables(),
        not_converged: not_converged.clone(),
    };
    let dir = cfg.layout().subsamples();
    reset_dir(&dir)?;
    let files = io::write_subsamples(&dir, &subs, &meta)?;
    let warnings = if not_converged.is_empty() {
        vec![]
    } else {
        vec![format!("{} subsample estimations did not converge", not_converged.len())]
    };
    Ok(StageOutput { files, warnings })
}

pub fn stage_scenario(cfg: &PipelineConfig) -> Result<StageOutput> {
    let layout = cfg.layout();
    let full = io::read_mldfm(&layout.model())?;
    let (subs, _) = io::read_subsamples(&layout.subsamples())?;
    let scenario = create_scenario(&full, &subs, cfg.alpha, cfg.gamma_mode, cfg.delta)?;
    let dir = layout.scenario();
    reset_dir(&dir)?;
    let files = io::write_scenario(&dir, &scenario, &full.column_names())?;
    Ok(StageOutput { files, warnings: vec![] })
}

pub fn stage_quantiles(cfg: &PipelineConfig, mode: QuantileMode) -> Result<StageOutput> {
    let layout = cfg.layout();
    let inputs = load_inputs(cfg)?;
    let model = io::read_mldfm(&layout.model())?;
    let stressed = match mode {
        QuantileMode::Unstressed => false,
        QuantileMode::Stressed => true,
        QuantileMode::Auto => layout.scenario().join("meta.json").is_file(),
    };
    let scenario = if stressed {
        Some(io::read_scenario(&layout.scenario())?)
    } else {
        None
    };
    let result = compute_fars(
        &inputs.dep,
        &model.factors,
        cfg.h,
        cfg.edge,
        scenario.as_ref(),
        Some(cfg.qtau),
        cfg.direction,
    )?;
    let files = io::write_fars(&layout.fars(), &result, &model.column_names())?;
    Ok(StageOutput { files, warnings: vec![] })
}

pub fn stage_density(cfg: &PipelineConfig) -> Result<StageOutput> {
    let layout = cfg.layout();
    let fars = io::read_fars(&layout.fars())?;
    let (quantiles, source) = match &fars.stressed_quantiles {
        Some(sq) => (sq, "stressed"),
        None => (&fars.quantiles, "unstressed"),
    };
    let density = compute_density(
        quantiles,
        &fars.levels,
        cfg.est_points,
        cfg.random_samples,
        (cfg.support[0], cfg.support[1]),
        cfg.seed,
    )?;
    let warnings = density
        .errors
        .iter()
        .map(|e| format!("density row {} degenerate: {}", e.row + 1, e.message))
        .collect();
    let files = io::write_density(&layout.density(), &density, source)?;
    Ok(StageOutput { files, warnings })
}

pub fn stage_risk(cfg: &PipelineConfig) -> Result<StageOutput> {
    let layout = cfg.layout();
    let meta = io::read_density_meta(&layout.density())?;
    let density = io::read_density(&layout.density())?;
    let risk = quantile_risk(&density, cfg.qtau)?;
    let series = if meta.source == "stressed" { "GiS" } else { "GaR" };
    let path = layout.risk();
    io::write_risk(&path, series, &risk)?;
    Ok(StageOutput {
        files: vec![path],
        warnings: vec![],
    })
}

pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<StageOutput> {
    match stage {
        Stage::Estimate => stage_estimate(cfg),
        Stage::Subsample => stage_subsample(cfg),
        Stage::Scenario => stage_scenario(cfg),
        Stage::Quantiles(mode) => stage_quantiles(cfg, mode),
        Stage::Density => stage_density(cfg),
        Stage::Risk => stage_risk(cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub run: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageTiming>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

/// Runs `stages` in order and writes `manifest.json` last, also when a stage
/// fails (the error names the failing stage).
pub fn run_stages(cfg: &PipelineConfig, run: &str, stages: &[Stage]) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = cfg.layout();
    io::ensure_dir(&layout.root)?;
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        run: run.to_string(),
        config: cfg.clone(),
        stages: vec![],
        artifacts: vec![],
        warnings: vec![],
        status: "running".into(),
        failed_stage: None,
        error: None,
    };
    let rel = |p: &Path| {
        p.strip_prefix(&layout.root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    };
    for &stage in stages {
        let start = Instant::now();
        let outcome = run_stage(cfg, stage);
        manifest.stages.push(StageTiming {
            name: stage.name().to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        match outcome {
            Ok(out) => {
                manifest.artifacts.extend(out.files.iter().map(|p| rel(p)));
                manifest.warnings.extend(out.warnings);
            }
            Err(e) => {
                manifest.status = "failed".into();
                manifest.failed_stage = Some(stage.name().to_string());
                manifest.error = Some(e.to_string());
                io::write_json(&layout.manifest(), &manifest)?;
                return Err(FarsError::Stage {
                    stage: stage.name(),
                    source: Box::new(e),
                });
            }
        }
    }
    manifest.status = "complete".into();
    io::write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

/// standardize → estimate → FA-QR → density → risk.
pub fn run_unstressed(cfg: &PipelineConfig) -> Result<RunManifest> {
    run_stages(
        cfg,
        "unstressed",
        &[Stage::Estimate, Stage::Quantiles(QuantileMode::Unstressed), Stage::Density, Stage::Risk],
    )
}

/// standardize → estimate → subsample → scenario → stressed FA-QR →
/// density → risk.
pub fn run_stressed(cfg: &PipelineConfig) -> Result<RunManifest> {
    run_stages(
        cfg,
        "stressed",
        &[
            Stage::Estimate,
            Stage::Subsample,
            Stage::Scenario,
            Stage::Quantiles(QuantileMode::Stressed),
            Stage::Density,
            Stage::Risk,
        ],
    )
}
