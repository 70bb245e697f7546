//! Console summaries and long-format plot data, computed from persisted
//! artifacts only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{FarsError, Result};
use crate::io;
use crate::pipeline::{Layout, RunManifest};

fn rule(title: &str) -> String {
    format!("{title}\n{}\n", "=".repeat(title.chars().count()))
}

pub fn model_summary(dir: &Path) -> Result<String> {
    let meta = io::read_model_meta(dir)?;
    let mut s = rule("Multilevel Dynamic Factor Model");
    let _ = writeln!(s, "Number of periods:   {}", meta.periods);
    let _ = writeln!(s, "Number of variables: {}", meta.variables);
    let _ = writeln!(s, "Number of blocks:    {}", meta.blocks.block_count());
    let _ = writeln!(s, "Number of factors:   {}", meta.structure.total_factors());
    let _ = writeln!(s, "Factors per node:");
    for node in meta.structure.nodes() {
        let _ = writeln!(s, "  {:<12} {}", node.label(), node.count());
    }
    let _ = writeln!(s, "Initialization:      {}", meta.method);
    let _ = writeln!(s, "Iterations:          {}", meta.iterations);
    let _ = writeln!(s, "Converged:           {}", if meta.converged { "yes" } else { "no" });
    let _ = writeln!(s, "RSS:                 {:.4}", meta.rss);
    Ok(s)
}

pub fn subsample_summary(dir: &Path) -> Result<String> {
    let meta: io::SubsampleMeta = io::read_json(&dir.join("meta.json"))?;
    let mut s = rule("Subsample Estimates");
    let _ = writeln!(s, "Number of subsamples: {}", meta.n_samples);
    let _ = writeln!(s, "Sample size:          {}", meta.sample_size);
    let _ = writeln!(s, "Variables per draw:   {}", meta.subsample_dim);
    let _ = writeln!(s, "Seed:                 {}", meta.seed);
    let _ = writeln!(s, "Not converged:        {}", meta.not_converged.len());
    Ok(s)
}

pub fn scenario_summary(dir: &Path) -> Result<String> {
    let meta: io::ScenarioMeta = io::read_json(&dir.join("meta.json"))?;
    let mut s = rule("Stressed Scenario");
    let _ = writeln!(s, "Number of periods:  {}", meta.periods);
    let _ = writeln!(s, "Number of factors:  {}", meta.factors);
    let _ = writeln!(s, "Confidence level:   {}", meta.alpha);
    let _ = writeln!(s, "Chi-square value:   {:.6}", meta.chi2_value);
    let _ = writeln!(s, "Points per period:  {}", meta.z);
    let _ = writeln!(s, "Gamma estimator:    {}", meta.gamma_mode);
    let _ = writeln!(s, "Subsamples:         {} (N* = {})", meta.s, meta.n_star);
    Ok(s)
}

pub fn fars_summary(dir: &Path) -> Result<String> {
    let fars = io::read_fars(dir)?;
    let meta: io::FarsMeta = io::read_json(&dir.join("meta.json"))?;
    let mut s = rule("Factor-Augmented Quantile Regressions");
    let _ = writeln!(s, "Forecast horizon:   {}", fars.horizon);
    let levels: Vec<String> = fars.levels.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(s, "Quantile levels:    {}", levels.join(", "));
    let _ = writeln!(s, "Forecast rows:      {}", fars.rows());
    let _ = writeln!(s, "Stressed:           {}", if meta.stressed { "yes" } else { "no" });
    if let Some(q) = fars.qtau {
        let _ = writeln!(s, "Stress quantile:    {q} ({})", fars.direction);
    }
    let mut terms = vec!["intercept".to_string(), "lag".to_string()];
    terms.extend(meta.factor_names.iter().cloned());
    for fit in &fars.fits {
        let _ = writeln!(s, "\ntau = {}", fit.tau);
        let _ = writeln!(s, "  {:<12} {:>12} {:>12} {:>10}", "term", "estimate", "std.error", "p.value");
        for (i, term) in terms.iter().enumerate() {
            let _ = writeln!(
                s,
                "  {:<12} {:>12.5} {:>12.5} {:>10.4}",
                term, fit.coefficients[i], fit.std_errors[i], fit.p_values[i]
            );
        }
    }
    Ok(s)
}

pub fn density_summary(dir: &Path) -> Result<String> {
    let meta = io::read_density_meta(dir)?;
    let mut s = rule("Skew-t Densities");
    let _ = writeln!(s, "Source quantiles:   {}", meta.source);
    let _ = writeln!(s, "Number of periods:  {}", meta.rows);
    let _ = writeln!(s, "Estimation points  : {}", meta.est_points);
    let _ = writeln!(s, "Random samples     : {}", meta.random_samples);
    let _ = writeln!(s, "Support:            [{}, {}]", meta.support.0, meta.support.1);
    let _ = writeln!(s, "Optimization:       {}", meta.optimization);
    let _ = writeln!(s, "Seed:               {}", meta.seed);
    let _ = writeln!(s, "Degenerate rows:    {}", meta.errors.len());
    Ok(s)
}

pub fn risk_summary(path: &Path) -> Result<String> {
    let (series, values) = io::read_risk(path)?;
    let mut s = rule(&format!("Quantile Risk ({series})"));
    let _ = writeln!(s, "Number of periods:  {}", values.len());
    if !values.is_empty() {
        let _ = writeln!(s, "Minimum:            {:.4}", values.min());
        let _ = writeln!(s, "Mean:               {:.4}", values.mean());
        let _ = writeln!(s, "Maximum:            {:.4}", values.max());
        let _ = writeln!(s, "Last period:        {:.4}", values[values.len() - 1]);
    }
    Ok(s)
}

/// Summaries of every artifact the manifest lists, in pipeline order.
pub fn run_summary(layout: &Layout, manifest: &RunManifest) -> Result<String> {
    let mut parts = Vec::new();
    for stage in &manifest.stages {
        let part = match stage.name.as_str() {
            "estimate" => model_summary(&layout.model())?,
            "subsample" => subsample_summary(&layout.subsamples())?,
            "scenario" => scenario_summary(&layout.scenario())?,
            "quantiles" => fars_summary(&layout.fars())?,
            "density" => density_summary(&layout.density())?,
            "risk" => risk_summary(&layout.risk())?,
            _ => continue,
        };
        parts.push(part);
    }
    if !manifest.warnings.is_empty() {
        let mut w = rule("Warnings");
        for msg in &manifest.warnings {
            let _ = writeln!(w, "- {msg}");
        }
        parts.push(w);
    }
    Ok(parts.join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Factors,
    Quantiles,
    Density,
    Risk,
}

impl FromStr for PlotKind {
    type Err = FarsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factors" => Ok(PlotKind::Factors),
            "quantiles" => Ok(PlotKind::Quantiles),
            "density" => Ok(PlotKind::Density),
            "risk" => Ok(PlotKind::Risk),
            other => Err(FarsError::Parameter(format!("unknown plot kind {other:?}"))),
        }
    }
}

impl PlotKind {
    /// Artifact of this kind inside an output directory.
    pub fn default_artifact(&self, layout: &Layout) -> PathBuf {
        match self {
            PlotKind::Factors => layout.model().join("factors.csv"),
            PlotKind::Quantiles => layout.fars().join("quantiles.csv"),
            PlotKind::Density => layout.density().join("density_grid.csv"),
            PlotKind::Risk => layout.risk(),
        }
    }

    fn from_file_name(name: &str) -> Option<Self> {
        match name {
            "factors.csv" | "stressed_factors.csv" => Some(PlotKind::Factors),
            "quantiles.csv" | "stressed_quantiles.csv" => Some(PlotKind::Quantiles),
            "density_grid.csv" => Some(PlotKind::Density),
            "risk.csv" => Some(PlotKind::Risk),
            _ => None,
        }
    }
}

fn kind_name(k: PlotKind) -> &'static str {
    match k {
        PlotKind::Factors => "factors",
        PlotKind::Quantiles => "quantiles",
        PlotKind::Density => "density",
        PlotKind::Risk => "risk",
    }
}

/// Long-format CSV: `period,series,value` for factors, quantiles and risk;
/// `period,abscissa,density` for densities.
pub fn plot_data(artifact: &Path, kind: PlotKind) -> Result<String> {
    let name = artifact.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    match PlotKind::from_file_name(name) {
        Some(k) if k == kind => {}
        Some(k) => {
            return Err(FarsError::Parameter(format!(
                "{} is a {} artifact, not {}",
                artifact.display(),
                kind_name(k),
                kind_name(kind)
            )))
        }
        None => {
            return Err(FarsError::Parameter(format!(
                "{} is not a recognized artifact",
                artifact.display()
            )))
        }
    }
    let mut out = String::new();
    match kind {
        PlotKind::Factors | PlotKind::Quantiles => {
            let t = io::read_table(artifact, true, false)?;
            let header = t.header.unwrap_or_default();
            out.push_str("period,series,value\n");
            for i in 0..t.values.nrows() {
                for (j, series) in header.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{}", i + 1, series, t.values[(i, j)]);
                }
            }
        }
        PlotKind::Density => {
            let t = io::read_table(artifact, false, false)?.values;
            if t.nrows() < 1 {
                return Err(FarsError::Format(format!("{} is empty", artifact.display())));
            }
            out.push_str("period,abscissa,density\n");
            for i in 1..t.nrows() {
                for j in 0..t.ncols() {
                    let _ = writeln!(out, "{},{},{}", i, t[(0, j)], t[(i, j)]);
                }
            }
        }
        PlotKind::Risk => {
            let (series, values) = io::read_risk(artifact)?;
            out.push_str("period,series,value\n");
            for (i, v) in values.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", i + 1, series, v);
            }
        }
    }
    Ok(out)
}
