//! CSV and JSON persistence of every intermediate artifact.
//!
//! Floats are written in Rust's shortest round-trip form, so reading an
//! artifact back reproduces the in-memory values bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{BlockSpec, FactorStructure};
use crate::error::{FarsError, Result};
use crate::factors::{InitMethod, MldfmResult};
use crate::faqr::{Direction, FarsResult, QuantileFit};
use crate::skewt::{DensityResult, RowError, SkewTParams};
use crate::uncertainty::{GammaMode, Scenario};

fn csv_error(path: &Path, e: csv::Error) -> FarsError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FarsError::io(path, io),
        other => FarsError::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| FarsError::io(path, e))
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(FarsError::io(path, e)),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| {
        FarsError::Format(format!("{}: line {line}: {s:?} is not a number", path.display()))
    })
}

/// Writes `m` with an optional header row and an optional leading label
/// column.
pub fn write_table(
    path: &Path,
    header: Option<&[String]>,
    labels: Option<&[String]>,
    m: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| csv_error(path, e))?;
    }
    for i in 0..m.nrows() {
        let mut rec: Vec<String> = Vec::with_capacity(m.ncols() + 1);
        if let Some(l) = labels {
            rec.push(l[i].clone());
        }
        rec.extend(m.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| FarsError::io(path, e))
}

/// Numeric table read back by [`read_table`].
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub labels: Option<Vec<String>>,
    pub values: DMatrix<f64>,
}

pub fn read_table(path: &Path, has_header: bool, has_labels: bool) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut header = None;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if line == 0 && has_header {
            header = Some(rec.iter().map(str::to_string).collect());
            continue;
        }
        let mut fields = rec.iter();
        if has_labels {
            labels.push(fields.next().unwrap_or_default().to_string());
        }
        let row = fields
            .map(|s| parse_f64(path, line + 1, s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(FarsError::Format(format!(
                    "{}: line {} has {} values, expected {}",
                    path.display(),
                    line + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or_else(
        || header.as_ref().map_or(0, |h: &Vec<String>| h.len() - usize::from(has_labels)),
        Vec::len,
    );
    let values = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    Ok(Table {
        header,
        labels: has_labels.then_some(labels),
        values,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| FarsError::Format(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| FarsError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| FarsError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FarsError::Format(format!("{}: {e}", path.display())))
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub method: InitMethod,
    pub iterations: usize,
    pub converged: bool,
    pub rss: f64,
    pub rss_trace: Vec<f64>,
    pub periods: usize,
    pub variables: usize,
    pub factor_names: Vec<String>,
    pub blocks: BlockSpec,
    pub structure: FactorStructure,
}

pub const MODEL_FILES: [&str; 4] = ["factors.csv", "loadings.csv", "residuals.csv", "meta.json"];

/// Writes `factors.csv`, `loadings.csv`, `residuals.csv` and `meta.json`.
pub fn write_mldfm(dir: &Path, result: &MldfmResult) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let names = result.column_names();
    write_table(&dir.join("factors.csv"), Some(&names), None, &result.factors)?;
    write_table(&dir.join("loadings.csv"), Some(&names), None, &result.loadings)?;
    write_table(
        &dir.join("residuals.csv"),
        Some(&numbered("x", result.variables())),
        None,
        &result.residuals,
    )?;
    let meta = ModelMeta {
        method: result.method,
        iterations: result.iterations,
        converged: result.converged,
        rss: result.rss(),
        rss_trace: result.rss_trace.clone(),
        periods: result.periods(),
        variables: result.variables(),
        factor_names: names,
        blocks: result.blocks.clone(),
        structure: result.structure.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(MODEL_FILES.iter().map(|f| dir.join(f)).collect())
}

pub fn read_model_meta(dir: &Path) -> Result<ModelMeta> {
    read_json(&dir.join("meta.json"))
}

pub fn read_mldfm(dir: &Path) -> Result<MldfmResult> {
    let meta = read_model_meta(dir)?;
    let factors = read_table(&dir.join("factors.csv"), true, false)?.values;
    let loadings = read_table(&dir.join("loadings.csv"), true, false)?.values;
    let residuals = read_table(&dir.join("residuals.csv"), true, false)?.values;
    let r = meta.structure.total_factors();
    if factors.shape() != (meta.periods, r)
        || loadings.shape() != (meta.variables, r)
        || residuals.shape() != (meta.periods, meta.variables)
    {
        return Err(FarsError::Format(format!(
            "{}: artifact shapes disagree with meta.json",
            dir.display()
        )));
    }
    Ok(MldfmResult {
        factors,
        loadings,
        residuals,
        method: meta.method,
        iterations: meta.iterations,
        rss_trace: meta.rss_trace,
        converged: meta.converged,
        structure: meta.structure,
        blocks: meta.blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleMeta {
    pub n_samples: usize,
    pub sample_size: f64,
    pub seed: u64,
    pub subsample_dim: usize,
    pub not_converged: Vec<usize>,
}

/// One numbered directory per subsample (`001/`, `002/`, …) plus `meta.json`.
pub fn write_subsamples(dir: &Path, subs: &[MldfmResult], meta: &SubsampleMeta) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut files = Vec::new();
    let width = subs.len().to_string().len().max(3);
    for (s, res) in subs.iter().enumerate() {
        files.extend(write_mldfm(&dir.join(format!("{:0width$}", s + 1)), res)?);
    }
    let meta_path = dir.join("meta.json");
    write_json(&meta_path, meta)?;
    files.push(meta_path);
    Ok(files)
}

pub fn read_subsamples(dir: &Path) -> Result<(Vec<MldfmResult>, SubsampleMeta)> {
    let meta: SubsampleMeta = read_json(&dir.join("meta.json"))?;
    let width = meta.n_samples.to_string().len().max(3);
    let subs = (1..=meta.n_samples)
        .map(|s| read_mldfm(&dir.join(format!("{s:0width$}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((subs, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub alpha: f64,
    pub chi2_value: f64,
    /// Points per period.
    pub z: usize,
    pub gamma_mode: GammaMode,
    pub delta: f64,
    /// Number of subsamples S.
    pub s: usize,
    /// Variables per subsample N*.
    pub n_star: usize,
    pub periods: usize,
    pub factors: usize,
}

fn scenario_file(dir: &Path, t: usize, periods: usize) -> PathBuf {
    let width = periods.to_string().len().max(3);
    dir.join(format!("points_{:0width$}.csv", t + 1))
}

pub fn write_scenario(dir: &Path, scenario: &Scenario, factor_names: &[String]) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let t = scenario.periods();
    let mut files = Vec::with_capacity(t + 1);
    for (ti, pts) in scenario.per_t.iter().enumerate() {
        let path = scenario_file(dir, ti, t);
        write_table(&path, Some(factor_names), None, pts)?;
        files.push(path);
    }
    let meta = ScenarioMeta {
        alpha: scenario.alpha,
        chi2_value: scenario.chi2_value,
        z: scenario.points_per_period(),
        gamma_mode: scenario.gamma_mode,
        delta: scenario.delta,
        s: scenario.subsample_count,
        n_star: scenario.subsample_dim,
        periods: t,
        factors: scenario.dimension(),
    };
    let meta_path = dir.join("meta.json");
    write_json(&meta_path, &meta)?;
    files.push(meta_path);
    Ok(files)
}

pub fn read_scenario(dir: &Path) -> Result<Scenario> {
    let meta: ScenarioMeta = read_json(&dir.join("meta.json"))?;
    let per_t = (0..meta.periods)
        .map(|ti| {
            let m = read_table(&scenario_file(dir, ti, meta.periods), true, false)?.values;
            if m.shape() != (meta.z, meta.factors) {
                return Err(FarsError::Format(format!(
                    "scenario period {} has shape {:?}, expected ({}, {})",
                    ti + 1,
                    m.shape(),
                    meta.z,
                    meta.factors
                )));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scenario {
        per_t,
        alpha: meta.alpha,
        chi2_value: meta.chi2_value,
        gamma_mode: meta.gamma_mode,
        delta: meta.delta,
        subsample_count: meta.s,
        subsample_dim: meta.n_star,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredFit {
    pub tau: f64,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
}

impl From<&QuantileFit> for StoredFit {
    fn from(f: &QuantileFit) -> Self {
        StoredFit {
            tau: f.tau,
            coefficients: f.coefficients.iter().copied().collect(),
            std_errors: f.std_errors.iter().copied().collect(),
            p_values: f.p_values.iter().copied().collect(),
        }
    }
}

impl From<StoredFit> for QuantileFit {
    fn from(f: StoredFit) -> Self {
        QuantileFit {
            tau: f.tau,
            coefficients: DVector::from_vec(f.coefficients),
            std_errors: DVector::from_vec(f.std_errors),
            p_values: DVector::from_vec(f.p_values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarsMeta {
    pub h: usize,
    pub levels: Vec<f64>,
    pub qtau: Option<f64>,
    pub direction: Direction,
    pub rows: usize,
    pub factor_names: Vec<String>,
    pub qtau_fit: Option<StoredFit>,
    pub stressed: bool,
}

pub fn level_label(tau: f64) -> String {
    format!("q{tau}")
}

fn coefficient_labels(factor_names: &[String]) -> Vec<String> {
    let mut v = vec!["intercept".to_string(), "lag".to_string()];
    v.extend(factor_names.iter().cloned());
    v
}

const FARS_OPTIONAL: [&str; 3] = ["stressed_quantiles.csv", "stressed_factors.csv", "qtau.csv"];

pub fn write_fars(dir: &Path, result: &FarsResult, factor_names: &[String]) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    for f in FARS_OPTIONAL {
        remove_if_exists(&dir.join(f))?;
    }
    let level_names: Vec<String> = result.levels.iter().map(|&l| level_label(l)).collect();
    let mut files = Vec::new();
    let mut put = |name: &str, header: Option<&[String]>, labels: Option<&[String]>, m: &DMatrix<f64>| {
        let path = dir.join(name);
        write_table(&path, header, labels, m)?;
        files.push(path);
        Ok::<_, FarsError>(())
    };
    put("quantiles.csv", Some(&level_names), None, &result.quantiles)?;
    if let Some(sq) = &result.stressed_quantiles {
        put("stressed_quantiles.csv", Some(&level_names), None, sq)?;
    }
    if let Some(sf) = &result.stressed_factors {
        put("stressed_factors.csv", Some(factor_names), None, sf)?;
    }
    let terms = coefficient_labels(factor_names);
    let mut coef_header = vec!["term".to_string()];
    coef_header.extend(level_names.iter().cloned());
    let p = terms.len();
    let k = result.fits.len();
    let pick = |f: fn(&QuantileFit) -> &DVector<f64>| {
        DMatrix::from_fn(p, k, |i, j| f(&result.fits[j])[i])
    };
    put("coefficients.csv", Some(&coef_header), Some(&terms), &pick(|f| &f.coefficients))?;
    put("std_errors.csv", Some(&coef_header), Some(&terms), &pick(|f| &f.std_errors))?;
    put("p_values.csv", Some(&coef_header), Some(&terms), &pick(|f| &f.p_values))?;
    if let Some(uq) = &result.qtau_quantiles {
        let mut header = vec!["unstressed".to_string()];
        let mut m = DMatrix::from_column_slice(uq.len(), 1, uq.as_slice());
        if let Some(sq) = &result.stressed_qtau_quantiles {
            header.push("stressed".to_string());
            m = m.insert_column(1, 0.0);
            m.set_column(1, sq);
        }
        put("qtau.csv", Some(&header), None, &m)?;
    }
    let meta = FarsMeta {
        h: result.horizon,
        levels: result.levels.clone(),
        qtau: result.qtau,
        direction: result.direction,
        rows: result.rows(),
        factor_names: factor_names.to_vec(),
        qtau_fit: result.qtau_fit.as_ref().map(StoredFit::from),
        stressed: result.stressed_quantiles.is_some(),
    };
    let meta_path = dir.join("meta.json");
    write_json(&meta_path, &meta)?;
    files.push(meta_path);
    Ok(files)
}

pub fn read_fars(dir: &Path) -> Result<FarsResult> {
    let meta: FarsMeta = read_json(&dir.join("meta.json"))?;
    let quantiles = read_table(&dir.join("quantiles.csv"), true, false)?.values;
    let coef = read_table(&dir.join("coefficients.csv"), true, true)?.values;
    let se = read_table(&dir.join("std_errors.csv"), true, true)?.values;
    let pv = read_table(&dir.join("p_values.csv"), true, true)?.values;
    if coef.ncols() != meta.levels.len() || quantiles.ncols() != meta.levels.len() {
        return Err(FarsError::Format(format!("{}: level count mismatch", dir.display())));
    }
    let fits = meta
        .levels
        .iter()
        .enumerate()
        .map(|(j, &tau)| QuantileFit {
            tau,
            coefficients: coef.column(j).into_owned(),
            std_errors: se.column(j).into_owned(),
            p_values: pv.column(j).into_owned(),
        })
        .collect();
    let (stressed_quantiles, stressed_factors) = if meta.stressed {
        (
            Some(read_table(&dir.join("stressed_quantiles.csv"), true, false)?.values),
            Some(read_table(&dir.join("stressed_factors.csv"), true, false)?.values),
        )
    } else {
        (None, None)
    };
    let qpath = dir.join("qtau.csv");
    let (qtau_quantiles, stressed_qtau_quantiles) = if qpath.exists() {
        let q = read_table(&qpath, true, false)?.values;
        let un = Some(q.column(0).into_owned());
        let st = (q.ncols() > 1).then(|| q.column(1).into_owned());
        (un, st)
    } else {
        (None, None)
    };
    Ok(FarsResult {
        horizon: meta.h,
        levels: meta.levels,
        fits,
        quantiles,
        stressed_quantiles,
        stressed_factors,
        qtau: meta.qtau,
        direction: meta.direction,
        qtau_fit: meta.qtau_fit.map(QuantileFit::from),
        qtau_quantiles,
        stressed_qtau_quantiles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMeta {
    pub seed: u64,
    pub support: (f64, f64),
    pub optimization: String,
    pub est_points: usize,
    pub random_samples: usize,
    pub rows: usize,
    pub source: String,
    pub errors: Vec<RowError>,
}

pub fn write_density(dir: &Path, d: &DensityResult, source: &str) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let m = d.rows();
    let e = d.grid.len();
    let mut grid = DMatrix::zeros(m + 1, e);
    for (j, &x) in d.grid.iter().enumerate() {
        grid[(0, j)] = x;
    }
    grid.view_mut((1, 0), (m, e)).copy_from(&d.densities);
    let grid_path = dir.join("density_grid.csv");
    write_table(&grid_path, None, None, &grid)?;
    let samples_path = dir.join("samples.csv");
    write_table(&samples_path, None, None, &d.samples)?;
    let params = DMatrix::from_fn(m, 5, |i, j| match (&d.params[i], j) {
        (_, 4) => d.fit_loss[i],
        (Some(p), 0) => p.location,
        (Some(p), 1) => p.scale,
        (Some(p), 2) => p.shape,
        (Some(p), 3) => p.dof,
        _ => f64::NAN,
    });
    let params_path = dir.join("params.csv");
    let header: Vec<String> = ["location", "scale", "shape", "dof", "loss"].map(String::from).to_vec();
    write_table(&params_path, Some(&header), None, &params)?;
    let meta = DensityMeta {
        seed: d.seed,
        support: d.support,
        optimization: d.optimization.clone(),
        est_points: e,
        random_samples: d.samples.ncols(),
        rows: m,
        source: source.to_string(),
        errors: d.errors.clone(),
    };
    let meta_path = dir.join("meta.json");
    write_json(&meta_path, &meta)?;
    Ok(vec![grid_path, samples_path, params_path, meta_path])
}

pub fn read_density_meta(dir: &Path) -> Result<DensityMeta> {
    read_json(&dir.join("meta.json"))
}

pub fn read_density(dir: &Path) -> Result<DensityResult> {
    let meta = read_density_meta(dir)?;
    let grid_all = read_table(&dir.join("density_grid.csv"), false, false)?.values;
    if grid_all.nrows() != meta.rows + 1 {
        return Err(FarsError::Format(format!("{}: density row count mismatch", dir.display())));
    }
    let grid: Vec<f64> = grid_all.row(0).iter().copied().collect();
    let densities = grid_all.rows(1, meta.rows).into_owned();
    let samples = read_table(&dir.join("samples.csv"), false, false)?.values;
    let params_m = read_table(&dir.join("params.csv"), true, false)?.values;
    let params = (0..meta.rows)
        .map(|i| {
            let p = params_m.row(i);
            (!p[0].is_nan()).then(|| SkewTParams {
                location: p[0],
                scale: p[1],
                shape: p[2],
                dof: p[3],
            })
        })
        .collect();
    let fit_loss = params_m.column(4).iter().copied().collect();
    Ok(DensityResult {
        grid,
        densities,
        samples,
        params,
        fit_loss,
        optimization: meta.optimization,
        seed: meta.seed,
        support: meta.support,
        errors: meta.errors,
    })
}

/// `risk.csv`: one `period,<series>` row per forecast row.
pub fn write_risk(path: &Path, series: &str, values: &DVector<f64>) -> Result<()> {
    let periods: Vec<String> = (1..=values.len()).map(|p| p.to_string()).collect();
    let header = vec!["period".to_string(), series.to_string()];
    let m = DMatrix::from_column_slice(values.len(), 1, values.as_slice());
    write_table(path, Some(&header), Some(&periods), &m)
}

pub fn read_risk(path: &Path) -> Result<(String, DVector<f64>)> {
    let t = read_table(path, true, true)?;
    let header = t.header.unwrap_or_default();
    if header.len() != 2 || header[0] != "period" || t.values.ncols() != 1 {
        return Err(FarsError::Format(format!("{}: not a risk table", path.display())));
    }
    Ok((header[1].clone(), t.values.column(0).into_owned()))
}
