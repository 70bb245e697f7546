//! Sampling uncertainty of the estimated factors and the confidence-ellipsoid
//! scenarios built from it.
//!
//! The per-period factor covariance combines the asymptotic sandwich
//! `(1/N) (P̂ᵀP̂/N)⁻¹ Γ̂_t (P̂ᵀP̂/N)⁻¹` with a cross-sectional subsampling
//! correction `(N*/(N S)) Σ_s (F̂*_t⁽ˢ⁾ − F̂_t)(F̂*_t⁽ˢ⁾ − F̂_t)ᵀ`. Scenario points
//! lie on the boundary `(F − F̂_t)ᵀ MSE*_t⁻¹ (F − F̂_t) = χ²_r(α)`.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::data::{BlockSpec, FactorStructure};
use crate::error::{FarsError, Result};
use crate::factors::{estimate_mldfm, InitMethod, MldfmResult};
use crate::linalg::{floor_eigenvalues, sorted_eigen, spd_inverse, sym_sqrt, symmetrize};

/// Default thresholding constant for [`gamma_fpr`].
pub const DEFAULT_DELTA: f64 = 2.0;
/// Eigenvalue floor applied to every MSE*_t.
pub const MSE_FLOOR: f64 = 1e-12;
/// Points on the 2-D confidence ellipse.
pub const ELLIPSE_POINTS: usize = 300;
/// Subdivisions per hypercube edge for meshes in more than two dimensions.
pub const MESH_PHI: usize = 8;
const MAX_MESH_POINTS: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    /// Cross-sectionally uncorrelated idiosyncratics, time-varying.
    #[default]
    Bn,
    /// Adaptive thresholding of residual covariances, constant over time.
    Fpr,
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaMode::Bn => f.write_str("bn"),
            GammaMode::Fpr => f.write_str("fpr"),
        }
    }
}

impl std::str::FromStr for GammaMode {
    type Err = FarsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(GammaMode::Bn),
            "fpr" => Ok(GammaMode::Fpr),
            other => Err(FarsError::Parameter(format!("unknown gamma mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaEstimate {
    pub value: DMatrix<f64>,
    pub mode: GammaMode,
    /// Zero-based period for BN estimates; `None` for the constant FPR estimate.
    pub time_index: Option<usize>,
}

fn check_shapes(loadings: &DMatrix<f64>, residuals: &DMatrix<f64>) -> Result<()> {
    if loadings.nrows() != residuals.ncols() {
        return Err(FarsError::Dimension(format!(
            "{} loading rows for {} residual columns",
            loadings.nrows(),
            residuals.ncols()
        )));
    }
    Ok(())
}

/// `(1/N) Σ_i p̂_i p̂_iᵀ ε̂²_it` at zero-based period `t`.
pub fn gamma_bn(loadings: &DMatrix<f64>, residuals: &DMatrix<f64>, t: usize) -> Result<GammaEstimate> {
    check_shapes(loadings, residuals)?;
    if t >= residuals.nrows() {
        return Err(FarsError::Dimension(format!(
            "period {t} out of range for {} periods",
            residuals.nrows()
        )));
    }
    let n = loadings.nrows();
    let weights = DVector::from_iterator(n, residuals.row(t).iter().map(|e| e * e));
    let weighted = DMatrix::from_fn(n, loadings.ncols(), |i, j| loadings[(i, j)] * weights[i]);
    let value = symmetrize(&(loadings.transpose() * weighted / n as f64));
    Ok(GammaEstimate {
        value,
        mode: GammaMode::Bn,
        time_index: Some(t),
    })
}

/// `ω_NT = 1/√N + √(ln N / T)`.
pub fn omega_nt(n: usize, t: usize) -> f64 {
    1.0 / (n as f64).sqrt() + ((n as f64).ln() / t as f64).sqrt()
}

/// Adaptive-thresholding estimate: residual covariances `σ̂_ij` are kept when
/// `|σ̂_ij| ≥ δ ω_NT √V̂_ij`; the diagonal is always kept.
pub fn gamma_fpr(loadings: &DMatrix<f64>, residuals: &DMatrix<f64>, delta: f64) -> Result<GammaEstimate> {
    check_shapes(loadings, residuals)?;
    if !(delta > 0.0) {
        return Err(FarsError::Parameter(format!("delta must be positive, got {delta}")));
    }
    let (t, n) = residuals.shape();
    if t < 2 {
        return Err(FarsError::Dimension("thresholding needs at least 2 periods".into()));
    }
    let tf = t as f64;
    let omega = omega_nt(n, t);
    let cols: Vec<Vec<f64>> = (0..n).map(|i| residuals.column(i).iter().copied().collect()).collect();

    let mut sigma = DMatrix::zeros(n, n);
    for i in 0..n {
        let ei = &cols[i];
        sigma[(i, i)] = ei.iter().map(|e| e * e).sum::<f64>() / tf;
        for j in i + 1..n {
            let ej = &cols[j];
            let s = ei.iter().zip(ej).map(|(a, b)| a * b).sum::<f64>() / tf;
            let v = ei
                .iter()
                .zip(ej)
                .map(|(a, b)| (a * b - s).powi(2))
                .sum::<f64>()
                / tf;
            if s.abs() >= delta * omega * v.sqrt() {
                sigma[(i, j)] = s;
                sigma[(j, i)] = s;
            }
        }
    }
    let value = symmetrize(&(loadings.transpose() * sigma * loadings / n as f64));
    Ok(GammaEstimate {
        value,
        mode: GammaMode::Fpr,
        time_index: None,
    })
}

/// Per-block variable selections for `n_samples` subsamples, each keeping
/// `⌊sample_size · N_k⌋` variables of block `k` (sorted ascending).
pub fn draw_subsamples(
    spec: &BlockSpec,
    n_samples: usize,
    sample_size: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(sample_size > 0.0 && sample_size <= 1.0) {
        return Err(FarsError::Parameter(format!(
            "sample_size must lie in (0, 1], got {sample_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = spec.sizes();
    let mut draws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut selected = Vec::new();
        for (k, &nk) in sizes.iter().enumerate() {
            let keep = subsample_block_size(nk, sample_size);
            let start = spec.range(k + 1).start;
            let mut idx: Vec<usize> = sample(&mut rng, nk, keep).into_iter().map(|i| start + i).collect();
            idx.sort_unstable();
            selected.extend(idx);
        }
        draws.push(selected);
    }
    Ok(draws)
}

fn subsample_block_size(nk: usize, sample_size: f64) -> usize {
    // Guard against 0.94 * 50 = 46.99999... style truncation.
    ((sample_size * nk as f64) + 1e-9).floor() as usize
}

/// Re-estimates the model on cross-sectional subsamples drawn within blocks.
/// Results are returned in draw order.
#[allow(clippy::too_many_arguments)]
pub fn subsample_estimates(
    x: &DMatrix<f64>,
    spec: &BlockSpec,
    structure: &FactorStructure,
    n_samples: usize,
    sample_size: f64,
    method: InitMethod,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<Vec<MldfmResult>> {
    spec.check_columns(x.ncols())?;
    if n_samples == 0 {
        return Err(FarsError::Parameter("n_samples must be at least 1".into()));
    }
    if !(sample_size > 0.0 && sample_size <= 1.0) {
        return Err(FarsError::Parameter(format!(
            "sample_size must lie in (0, 1], got {sample_size}"
        )));
    }
    let sub_sizes: Vec<usize> = spec
        .sizes()
        .iter()
        .map(|&nk| subsample_block_size(nk, sample_size))
        .collect();
    for (k, &m) in sub_sizes.iter().enumerate() {
        let needed = structure.factors_on_block(k + 1).max(1);
        if m < needed {
            return Err(FarsError::Parameter(format!(
                "subsamples keep {m} variables of block {} but {needed} factors load on it",
                k + 1
            )));
        }
    }
    let sub_spec = BlockSpec::from_sizes(&sub_sizes)?;
    let draws = draw_subsamples(spec, n_samples, sample_size, seed)?;
    draws
        .par_iter()
        .map(|cols| {
            let sub_x = x.select_columns(cols);
            estimate_mldfm(&sub_x, &sub_spec, structure, method, tol, max_iter)
        })
        .collect()
}

/// Subsample factors with each column negated when it is negatively
/// correlated with the corresponding full-sample factor.
pub fn align_factors(sub: &MldfmResult, full: &MldfmResult) -> Result<DMatrix<f64>> {
    align_factor_matrix(&sub.factors, &full.factors)
}

pub fn align_factor_matrix(sub: &DMatrix<f64>, full: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sub.shape() != full.shape() {
        return Err(FarsError::Dimension(format!(
            "subsample factors {:?} vs full-sample factors {:?}",
            sub.shape(),
            full.shape()
        )));
    }
    let mut out = sub.clone();
    for j in 0..sub.ncols() {
        let a = sub.column(j);
        let b = full.column(j);
        let ma = a.mean();
        let mb = b.mean();
        let va: f64 = a.iter().map(|v| (v - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
        if !(va > 0.0) || !(vb > 0.0) {
            return Err(FarsError::Degenerate(format!(
                "factor column {} has zero variance and cannot be aligned",
                j + 1
            )));
        }
        let cov: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum();
        if cov < 0.0 {
            out.column_mut(j).neg_mut();
        }
    }
    Ok(out)
}

/// Subsampling-corrected factor MSE for every period.
#[derive(Debug, Clone, PartialEq)]
pub struct MseSeries {
    pub per_t: Vec<DMatrix<f64>>,
    pub subsample_count: usize,
    pub subsample_dim: usize,
}

/// The asymptotic term `(1/N) (P̂ᵀP̂/N)⁻¹ Γ̂ (P̂ᵀP̂/N)⁻¹`.
pub fn asymptotic_mse(loadings: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = loadings.nrows() as f64;
    let sigma = loadings.transpose() * loadings / n;
    let inv = spd_inverse(&sigma)
        .ok_or_else(|| FarsError::Singular("P̂ᵀP̂ is singular".into()))?;
    Ok(symmetrize(&(&inv * gamma * &inv / n)))
}

pub fn corrected_mse(
    full: &MldfmResult,
    subs: &[MldfmResult],
    gamma_mode: GammaMode,
    delta: f64,
) -> Result<MseSeries> {
    if subs.is_empty() {
        return Err(FarsError::Parameter("at least one subsample is required".into()));
    }
    let n = full.variables();
    let t = full.periods();
    let r = full.factor_count();
    let n_star = subs[0].variables();
    if subs.iter().any(|s| s.variables() != n_star) {
        return Err(FarsError::Dimension("subsamples differ in cross-sectional size".into()));
    }
    let aligned = subs
        .iter()
        .map(|s| align_factors(s, full))
        .collect::<Result<Vec<_>>>()?;

    let constant_gamma = match gamma_mode {
        GammaMode::Fpr => Some(gamma_fpr(&full.loadings, &full.residuals, delta)?.value),
        GammaMode::Bn => None,
    };
    let scale = n_star as f64 / (n as f64 * subs.len() as f64);

    let mut per_t = Vec::with_capacity(t);
    for ti in 0..t {
        let gamma = match &constant_gamma {
            Some(g) => g.clone(),
            None => gamma_bn(&full.loadings, &full.residuals, ti)?.value,
        };
        let mut mse = asymptotic_mse(&full.loadings, &gamma)?;
        let mut correction = DMatrix::zeros(r, r);
        for sub in &aligned {
            let d = (sub.row(ti) - full.factors.row(ti)).transpose();
            correction += &d * d.transpose();
        }
        mse += correction * scale;
        per_t.push(floor_eigenvalues(&mse, MSE_FLOOR));
    }
    Ok(MseSeries {
        per_t,
        subsample_count: subs.len(),
        subsample_dim: n_star,
    })
}

fn chi2_cdf(df: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(df / 2.0, x / 2.0)
    }
}

fn chi2_pdf(df: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = df / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Inverse CDF of the χ² distribution with `df` degrees of freedom.
pub fn chi2_quantile(df: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FarsError::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if df == 0 {
        return Err(FarsError::Parameter("chi-square needs df ≥ 1".into()));
    }
    let k = df as f64;
    let mut lo = 0.0;
    let mut hi = k + 10.0 * (2.0 * k).sqrt() + 10.0;
    while chi2_cdf(k, hi) < alpha {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = chi2_cdf(k, x) - alpha;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let pdf = chi2_pdf(k, x);
        let newton = if pdf > 0.0 { x - f / pdf } else { f64::NAN };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Unit-sphere mesh obtained by projecting a regular grid on the surface of
/// `[−1, 1]^dim` (`phi` subdivisions per edge) radially onto the sphere.
pub fn hypersphere_mesh(dim: usize, phi: usize) -> Result<Vec<DVector<f64>>> {
    if dim == 0 || phi == 0 {
        return Err(FarsError::Parameter("mesh needs dim ≥ 1 and phi ≥ 1".into()));
    }
    let side = phi + 1;
    let total = (side as f64).powi(dim as i32);
    if total > MAX_MESH_POINTS as f64 * 4.0 {
        return Err(FarsError::Parameter(format!(
            "a {dim}-dimensional mesh with phi = {phi} is too large"
        )));
    }
    let total = side.pow(dim as u32);
    let mut seen = BTreeSet::new();
    let mut points = Vec::new();
    let mut digits = vec![0usize; dim];
    for _ in 0..total {
        if digits.iter().any(|&d| d == 0 || d == phi) {
            let v = DVector::from_iterator(dim, digits.iter().map(|&d| -1.0 + 2.0 * d as f64 / phi as f64));
            let u = &v / v.norm();
            let key: Vec<i64> = u.iter().map(|c| (c * 1e12).round() as i64).collect();
            if seen.insert(key) {
                points.push(u);
            }
        }
        for d in digits.iter_mut() {
            *d += 1;
            if *d < side {
                break;
            }
            *d = 0;
        }
    }
    if points.len() > MAX_MESH_POINTS {
        return Err(FarsError::Parameter(format!(
            "mesh has {} points, more than the supported {MAX_MESH_POINTS}",
            points.len()
        )));
    }
    Ok(points)
}

/// Unit directions used for an `r`-dimensional ellipsoid boundary.
pub fn unit_directions(r: usize) -> Result<Vec<DVector<f64>>> {
    match r {
        0 => Err(FarsError::Parameter("ellipsoid needs at least one dimension".into())),
        1 => Ok(vec![DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)]),
        2 => Ok((0..ELLIPSE_POINTS)
            .map(|j| {
                let theta = 2.0 * std::f64::consts::PI * j as f64 / ELLIPSE_POINTS as f64;
                DVector::from_vec(vec![theta.cos(), theta.sin()])
            })
            .collect()),
        _ => hypersphere_mesh(r, MESH_PHI),
    }
}

fn checked_root(mse: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, _) = sorted_eigen(mse);
    if !(values[values.len() - 1] > 0.0) {
        return Err(FarsError::Numeric("ellipsoid covariance is not positive definite".into()));
    }
    Ok(sym_sqrt(mse))
}

/// Boundary points (z×r) of the α-level confidence ellipsoid around `center`.
pub fn ellipsoid_points(center: &DVector<f64>, mse: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let r = center.len();
    if mse.shape() != (r, r) {
        return Err(FarsError::Dimension(format!(
            "covariance {:?} for a {r}-dimensional center",
            mse.shape()
        )));
    }
    let radius = chi2_quantile(r, alpha)?.sqrt();
    let dirs = unit_directions(r)?;
    Ok(map_directions(center, &checked_root(mse)?, radius, &dirs))
}

fn map_directions(
    center: &DVector<f64>,
    root: &DMatrix<f64>,
    radius: f64,
    dirs: &[DVector<f64>],
) -> DMatrix<f64> {
    let r = center.len();
    let mut out = DMatrix::zeros(dirs.len(), r);
    for (p, u) in dirs.iter().enumerate() {
        let point = center + root * u * radius;
        out.row_mut(p).copy_from(&point.transpose());
    }
    out
}

/// Per-period stressed factor sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// One z×r matrix of ellipsoid boundary points per period.
    pub per_t: Vec<DMatrix<f64>>,
    pub alpha: f64,
    pub chi2_value: f64,
    pub gamma_mode: GammaMode,
    pub delta: f64,
    pub subsample_count: usize,
    pub subsample_dim: usize,
}

impl Scenario {
    pub fn periods(&self) -> usize {
        self.per_t.len()
    }

    pub fn dimension(&self) -> usize {
        self.per_t.first().map_or(0, |m| m.ncols())
    }

    pub fn points_per_period(&self) -> usize {
        self.per_t.first().map_or(0, |m| m.nrows())
    }
}

pub fn create_scenario(
    full: &MldfmResult,
    subs: &[MldfmResult],
    alpha: f64,
    gamma_mode: GammaMode,
    delta: f64,
) -> Result<Scenario> {
    let chi2_value = chi2_quantile(full.factor_count(), alpha)?;
    let mse = corrected_mse(full, subs, gamma_mode, delta)?;
    let dirs = unit_directions(full.factor_count())?;
    let radius = chi2_value.sqrt();
    let per_t = mse
        .per_t
        .iter()
        .enumerate()
        .map(|(t, m)| {
            let center = full.factors.row(t).transpose();
            Ok(map_directions(&center, &checked_root(m)?, radius, &dirs))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scenario {
        per_t,
        alpha,
        chi2_value,
        gamma_mode,
        delta,
        subsample_count: mse.subsample_count,
        subsample_dim: mse.subsample_dim,
    })
}
