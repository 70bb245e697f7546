//! Factor-augmented quantile regression and stress optimization.
//!
//! For each level τ the forecast equation is
//! `q̂_τ(y_{t+h} | y_t, F_t) = μ(τ) + φ(τ) y_t + β(τ)ᵀ F_t`, fitted by minimizing
//! the check loss. Stressed forecasts replace `F_t` with the ellipsoid point
//! that minimizes (or maximizes) the `qtau` forecast.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{FarsError, Result};
use crate::linalg::{numerical_rank, ols, spd_inverse};
use crate::uncertainty::Scenario;

/// Default edge level of the fixed quantile set.
pub const DEFAULT_EDGE: f64 = 0.05;
/// Bandwidth inflations attempted when the kernel Hessian is singular.
pub const MAX_BANDWIDTH_INFLATIONS: usize = 3;
const LEVEL_MATCH_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Min,
    Max,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Min => f.write_str("min"),
            Direction::Max => f.write_str("max"),
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = FarsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(Direction::Min),
            "max" => Ok(Direction::Max),
            other => Err(FarsError::Parameter(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFit {
    pub tau: f64,
    /// Intercept, lag coefficient, then one coefficient per factor.
    pub coefficients: DVector<f64>,
    pub std_errors: DVector<f64>,
    pub p_values: DVector<f64>,
}

impl QuantileFit {
    /// Forecast at `(1, y, f)`.
    pub fn predict(&self, y: f64, f: impl IntoIterator<Item = f64>) -> f64 {
        let c = &self.coefficients;
        c[0] + c[1] * y + f.into_iter().zip(c.iter().skip(2)).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FarsResult {
    pub horizon: usize,
    pub levels: Vec<f64>,
    pub fits: Vec<QuantileFit>,
    /// (T−h+1)×5 fitted quantiles, one column per level.
    pub quantiles: DMatrix<f64>,
    pub stressed_quantiles: Option<DMatrix<f64>>,
    pub stressed_factors: Option<DMatrix<f64>>,
    pub qtau: Option<f64>,
    pub direction: Direction,
    /// Fit at `qtau` driving the stress; a separate regression when `qtau`
    /// is not one of the levels.
    pub qtau_fit: Option<QuantileFit>,
    /// Unstressed and stressed forecasts at `qtau`.
    pub qtau_quantiles: Option<DVector<f64>>,
    pub stressed_qtau_quantiles: Option<DVector<f64>>,
}

impl FarsResult {
    pub fn rows(&self) -> usize {
        self.quantiles.nrows()
    }
}

/// Levels `{edge, 0.25, 0.5, 0.75, 1 − edge}`.
pub fn quantile_levels(edge: f64) -> Result<Vec<f64>> {
    if !(edge > 0.0 && edge < 0.25) {
        return Err(FarsError::Parameter(format!("edge must lie in (0, 0.25), got {edge}")));
    }
    Ok(vec![edge, 0.25, 0.5, 0.75, 1.0 - edge])
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(FarsError::Parameter(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

/// `ρ_τ(u) = u (τ − 1{u < 0})`.
pub fn check_function(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

pub fn check_loss(y: &DVector<f64>, z: &DMatrix<f64>, beta: &DVector<f64>, tau: f64) -> f64 {
    (y - z * beta).iter().map(|&u| check_function(u, tau)).sum()
}

fn initial_basis(z: &DMatrix<f64>, order: &[usize]) -> Option<Vec<usize>> {
    let p = z.ncols();
    let mut basis = Vec::with_capacity(p);
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(p);
    for &i in order {
        let row = z.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for u in &q {
            let c = u.dot(&v);
            v -= u * c;
        }
        let vn = v.norm();
        if vn > 1e-8 * norm {
            q.push(v / vn);
            basis.push(i);
            if basis.len() == p {
                return Some(basis);
            }
        }
    }
    None
}

/// Exact minimizer of the check loss by descent along the edges of the
/// polyhedral objective: starting from a basic solution interpolating `p`
/// observations, every step swaps one basic observation for the nonbasic
/// one at which the line minimum is attained.
pub fn fit_quantile_regression(y: &DVector<f64>, z: &DMatrix<f64>, tau: f64) -> Result<DVector<f64>> {
    check_tau(tau)?;
    let (n, p) = z.shape();
    if y.len() != n {
        return Err(FarsError::Dimension(format!("{} responses for {n} design rows", y.len())));
    }
    if n <= p {
        return Err(FarsError::Dimension(format!("need more observations ({n}) than regressors ({p})")));
    }
    if y.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(FarsError::Numeric("non-finite value in quantile regression data".into()));
    }
    let scales: Vec<f64> = z.column_iter().map(|c| c.amax()).collect();
    if scales.contains(&0.0) {
        return Err(FarsError::Rank("quantile regression design has a zero column".into()));
    }
    let mut zs = z.clone();
    for (j, s) in scales.iter().enumerate() {
        zs.column_mut(j).unscale_mut(*s);
    }
    if numerical_rank(&zs) < p {
        return Err(FarsError::Rank("quantile regression design is rank deficient".into()));
    }
    let mut beta = descend(y, &zs, tau)?;
    for (j, s) in scales.iter().enumerate() {
        beta[j] /= s;
    }
    Ok(beta)
}

fn descend(y: &DVector<f64>, z: &DMatrix<f64>, tau: f64) -> Result<DVector<f64>> {
    let (n, p) = z.shape();
    let y_mat = DMatrix::from_column_slice(n, 1, y.as_slice());
    let ls = ols(&y_mat, z).ok_or_else(|| FarsError::Rank("design Gram matrix is singular".into()))?;
    let ls_res = &y_mat - z * ls;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ls_res[a].abs().total_cmp(&ls_res[b].abs()).then(a.cmp(&b)));
    let mut basis =
        initial_basis(z, &order).ok_or_else(|| FarsError::Rank("no full-rank basis of observations".into()))?;

    let y_scale = 1.0 + y.amax();
    let zero_tol = 1e-11 * y_scale;
    let max_iter = 50 * n + 1000;
    let mut in_basis = vec![false; n];

    for _ in 0..max_iter {
        in_basis.iter_mut().for_each(|b| *b = false);
        basis.iter().for_each(|&i| in_basis[i] = true);

        let zh = z.select_rows(&basis);
        let inv = zh
            .try_inverse()
            .ok_or_else(|| FarsError::Singular("basis matrix became singular".into()))?;
        let yh = DVector::from_iterator(p, basis.iter().map(|&i| y[i]));
        let beta = &inv * yh;
        let mut r = y - z * &beta;
        for &i in &basis {
            r[i] = 0.0;
        }
        let g = z * &inv;

        // Directional derivative along ±(column k of Z_h⁻¹).
        let mut best = (0.0, 0usize, 1.0f64);
        for k in 0..p {
            for sigma in [1.0, -1.0] {
                let mut deriv = if sigma > 0.0 { 1.0 - tau } else { tau };
                let mut mass = 1.0;
                for i in 0..n {
                    if in_basis[i] {
                        continue;
                    }
                    let gi = sigma * g[(i, k)];
                    mass += gi.abs();
                    deriv += if r[i] > zero_tol {
                        -tau * gi
                    } else if r[i] < -zero_tol {
                        (1.0 - tau) * gi
                    } else if gi < 0.0 {
                        -tau * gi
                    } else {
                        (1.0 - tau) * gi
                    };
                }
                let scaled = deriv / mass;
                if scaled < best.0 {
                    best = (scaled, k, sigma);
                }
            }
        }
        if best.0 >= -1e-12 {
            return Ok(beta);
        }
        let (_, k, sigma) = best;

        let mut slope = if sigma > 0.0 { 1.0 - tau } else { tau };
        let mut breaks = Vec::new();
        for i in 0..n {
            if in_basis[i] {
                continue;
            }
            let gi = sigma * g[(i, k)];
            slope += if r[i] > zero_tol {
                -tau * gi
            } else if r[i] < -zero_tol {
                (1.0 - tau) * gi
            } else if gi < 0.0 {
                -tau * gi
            } else {
                (1.0 - tau) * gi
            };
            if r[i].abs() > zero_tol && gi != 0.0 {
                let s = r[i] / gi;
                if s > 0.0 {
                    breaks.push((s, i, gi.abs()));
                }
            }
        }
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut entering = None;
        for &(_, i, w) in &breaks {
            slope += w;
            if slope >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        let i = entering.ok_or_else(|| FarsError::Numeric("check loss unbounded along an edge".into()))?;
        basis[k] = i;
    }
    Err(FarsError::Numeric(format!(
        "quantile regression did not terminate within {max_iter} pivots"
    )))
}

/// Sandwich standard errors together with the bandwidth actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichErrors {
    pub std_errors: DVector<f64>,
    pub p_values: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Bandwidth on the residual scale.
    pub bandwidth: f64,
    pub inflations: usize,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Hall–Sheather bandwidth on the probability scale, halved until
/// `τ ± b` stays inside (0, 1).
pub fn hall_sheather(n: usize, tau: f64) -> f64 {
    let norm = std_normal();
    let x = norm.inverse_cdf(tau);
    let f = norm.pdf(x);
    let z = norm.inverse_cdf(0.975);
    let mut b = (n as f64).powf(-1.0 / 3.0)
        * z.powf(2.0 / 3.0)
        * (1.5 * f * f / (2.0 * x * x + 1.0)).powf(1.0 / 3.0);
    while tau - b <= 0.0 || tau + b >= 1.0 {
        b /= 2.0;
    }
    b
}

fn type7_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Powell kernel sandwich `τ(1−τ) D⁻¹ (ZᵀZ/n) D⁻¹ / n`.
pub fn powell_std_errors(
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    beta: &DVector<f64>,
    tau: f64,
) -> Result<SandwichErrors> {
    check_tau(tau)?;
    let (n, p) = z.shape();
    if y.len() != n || beta.len() != p {
        return Err(FarsError::Dimension("sandwich inputs have inconsistent sizes".into()));
    }
    let norm = std_normal();
    let resid = y - z * beta;
    let scales: Vec<f64> = z.column_iter().map(|c| if c.amax() > 0.0 { c.amax() } else { 1.0 }).collect();
    let mut zs = z.clone();
    for (j, s) in scales.iter().enumerate() {
        zs.column_mut(j).unscale_mut(*s);
    }
    let z = &zs;
    let mean = resid.mean();
    let sd = (resid.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let mut sorted: Vec<f64> = resid.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let iqr = type7_quantile(&sorted, 0.75) - type7_quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let hb = hall_sheather(n, tau);
    let base = (norm.inverse_cdf(tau + hb) - norm.inverse_cdf(tau - hb)) * spread;

    let ztz = z.transpose() * z / n as f64;
    for inflations in 0..=MAX_BANDWIDTH_INFLATIONS {
        let b = base * 2f64.powi(inflations as i32);
        if !(b > 0.0) {
            continue;
        }
        let mut d = DMatrix::zeros(p, p);
        for (i, u) in resid.iter().enumerate() {
            let w = norm.pdf(u / b);
            if w > 0.0 {
                let row = z.row(i);
                d += row.transpose() * row * w;
            }
        }
        d /= n as f64 * b;
        if let Some(dinv) = spd_inverse(&d) {
            let mut cov = &dinv * &ztz * &dinv * (tau * (1.0 - tau) / n as f64);
            for i in 0..p {
                for j in 0..p {
                    cov[(i, j)] /= scales[i] * scales[j];
                }
            }
            let std_errors = cov.diagonal().map(|v| v.max(0.0).sqrt());
            let p_values = DVector::from_iterator(
                p,
                beta.iter().zip(std_errors.iter()).map(|(&c, &s)| {
                    if s > 0.0 {
                        (2.0 * (1.0 - norm.cdf((c / s).abs()))).clamp(0.0, 1.0)
                    } else if c == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }),
            );
            return Ok(SandwichErrors {
                std_errors,
                p_values,
                covariance: cov,
                bandwidth: b,
                inflations,
            });
        }
    }
    Err(FarsError::Singular(format!(
        "kernel Hessian singular after {MAX_BANDWIDTH_INFLATIONS} bandwidth inflations"
    )))
}

fn fit_level(y: &DVector<f64>, z: &DMatrix<f64>, tau: f64) -> Result<QuantileFit> {
    let beta = fit_quantile_regression(y, z, tau)?;
    let se = powell_std_errors(y, z, &beta, tau)?;
    Ok(QuantileFit {
        tau,
        coefficients: beta,
        std_errors: se.std_errors,
        p_values: se.p_values,
    })
}

/// Stressed factors and forecasts for every fit passed.
#[derive(Debug, Clone, PartialEq)]
pub struct StressOutcome {
    pub factors: DMatrix<f64>,
    /// One column per fit, in the order given.
    pub quantiles: DMatrix<f64>,
}

/// Picks, per period, the ellipsoid point minimizing (or maximizing) the
/// `qtau` forecast; ties resolve to the lowest point index.
pub fn stress_optimize(
    fits: &[QuantileFit],
    dep: &DVector<f64>,
    scenario: &Scenario,
    qtau: f64,
    direction: Direction,
    h: usize,
) -> Result<StressOutcome> {
    let target = fits
        .iter()
        .find(|f| (f.tau - qtau).abs() <= LEVEL_MATCH_TOL)
        .ok_or_else(|| FarsError::Parameter(format!("no fit at qtau = {qtau}")))?;
    let t = dep.len();
    if h == 0 || h >= t {
        return Err(FarsError::Parameter(format!("horizon {h} invalid for {t} periods")));
    }
    if scenario.periods() < t - h + 1 {
        return Err(FarsError::Dimension(format!(
            "scenario has {} periods, need {}",
            scenario.periods(),
            t - h + 1
        )));
    }
    let r = scenario.dimension();
    if target.coefficients.len() != r + 2 {
        return Err(FarsError::Dimension(format!(
            "fit has {} coefficients for {r} scenario factors",
            target.coefficients.len()
        )));
    }
    let rows = t - h + 1;
    let picks: Vec<usize> = (0..rows)
        .into_par_iter()
        .map(|ti| {
            let pts = &scenario.per_t[ti];
            if pts.nrows() == 0 {
                return Err(FarsError::Dimension(format!("empty scenario at period {}", ti + 1)));
            }
            let mut best = 0;
            let mut best_val = f64::NAN;
            for j in 0..pts.nrows() {
                let v = target.predict(dep[ti], pts.row(j).iter().copied());
                let better = match direction {
                    Direction::Min => v < best_val,
                    Direction::Max => v > best_val,
                };
                if j == 0 || better {
                    best = j;
                    best_val = v;
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;

    let mut factors = DMatrix::zeros(rows, r);
    let mut quantiles = DMatrix::zeros(rows, fits.len());
    for (ti, &j) in picks.iter().enumerate() {
        let point = scenario.per_t[ti].row(j);
        factors.row_mut(ti).copy_from(&point);
        for (c, fit) in fits.iter().enumerate() {
            quantiles[(ti, c)] = fit.predict(dep[ti], point.iter().copied());
        }
    }
    Ok(StressOutcome { factors, quantiles })
}

/// Fits the five-level forecast equation and, given a scenario, the stressed
/// quantiles.
pub fn compute_fars(
    dep: &DVector<f64>,
    factors: &DMatrix<f64>,
    h: usize,
    edge: f64,
    scenario: Option<&Scenario>,
    qtau: Option<f64>,
    direction: Direction,
) -> Result<FarsResult> {
    let levels = quantile_levels(edge)?;
    let (t, r) = factors.shape();
    if dep.len() != t {
        return Err(FarsError::Dimension(format!(
            "dependent variable has {} periods, factors have {t}",
            dep.len()
        )));
    }
    if h == 0 {
        return Err(FarsError::Parameter("horizon must be at least 1".into()));
    }
    if t <= r + 2 + h {
        return Err(FarsError::Dimension(format!(
            "{t} periods are too few for {r} factors at horizon {h}"
        )));
    }
    if let Some(q) = qtau {
        check_tau(q)?;
    }
    if scenario.is_some() && qtau.is_none() {
        return Err(FarsError::Parameter("a stressed run needs qtau".into()));
    }
    if let Some(s) = scenario {
        if s.periods() != t || s.dimension() != r {
            return Err(FarsError::Dimension(format!(
                "scenario is {}×{} for {t} periods and {r} factors",
                s.periods(),
                s.dimension()
            )));
        }
    }

    let n = t - h;
    let design_row = |ti: usize, out: &mut DMatrix<f64>, row: usize| {
        out[(row, 0)] = 1.0;
        out[(row, 1)] = dep[ti];
        for j in 0..r {
            out[(row, 2 + j)] = factors[(ti, j)];
        }
    };
    let mut z = DMatrix::zeros(n, r + 2);
    for ti in 0..n {
        design_row(ti, &mut z, ti);
    }
    let y = DVector::from_iterator(n, (h..t).map(|ti| dep[ti]));

    let fits = levels
        .par_iter()
        .map(|&tau| fit_level(&y, &z, tau))
        .collect::<Result<Vec<_>>>()?;

    let rows = t - h + 1;
    let mut zq = DMatrix::zeros(rows, r + 2);
    for ti in 0..rows {
        design_row(ti, &mut zq, ti);
    }
    let mut quantiles = DMatrix::zeros(rows, levels.len());
    for (c, fit) in fits.iter().enumerate() {
        quantiles.set_column(c, &(&zq * &fit.coefficients));
    }

    let qtau_fit = match qtau {
        Some(q) => Some(match fits.iter().find(|f| (f.tau - q).abs() <= LEVEL_MATCH_TOL) {
            Some(f) => f.clone(),
            None => fit_level(&y, &z, q)?,
        }),
        None => None,
    };
    let qtau_quantiles = qtau_fit.as_ref().map(|f| &zq * &f.coefficients);

    let mut result = FarsResult {
        horizon: h,
        levels,
        fits,
        quantiles,
        stressed_quantiles: None,
        stressed_factors: None,
        qtau,
        direction,
        qtau_fit,
        qtau_quantiles,
        stressed_qtau_quantiles: None,
    };

    if let (Some(scenario), Some(q), Some(qfit)) = (scenario, qtau, result.qtau_fit.clone()) {
        let mut all = result.fits.clone();
        all.push(qfit);
        let stressed = stress_optimize(&all, dep, scenario, q, direction, h)?;
        let k = result.levels.len();
        result.stressed_quantiles = Some(stressed.quantiles.columns(0, k).into_owned());
        result.stressed_qtau_quantiles = Some(stressed.quantiles.column(k).into_owned());
        result.stressed_factors = Some(stressed.factors);
    }
    Ok(result)
}
