//! Skew-t smoothing of the fitted quantiles.
//!
//! The density is `f(x) = (2/σ) t(z; ν) T(α z √((ν+1)/(ν+z²)); ν+1)` with
//! `z = (x − μ)/σ`, where `t` and `T` are the Student-t density and CDF. Its
//! parameters are chosen so that the implied quantiles match the five
//! forecast quantiles in least squares.

use nalgebra::{DMatrix, DVector};
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{FarsError, Result};

pub const SCALE_BOUNDS: (f64, f64) = (1e-4, 1e3);
pub const SHAPE_BOUNDS: (f64, f64) = (-40.0, 40.0);
pub const DOF_BOUNDS: (f64, f64) = (2.01, 200.0);
pub const DEFAULT_EST_POINTS: usize = 512;
pub const DEFAULT_RANDOM_SAMPLES: usize = 5000;
pub const DEFAULT_SUPPORT: (f64, f64) = (-10.0, 10.0);
pub const OPTIMIZATION_LABEL: &str = "levenberg-marquardt";
const MAX_FIT_ITER: usize = 500;
const REL_IMPROVEMENT_STOP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewTParams {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
    pub dof: f64,
}

impl SkewTParams {
    pub fn new(location: f64, scale: f64, shape: f64, dof: f64) -> Result<Self> {
        let p = SkewTParams {
            location,
            scale,
            shape,
            dof,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.location, self.scale, self.shape, self.dof].iter().all(|v| v.is_finite()) {
            return Err(FarsError::Parameter("skew-t parameters must be finite".into()));
        }
        if !(self.scale > 0.0) {
            return Err(FarsError::Parameter(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.dof > 0.0) {
            return Err(FarsError::Parameter(format!("dof must be positive, got {}", self.dof)));
        }
        Ok(())
    }
}

/// Student-t CDF through the regularized incomplete beta function.
pub fn student_t_cdf(x: f64, nu: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    if x.is_infinite() {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    if x * x < nu {
        let half = 0.5 * beta_reg(0.5, nu / 2.0, x * x / (nu + x * x));
        return if x > 0.0 { 0.5 + half } else { 0.5 - half };
    }
    let tail = 0.5 * beta_reg(nu / 2.0, 0.5, nu / (nu + x * x));
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Standardized skew-t (μ = 0, σ = 1) with cached constants.
#[derive(Debug, Clone, Copy)]
struct Standard {
    alpha: f64,
    nu: f64,
    log_norm: f64,
    /// Mass below zero.
    f0: f64,
}

impl Standard {
    fn new(alpha: f64, nu: f64) -> Self {
        let log_norm = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
        Standard {
            alpha,
            nu,
            log_norm,
            f0: 0.5 - alpha.atan() / std::f64::consts::PI,
        }
    }

    fn pdf(&self, z: f64) -> f64 {
        let q = 1.0 + z * z / self.nu;
        let t = (self.log_norm - 0.5 * (self.nu + 1.0) * q.ln()).exp();
        if self.alpha == 0.0 {
            return t;
        }
        let w = self.alpha * z * ((self.nu + 1.0) / (self.nu + z * z)).sqrt();
        2.0 * t * student_t_cdf(w, self.nu + 1.0)
    }

    fn integral(&self, a: f64, b: f64, tol: f64) -> Result<f64> {
        integrate(|z| self.pdf(z), a, b, tol)
    }

    fn cdf(&self, z: f64, tol: f64) -> Result<f64> {
        if z.is_infinite() {
            return Ok(if z > 0.0 { 1.0 } else { 0.0 });
        }
        if z <= 0.0 {
            self.tail(z, -1.0, tol)
        } else {
            Ok(1.0 - self.tail(z, 1.0, tol)?)
        }
    }

    /// Mass beyond `z` in direction `side`, through `u = z + side (1/s − 1)`
    /// on `s ∈ (0, 1]`; refined to relative accuracy when small.
    fn tail(&self, z: f64, side: f64, tol: f64) -> Result<f64> {
        let g = |s: f64| self.pdf(z + side * (1.0 / s - 1.0)) / (s * s);
        let first = integrate(g, 0.0, 1.0, tol)?;
        if first > 1e3 * tol || first <= 0.0 {
            return Ok(first.max(0.0));
        }
        integrate(g, 0.0, 1.0, (1e-9 * first).max(f64::MIN_POSITIVE))
    }
}

// Gauss–Kronrod 7/15 abscissae and weights on [−1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_94,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

const MAX_SUBINTERVALS: usize = 2000;

#[derive(Debug, Clone, Copy)]
struct Piece {
    lo: f64,
    hi: f64,
    val: f64,
    err: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.err.total_cmp(&other.err).is_eq()
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive Gauss–Kronrod quadrature: the piece with the largest
/// error estimate is bisected until the summed error falls below
/// `max(tol, 64 ε |I|)`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return integrate(f, b, a, tol).map(|v| -v);
    }
    let piece = |lo: f64, hi: f64| {
        let (val, err) = gk15(&f, lo, hi);
        Piece { lo, hi, val, err }
    };
    let first = piece(a, b);
    if !first.val.is_finite() || !first.err.is_finite() {
        return Err(FarsError::Numeric("non-finite integrand".into()));
    }
    let mut total = first.val;
    let mut error = first.err;
    let mut heap = std::collections::BinaryHeap::from([first]);
    while error > tol.max(64.0 * f64::EPSILON * total.abs()) {
        if heap.len() >= MAX_SUBINTERVALS {
            if error <= 1e-8 * total.abs().max(1e-300) || error <= 1e3 * tol {
                break;
            }
            return Err(FarsError::Numeric(format!(
                "quadrature on [{a}, {b}] stopped with error estimate {error:e}"
            )));
        }
        let worst = heap.pop().expect("non-empty heap");
        let mid = 0.5 * (worst.lo + worst.hi);
        if !(mid > worst.lo && mid < worst.hi) {
            heap.push(Piece { err: 0.0, ..worst });
            error -= worst.err;
            continue;
        }
        let left = piece(worst.lo, mid);
        let right = piece(mid, worst.hi);
        if !left.val.is_finite() || !right.val.is_finite() {
            return Err(FarsError::Numeric("non-finite integrand".into()));
        }
        total += left.val + right.val - worst.val;
        error += left.err + right.err - worst.err;
        heap.push(left);
        heap.push(right);
    }
    Ok(heap.iter().map(|p| p.val).sum())
}

pub fn skewt_pdf(x: f64, p: &SkewTParams) -> f64 {
    let z = (x - p.location) / p.scale;
    Standard::new(p.shape, p.dof).pdf(z) / p.scale
}

pub fn skewt_cdf(x: f64, p: &SkewTParams) -> Result<f64> {
    let z = (x - p.location) / p.scale;
    Ok(Standard::new(p.shape, p.dof).cdf(z, 1e-11)?.clamp(0.0, 1.0))
}

/// Newton iteration on the CDF inside a maintained bracket, integrating the
/// density between successive iterates.
struct Walker {
    dist: Standard,
    z: f64,
    f: f64,
    tol: f64,
}

impl Walker {
    fn new(dist: Standard) -> Self {
        Walker {
            z: 0.0,
            f: dist.f0,
            dist,
            tol: 1e-13,
        }
    }

    fn move_to(&mut self, z: f64) -> Result<()> {
        self.f += self.dist.integral(self.z, z, self.tol)?;
        self.z = z;
        Ok(())
    }

    fn solve(&mut self, p: f64) -> Result<f64> {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for _ in 0..400 {
            let gap = p - self.f;
            if gap == 0.0 {
                return Ok(self.z);
            }
            if gap > 0.0 {
                lo = self.z;
            } else {
                hi = self.z;
            }
            let dens = self.dist.pdf(self.z);
            let newton = self.z + gap / dens;
            let step_limit = 2.0 * (1.0 + self.z.abs());
            let mut next = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if gap > 0.0 {
                self.z + step_limit
            } else {
                self.z - step_limit
            };
            if (next - self.z).abs() > step_limit && !(lo.is_finite() && hi.is_finite()) {
                next = self.z + step_limit.copysign(next - self.z);
            }
            let dz = next - self.z;
            self.move_to(next)?;
            if dz.abs() <= 1e-12 * self.z.abs().max(1.0) || (lo.is_finite() && hi.is_finite() && hi - lo <= 1e-13 * self.z.abs().max(1.0)) {
                return Ok(self.z);
            }
        }
        Err(FarsError::Numeric(format!("skew-t quantile search for {p} did not converge")))
    }
}

fn check_probability(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(FarsError::Parameter(format!("probability must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

pub fn skewt_quantile(tau: f64, p: &SkewTParams) -> Result<f64> {
    check_probability(tau)?;
    let mut w = Walker::new(Standard::new(p.shape, p.dof));
    Ok(p.location + p.scale * w.solve(tau)?)
}

/// Standardized quantiles at increasing `levels`, walking outward from zero.
fn standard_quantiles(alpha: f64, nu: f64, levels: &[f64]) -> Result<Vec<f64>> {
    let dist = Standard::new(alpha, nu);
    let mut out = vec![0.0; levels.len()];
    let split = levels.iter().position(|&l| l >= dist.f0).unwrap_or(levels.len());
    let mut up = Walker::new(dist);
    for j in split..levels.len() {
        out[j] = up.solve(levels[j])?;
    }
    let mut down = Walker::new(dist);
    for j in (0..split).rev() {
        out[j] = down.solve(levels[j])?;
    }
    Ok(out)
}

/// Outcome of a quantile-matching fit, with the objective after every
/// accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewTFit {
    pub params: SkewTParams,
    pub loss: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
}

struct Profiled {
    loss: f64,
    location: f64,
    scale: f64,
    residuals: [f64; 5],
}

fn profile(q: &[f64; 5], levels: &[f64; 5], alpha: f64, nu: f64) -> Result<Profiled> {
    let s = standard_quantiles(alpha, nu, levels)?;
    let ms = s.iter().sum::<f64>() / 5.0;
    let mq = q.iter().sum::<f64>() / 5.0;
    let sxx: f64 = s.iter().map(|v| (v - ms).powi(2)).sum();
    let sxy: f64 = s.iter().zip(q).map(|(a, b)| (a - ms) * (b - mq)).sum();
    let scale = if sxx > 0.0 { sxy / sxx } else { SCALE_BOUNDS.0 };
    let scale = scale.clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1);
    let location = mq - scale * ms;
    let mut residuals = [0.0; 5];
    for j in 0..5 {
        residuals[j] = q[j] - location - scale * s[j];
    }
    Ok(Profiled {
        loss: residuals.iter().map(|r| r * r).sum(),
        location,
        scale,
        residuals,
    })
}

fn full_loss(q: &[f64; 5], levels: &[f64; 5], p: &SkewTParams) -> Result<f64> {
    let s = standard_quantiles(p.shape, p.dof, levels)?;
    Ok((0..5).map(|j| (q[j] - p.location - p.scale * s[j]).powi(2)).sum())
}

fn check_levels(levels: &[f64]) -> Result<[f64; 5]> {
    let arr: [f64; 5] = levels
        .try_into()
        .map_err(|_| FarsError::Parameter(format!("expected 5 levels, got {}", levels.len())))?;
    if arr.iter().any(|&l| !(l > 0.0 && l < 1.0)) || arr.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FarsError::Parameter("levels must be strictly increasing in (0, 1)".into()));
    }
    Ok(arr)
}

/// Least-squares quantile matching over (μ, σ, α, ν) within the bounds.
/// μ and σ are profiled out; (α, log ν) follow a bounded
/// Levenberg–Marquardt descent that only accepts improving steps.
pub fn fit_skewt_traced(quantile_values: &[f64], levels: &[f64]) -> Result<SkewTFit> {
    let levels = check_levels(levels)?;
    let mut q: [f64; 5] = quantile_values
        .try_into()
        .map_err(|_| FarsError::Parameter(format!("expected 5 quantiles, got {}", quantile_values.len())))?;
    if q.iter().any(|v| !v.is_finite()) {
        return Err(FarsError::Parameter("quantile values must be finite".into()));
    }
    q.sort_by(f64::total_cmp);
    let width = q[4] - q[0];
    if !(width > 1e-12 * (1.0 + q[2].abs())) {
        return Err(FarsError::Degenerate(format!(
            "all quantiles equal {}; the distribution has zero width",
            q[2]
        )));
    }

    let skew = ((q[4] - q[2]) - (q[2] - q[0])) / width.max(1e-8);
    let alpha0 = (skew * 10.0).clamp(-5.0, 5.0);
    let nu0 = 5.0;
    let sigma0 = ((q[3] - q[1]) / 1.349).clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1);
    let start = SkewTParams {
        location: q[2],
        scale: sigma0,
        shape: alpha0,
        dof: nu0,
    };
    let mut trace = vec![full_loss(&q, &levels, &start)?];

    let (eta_lo, eta_hi) = (DOF_BOUNDS.0.ln(), DOF_BOUNDS.1.ln());
    let clamp = |th: [f64; 2]| {
        [
            th[0].clamp(SHAPE_BOUNDS.0, SHAPE_BOUNDS.1),
            th[1].clamp(eta_lo, eta_hi),
        ]
    };
    let eval = |th: [f64; 2]| profile(&q, &levels, th[0], th[1].exp());

    let mut theta = [alpha0, nu0.ln()];
    let mut cur = eval(theta)?;
    if cur.loss <= trace[0] {
        trace.push(cur.loss);
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let scale2 = width * width;

    while iterations < MAX_FIT_ITER && cur.loss > 1e-28 * scale2 {
        iterations += 1;
        // Forward-difference Jacobian of the profiled residuals.
        let mut jac = [[0.0; 2]; 5];
        for k in 0..2 {
            let h = 1e-7 * theta[k].abs().max(1.0);
            let mut th = theta;
            let mut step = h;
            th[k] += h;
            let bound_hi = if k == 0 { SHAPE_BOUNDS.1 } else { eta_hi };
            if th[k] > bound_hi {
                th[k] = theta[k] - h;
                step = -h;
            }
            let shifted = eval(th)?;
            for j in 0..5 {
                jac[j][k] = (shifted.residuals[j] - cur.residuals[j]) / step;
            }
        }
        let mut jtj = [[0.0; 2]; 2];
        let mut jte = [0.0; 2];
        for j in 0..5 {
            for a in 0..2 {
                jte[a] += jac[j][a] * cur.residuals[j];
                for b in 0..2 {
                    jtj[a][b] += jac[j][a] * jac[j][b];
                }
            }
        }

        // Parameters held at a bound the descent direction points beyond.
        let lower = [SHAPE_BOUNDS.0, eta_lo];
        let upper = [SHAPE_BOUNDS.1, eta_hi];
        let active: Vec<bool> = (0..2)
            .map(|k| (theta[k] >= upper[k] && jte[k] < 0.0) || (theta[k] <= lower[k] && jte[k] > 0.0))
            .collect();
        if active.iter().all(|&a| a) {
            break;
        }

        let mut accepted = false;
        while lambda < 1e16 {
            let (d0, d1) = if active[0] {
                (0.0, -jte[1] / (jtj[1][1] * (1.0 + lambda) + 1e-300))
            } else if active[1] {
                (-jte[0] / (jtj[0][0] * (1.0 + lambda) + 1e-300), 0.0)
            } else {
                let a00 = jtj[0][0] * (1.0 + lambda) + 1e-300;
                let a11 = jtj[1][1] * (1.0 + lambda) + 1e-300;
                let a01 = jtj[0][1];
                let det = a00 * a11 - a01 * a01;
                (-(a11 * jte[0] - a01 * jte[1]) / det, -(a00 * jte[1] - a01 * jte[0]) / det)
            };
            let trial_theta = clamp([theta[0] + d0, theta[1] + d1]);
            if trial_theta == theta || !d0.is_finite() || !d1.is_finite() {
                lambda *= 4.0;
                continue;
            }
            let trial = eval(trial_theta)?;
            if trial.loss < cur.loss {
                let rel = (cur.loss - trial.loss) / cur.loss.max(1e-300);
                theta = trial_theta;
                cur = trial;
                trace.push(cur.loss);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < REL_IMPROVEMENT_STOP {
                    lambda = f64::INFINITY;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted || !lambda.is_finite() {
            break;
        }
    }

    let params = SkewTParams {
        location: cur.location,
        scale: cur.scale,
        shape: theta[0],
        dof: theta[1].exp().clamp(DOF_BOUNDS.0, DOF_BOUNDS.1),
    };
    if trace.last().copied() != Some(cur.loss) {
        trace.push(cur.loss);
    }
    Ok(SkewTFit {
        params,
        loss: cur.loss,
        trace,
        iterations,
    })
}

pub fn fit_skewt(quantile_values: &[f64], levels: &[f64]) -> Result<(SkewTParams, f64)> {
    let fit = fit_skewt_traced(quantile_values, levels)?;
    Ok((fit.params, fit.loss))
}

/// Draws `n` skew-t variates by inverting the CDF at uniforms from `rng`.
/// Draw order follows the uniform stream.
pub fn sample_skewt(p: &SkewTParams, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let uniforms: Vec<f64> = (0..n).map(|_| rng.sample(Open01)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uniforms[a].total_cmp(&uniforms[b]));
    let dist = Standard::new(p.shape, p.dof);
    let mut walker = Walker::new(dist);
    let mut out = vec![0.0; n];
    for &i in &order {
        out[i] = p.location + p.scale * walker.solve(uniforms[i])?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityResult {
    pub grid: Vec<f64>,
    /// Rows are periods, columns grid points.
    pub densities: DMatrix<f64>,
    /// Rows are periods, columns draws.
    pub samples: DMatrix<f64>,
    /// `None` for rows whose quantiles were degenerate.
    pub params: Vec<Option<SkewTParams>>,
    pub fit_loss: Vec<f64>,
    pub optimization: String,
    pub seed: u64,
    pub support: (f64, f64),
    pub errors: Vec<RowError>,
}

impl DensityResult {
    pub fn rows(&self) -> usize {
        self.densities.nrows()
    }
}

struct RowOutput {
    density: Vec<f64>,
    samples: Vec<f64>,
    params: Option<SkewTParams>,
    loss: f64,
    error: Option<String>,
}

/// Fits a skew-t to every row of `quantiles`, tabulates its density on a
/// uniform grid over `support` and draws `random_samples` variates seeded by
/// `seed + row`.
pub fn compute_density(
    quantiles: &DMatrix<f64>,
    levels: &[f64],
    est_points: usize,
    random_samples: usize,
    support: (f64, f64),
    seed: u64,
) -> Result<DensityResult> {
    check_levels(levels)?;
    if quantiles.ncols() != 5 {
        return Err(FarsError::Dimension(format!(
            "quantile matrix has {} columns, expected 5",
            quantiles.ncols()
        )));
    }
    if !(support.0 < support.1) || !support.0.is_finite() || !support.1.is_finite() {
        return Err(FarsError::Parameter(format!(
            "support must satisfy lo < hi, got ({}, {})",
            support.0, support.1
        )));
    }
    if est_points < 2 {
        return Err(FarsError::Parameter("est_points must be at least 2".into()));
    }
    if random_samples == 0 {
        return Err(FarsError::Parameter("random_samples must be at least 1".into()));
    }
    if let Some((i, _)) = quantiles.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(FarsError::Parameter(format!(
            "non-finite quantile in row {}",
            i % quantiles.nrows() + 1
        )));
    }
    let (lo, hi) = support;
    let step = (hi - lo) / (est_points - 1) as f64;
    let grid: Vec<f64> = (0..est_points)
        .map(|i| if i + 1 == est_points { hi } else { lo + step * i as f64 })
        .collect();

    let rows: Vec<RowOutput> = (0..quantiles.nrows())
        .into_par_iter()
        .map(|m| {
            let q: Vec<f64> = quantiles.row(m).iter().copied().collect();
            match fit_skewt(&q, levels) {
                Ok((params, loss)) => {
                    let density = grid.iter().map(|&x| skewt_pdf(x, &params)).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(m as u64));
                    let samples = sample_skewt(&params, random_samples, &mut rng)?;
                    Ok(RowOutput {
                        density,
                        samples,
                        params: Some(params),
                        loss,
                        error: None,
                    })
                }
                Err(FarsError::Degenerate(msg)) => Ok(RowOutput {
                    density: vec![0.0; est_points],
                    samples: vec![q[2]; random_samples],
                    params: None,
                    loss: 0.0,
                    error: Some(msg),
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let m = rows.len();
    let mut densities = DMatrix::zeros(m, est_points);
    let mut samples = DMatrix::zeros(m, random_samples);
    let mut params = Vec::with_capacity(m);
    let mut fit_loss = Vec::with_capacity(m);
    let mut errors = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.density.iter().enumerate() {
            densities[(i, j)] = *v;
        }
        for (j, v) in row.samples.iter().enumerate() {
            samples[(i, j)] = *v;
        }
        params.push(row.params);
        fit_loss.push(row.loss);
        if let Some(message) = row.error {
            errors.push(RowError { row: i, message });
        }
    }
    Ok(DensityResult {
        grid,
        densities,
        samples,
        params,
        fit_loss,
        optimization: OPTIMIZATION_LABEL.to_string(),
        seed,
        support,
        errors,
    })
}

/// Linear-interpolation sample quantile: position `(n − 1) q` in the sorted
/// sample.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(FarsError::Dimension("empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(FarsError::Parameter(format!("probability must lie in [0, 1], got {q}")));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (s.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    Ok(s[lo] + (pos - lo as f64) * (s[hi] - s[lo]))
}

/// Per-row `qtau` quantile of the drawn samples.
pub fn quantile_risk(density: &DensityResult, qtau: f64) -> Result<DVector<f64>> {
    check_probability(qtau)?;
    if density.samples.ncols() == 0 {
        return Err(FarsError::Dimension("density result holds no samples".into()));
    }
    let mut out = DVector::zeros(density.samples.nrows());
    for i in 0..density.samples.nrows() {
        let row: Vec<f64> = density.samples.row(i).iter().copied().collect();
        out[i] = empirical_quantile(&row, qtau)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

    fn params(mu: f64, sigma: f64, alpha: f64, nu: f64) -> SkewTParams {
        SkewTParams::new(mu, sigma, alpha, nu).unwrap()
    }

    // Student-t density straight from gamma functions.
    fn t_density(x: f64, nu: f64) -> f64 {
        use statrs::function::gamma::gamma;
        gamma((nu + 1.0) / 2.0) / ((nu * std::f64::consts::PI).sqrt() * gamma(nu / 2.0))
            * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0)
    }

    // Student-t CDF by Simpson integration of the density from zero.
    fn t_cdf_oracle(x: f64, nu: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let mut s = t_density(0.0, nu) + t_density(x, nu);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * t_density(i as f64 * h, nu);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn symmetric_density_at_zero() {
        assert!((skewt_pdf(0.0, &params(0.0, 1.0, 0.0, 5.0)) - 0.37961).abs() < 1e-4);
        let p = params(0.3, 1.7, 0.0, 4.0);
        for d in [0.1, 0.9, 2.5, 7.0] {
            assert!((skewt_pdf(0.3 + d, &p) - skewt_pdf(0.3 - d, &p)).abs() < 1e-12);
        }
    }

    #[test]
    fn density_matches_independent_formula() {
        let p = params(1.0, 2.0, 3.0, 6.0);
        for x in [-3.0, -1.0, 0.0, 0.5, 1.0, 2.5, 6.0] {
            let z = (x - 1.0) / 2.0;
            let w = 3.0 * z * (7.0 / (6.0 + z * z) as f64).sqrt();
            let oracle = 2.0 / 2.0 * t_density(z, 6.0) * t_cdf_oracle(w, 7.0);
            assert!((skewt_pdf(x, &p) - oracle).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn shape_zero_is_scaled_student() {
        let p = params(-0.5, 0.8, 0.0, 3.5);
        for i in 0..50 {
            let x = -6.0 + 0.25 * i as f64;
            let expect = t_density((x + 0.5) / 0.8, 3.5) / 0.8;
            assert!((skewt_pdf(x, &p) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn cdf_reference_points() {
        let sym = params(0.7, 1.3, 0.0, 5.0);
        assert!((skewt_cdf(0.7, &sym).unwrap() - 0.5).abs() < 1e-8);
        let p = params(0.5, 1.5, -2.0, 4.0);
        assert!(skewt_cdf(0.5 + 50.0 * 1.5, &p).unwrap() >= 1.0 - 1e-6);
        // Midpoint rule with 10⁶ panels from far in the lower tail.
        let x = 0.5 + 1.5;
        let lo = 0.5 - 1.5 * 20.0;
        let n = 1_000_000;
        let h = (x - lo) / n as f64;
        let dist = Standard::new(-2.0, 4.0);
        let mut s = 0.0;
        for i in 0..n {
            s += skewt_pdf(lo + (i as f64 + 0.5) * h, &p);
        }
        s *= h;
        let tail = dist.cdf(-20.0, 1e-13).unwrap();
        assert!((skewt_cdf(x, &p).unwrap() - (s + tail)).abs() < 1e-7);
    }

    #[test]
    fn mass_below_location_matches_closed_form() {
        for alpha in [-7.0, -1.0, 0.0, 0.4, 3.0] {
            let dist = Standard::new(alpha, 6.0);
            let lower = integrate(|z| dist.pdf(z), -1e4, 0.0, 1e-13).unwrap();
            assert!((lower - dist.f0).abs() < 1e-6, "alpha {alpha}");
        }
    }

    #[test]
    fn quantile_reference_points() {
        let sym = params(0.0, 1.0, 0.0, 10.0);
        assert!(skewt_quantile(0.5, &sym).unwrap().abs() < 1e-8);
        assert!((skewt_quantile(0.95, &sym).unwrap() - 1.8125).abs() < 1e-3);
        let p = params(-1.0, 2.0, 4.0, 3.0);
        let x = skewt_quantile(0.05, &p).unwrap();
        assert!((skewt_cdf(x, &p).unwrap() - 0.05).abs() < 1e-7);
        assert!(skewt_quantile(1.0, &p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn cdf_and_quantile_monotone(alpha in -10.0f64..10.0, nu in 2.01f64..60.0) {
            let p = params(0.0, 1.0, alpha, nu);
            let mut prev = -1.0;
            for i in 0..60 {
                let c = skewt_cdf(-8.0 + 0.27 * i as f64, &p).unwrap();
                prop_assert!(c >= prev);
                prev = c;
            }
            let mut last = f64::NEG_INFINITY;
            for k in 1..100 {
                let q = skewt_quantile(k as f64 / 100.0, &p).unwrap();
                prop_assert!(q > last);
                last = q;
            }
        }
    }

    fn implied(p: &SkewTParams) -> Vec<f64> {
        LEVELS.iter().map(|&l| skewt_quantile(l, p).unwrap()).collect()
    }

    #[test]
    fn round_trip_known_params() {
        let truth = params(0.0, 1.0, 2.0, 8.0);
        let q = implied(&truth);
        let fit = fit_skewt_traced(&q, &LEVELS).unwrap();
        assert!(fit.loss <= 1e-8, "loss {}", fit.loss);
        for (a, b) in implied(&fit.params).iter().zip(&q) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gaussian_inputs_give_near_symmetric_fit() {
        let (p, _) = fit_skewt(&[-1.96, -0.674, 0.0, 0.674, 1.96], &LEVELS).unwrap();
        assert!(p.shape.abs() <= 0.2, "shape {}", p.shape);
        assert!(p.location.abs() <= 0.05);
    }

    #[test]
    fn location_equivariant_fit() {
        let q = [-2.3, -0.9, -0.1, 0.5, 1.4];
        let shifted: Vec<f64> = q.iter().map(|v| v + 2.5).collect();
        let (a, _) = fit_skewt(&q, &LEVELS).unwrap();
        let (b, _) = fit_skewt(&shifted, &LEVELS).unwrap();
        assert!((b.location - a.location - 2.5).abs() < 1e-4);
        assert!((b.scale - a.scale).abs() < 1e-4);
        assert!((b.shape - a.shape).abs() < 1e-4);
        assert!((b.dof - a.dof).abs() < 1e-4);
    }

    #[test]
    fn crossing_inputs_are_sorted_and_equal_inputs_rejected() {
        let (a, la) = fit_skewt(&[-1.0, 0.2, 0.0, 0.6, 1.5], &LEVELS).unwrap();
        let (b, lb) = fit_skewt(&[-1.0, 0.0, 0.2, 0.6, 1.5], &LEVELS).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(matches!(fit_skewt(&[0.3; 5], &LEVELS), Err(FarsError::Degenerate(_))));
        assert!(fit_skewt(&[0.0, 1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.2, 0.3, 0.4]).is_err());
    }

    #[test]
    fn fit_stays_in_bounds() {
        let (p, _) = fit_skewt(&[-9.0, -1.0, 0.0, 0.05, 0.1], &LEVELS).unwrap();
        assert!((SHAPE_BOUNDS.0..=SHAPE_BOUNDS.1).contains(&p.shape));
        assert!((DOF_BOUNDS.0..=DOF_BOUNDS.1).contains(&p.dof));
        assert!((SCALE_BOUNDS.0..=SCALE_BOUNDS.1).contains(&p.scale));
    }

    #[test]
    fn risk_interpolation_rule() {
        let mut d = DensityResult {
            grid: vec![0.0, 1.0],
            densities: DMatrix::zeros(1, 2),
            samples: DMatrix::from_row_slice(1, 5, &[5.0, 1.0, 3.0, 2.0, 4.0]),
            params: vec![None],
            fit_loss: vec![0.0],
            optimization: OPTIMIZATION_LABEL.into(),
            seed: 0,
            support: (0.0, 1.0),
            errors: vec![],
        };
        assert_eq!(quantile_risk(&d, 0.5).unwrap()[0], 3.0);
        d.samples = DMatrix::from_row_slice(1, 2, &[20.0, 10.0]);
        assert_eq!(quantile_risk(&d, 0.25).unwrap()[0], 12.5);
        d.samples = DMatrix::zeros(1, 0);
        assert!(quantile_risk(&d, 0.5).is_err());
    }

    #[test]
    fn density_grid_mass_and_determinism() {
        let truth = params(0.5, 1.2, -1.5, 6.0);
        let q = DMatrix::from_row_slice(1, 5, &implied(&truth));
        let a = compute_density(&q, &LEVELS, 512, 2000, (-10.0, 10.0), 9).unwrap();
        let g = &a.grid;
        assert_eq!(g.len(), 512);
        assert_eq!((g[0], g[511]), (-10.0, 10.0));
        let mass: f64 = (1..512)
            .map(|i| 0.5 * (g[i] - g[i - 1]) * (a.densities[(0, i)] + a.densities[(0, i - 1)]))
            .sum();
        assert!(mass >= 0.99 && mass <= 1.0001, "mass {mass}");
        let b = compute_density(&q, &LEVELS, 512, 2000, (-10.0, 10.0), 9).unwrap();
        assert_eq!(a, b);
        let c = compute_density(&q, &LEVELS, 512, 2000, (-10.0, 10.0), 10).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn degenerate_rows_are_flagged() {
        let q = DMatrix::from_row_slice(2, 5, &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -0.4, 0.0, 0.5, 1.1]);
        let d = compute_density(&q, &LEVELS, 16, 50, (-5.0, 5.0), 1).unwrap();
        assert_eq!(d.errors.len(), 1);
        assert_eq!(d.errors[0].row, 0);
        assert!(d.densities.row(0).iter().all(|&v| v == 0.0));
        assert!(d.params[0].is_none() && d.params[1].is_some());
        assert!(compute_density(&q, &LEVELS, 16, 50, (5.0, -5.0), 1).is_err());
    }

    #[test]
    fn sampled_quantile_within_binomial_band() {
        let p = params(-0.3, 1.1, 2.5, 5.0);
        let q = DMatrix::from_row_slice(1, 5, &implied(&p));
        let d = compute_density(&q, &LEVELS, 64, 5000, (-10.0, 10.0), 4).unwrap();
        let fitted = d.params[0].unwrap();
        let emp = quantile_risk(&d, 0.05).unwrap()[0];
        let exact = skewt_quantile(0.05, &fitted).unwrap();
        let dens = skewt_pdf(exact, &fitted);
        let se = (0.05f64 * 0.95 / 5000.0).sqrt() / dens;
        assert!((emp - exact).abs() <= 3.0 * se);
    }
}
