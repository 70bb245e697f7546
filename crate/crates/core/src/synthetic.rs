//! Simulated panels with a known multi-level factor structure.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{build_pattern, BlockSpec, FactorStructure};
use crate::error::{FarsError, Result};

/// Draws from a known data-generating process.
#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub x: DMatrix<f64>,
    pub spec: BlockSpec,
    pub structure: FactorStructure,
    pub factors: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    /// True common component `F Pᵀ`.
    pub common: DMatrix<f64>,
    /// Target series driven by its own lag and the first factors.
    pub target: DVector<f64>,
}

impl SyntheticPanel {
    /// Writes a dated CSV with the target in column `target_name` followed
    /// by the panel variables `x1, x2, …`.
    pub fn write_csv(&self, path: &Path, target_name: &str) -> Result<()> {
        let io_err = |e: csv::Error| FarsError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let mut header = vec!["date".to_string(), target_name.to_string()];
        header.extend((1..=self.x.ncols()).map(|j| format!("x{j}")));
        w.write_record(&header).map_err(io_err)?;
        for i in 0..self.x.nrows() {
            let mut row = vec![format!("t{:04}", i + 1), self.target[i].to_string()];
            row.extend(self.x.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush().map_err(|e| FarsError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Standard normal draw by Box–Muller.
pub fn std_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One global factor, a middle-layer factor on the first and last block when
/// there are three or more blocks, and one block-specific factor per block.
/// Factors are AR(1) with coefficient 0.5; loadings and noise are Gaussian.
pub fn overlapping_dgp(t: usize, sizes: &[usize], noise_sd: f64, seed: u64) -> SyntheticPanel {
    let k = sizes.len();
    let middle = if k >= 3 { vec![(vec![1, k], 1)] } else { vec![] };
    let local = if k > 1 { vec![1; k] } else { vec![] };
    let structure = FactorStructure::hierarchical(k, 1, &middle, &local)
        .expect("valid synthetic structure");
    let spec = BlockSpec::from_sizes(sizes).expect("positive block sizes");
    simulate(t, spec, structure, noise_sd, seed)
}

/// Simulates from an arbitrary block layout and factor structure.
pub fn simulate(
    t: usize,
    spec: BlockSpec,
    structure: FactorStructure,
    noise_sd: f64,
    seed: u64,
) -> SyntheticPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = structure.total_factors();
    let n = spec.total();
    let pattern = build_pattern(&spec, &structure).expect("structure fits the blocks");

    let mut factors = DMatrix::zeros(t, r);
    for j in 0..r {
        let mut prev = std_normal(&mut rng);
        for i in 0..t {
            prev = 0.5 * prev + std_normal(&mut rng) * (0.75f64).sqrt();
            factors[(i, j)] = prev;
        }
    }
    let mut loadings = DMatrix::zeros(n, r);
    for i in 0..n {
        for j in 0..r {
            if pattern.is_allowed(i, j) {
                loadings[(i, j)] = std_normal(&mut rng);
            }
        }
    }
    let common = &factors * loadings.transpose();
    let noise = DMatrix::from_fn(t, n, |_, _| noise_sd * std_normal(&mut rng));
    let x = &common + noise;

    let mut target = DVector::zeros(t);
    target[0] = std_normal(&mut rng);
    for i in 1..t {
        let mut drive = 0.0;
        for j in 0..r.min(2) {
            drive += (0.8 - 0.5 * j as f64) * factors[(i - 1, j)];
        }
        target[i] = 0.3 * target[i - 1] + drive + 0.5 * std_normal(&mut rng);
    }

    SyntheticPanel {
        x,
        spec,
        structure,
        factors,
        loadings,
        common,
        target,
    }
}

/// `1 − ‖Ĉ − C‖² / ‖C‖²` between an estimated and a true common component.
pub fn trace_r2(estimated: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let err: f64 = (estimated - truth).iter().map(|v| v * v).sum();
    let total: f64 = truth.iter().map(|v| v * v).sum();
    1.0 - err / total
}
