//! Principal-components DFM and the multi-level DFM estimated by sequential
//! least squares.
//!
//! The multi-level estimator alternates two exact least-squares steps on the
//! residual sum of squares `‖X − F Pᵀ‖²`: factors given loadings, then
//! loadings given factors under the block zero-pattern. Starting values come
//! from a top-down pass over the node hierarchy, and the converged fit is
//! rotated so that levels are mutually orthogonal and every node's factors
//! are the principal components of its own common component.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{build_pattern, BlockSpec, FactorStructure, LoadingPattern};
use crate::error::{FarsError, Result};
use crate::linalg::{
    frobenius_sq, leading_left_subspace, residualize, sorted_eigen, spd_solve, RANK_TOL,
};

/// Default convergence tolerance on the relative RSS change.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Default cap on alternation rounds.
pub const DEFAULT_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InitMethod {
    /// Generalized canonical correlation across the blocks of each node.
    #[default]
    Cca,
    /// Principal components of the pooled block columns.
    Pca,
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitMethod::Cca => f.write_str("CCA"),
            InitMethod::Pca => f.write_str("PCA"),
        }
    }
}

impl std::str::FromStr for InitMethod {
    type Err = FarsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cca" => Ok(InitMethod::Cca),
            "pca" | "pc" => Ok(InitMethod::Pca),
            other => Err(FarsError::Parameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Factors, loadings and residuals of a one-shot factor fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    pub factors: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub residuals: DMatrix<f64>,
}

/// Output of [`estimate_mldfm`].
#[derive(Debug, Clone, PartialEq)]
pub struct MldfmResult {
    pub factors: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub residuals: DMatrix<f64>,
    pub method: InitMethod,
    pub iterations: usize,
    /// RSS after initialization followed by the RSS of every alternation round.
    pub rss_trace: Vec<f64>,
    pub converged: bool,
    pub structure: FactorStructure,
    pub blocks: BlockSpec,
}

impl MldfmResult {
    pub fn periods(&self) -> usize {
        self.factors.nrows()
    }

    pub fn variables(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.ncols()
    }

    pub fn rss(&self) -> f64 {
        frobenius_sq(&self.residuals)
    }

    pub fn common_component(&self) -> DMatrix<f64> {
        &self.factors * self.loadings.transpose()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.structure.column_names(self.blocks.block_count())
    }
}

/// Flips factor/loading column pairs so every loading column has a
/// nonnegative sum.
fn apply_sign_convention(factors: &mut DMatrix<f64>, loadings: &mut DMatrix<f64>) {
    for j in 0..factors.ncols() {
        if loadings.column(j).sum() < 0.0 {
            factors.column_mut(j).neg_mut();
            loadings.column_mut(j).neg_mut();
        }
    }
}

/// Principal-components estimate: `F = √T ×` the top-`r` eigenvectors of
/// `X Xᵀ`, `P = Xᵀ F / T`.
pub fn pc_estimate(x: &DMatrix<f64>, r: usize) -> Result<FactorEstimate> {
    let (t, n) = x.shape();
    if r == 0 || r > t.min(n) {
        return Err(FarsError::Dimension(format!(
            "cannot extract {r} principal components from a {t}×{n} panel"
        )));
    }
    let (values, vectors) = sorted_eigen(&(x * x.transpose()));
    if !(values[0] > 0.0) || !(values[r - 1] > RANK_TOL * values[0]) {
        return Err(FarsError::Rank(format!(
            "requested {r} factors but X Xᵀ has fewer nonzero eigenvalues"
        )));
    }
    let tf = t as f64;
    let mut factors = vectors.columns(0, r) * tf.sqrt();
    let mut loadings = x.transpose() * &factors / tf;
    apply_sign_convention(&mut factors, &mut loadings);
    let residuals = x - &factors * loadings.transpose();
    Ok(FactorEstimate {
        factors,
        loadings,
        residuals,
    })
}

/// Residual sum of squares `‖X − F Pᵀ‖²_F`.
pub fn rss(x: &DMatrix<f64>, factors: &DMatrix<f64>, loadings: &DMatrix<f64>) -> Result<f64> {
    if factors.nrows() != x.nrows()
        || loadings.nrows() != x.ncols()
        || factors.ncols() != loadings.ncols()
    {
        return Err(FarsError::Dimension(format!(
            "rss: X is {:?}, F is {:?}, P is {:?}",
            x.shape(),
            factors.shape(),
            loadings.shape()
        )));
    }
    Ok(frobenius_sq(&(x - factors * loadings.transpose())))
}

/// Least-squares factors given loadings: `F = X P (PᵀP)⁻¹`.
pub fn update_factors(x: &DMatrix<f64>, loadings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if loadings.nrows() != x.ncols() {
        return Err(FarsError::Dimension(format!(
            "loadings have {} rows for {} variables",
            loadings.nrows(),
            x.ncols()
        )));
    }
    let ptp = loadings.transpose() * loadings;
    let rhs = loadings.transpose() * x.transpose();
    spd_solve(&ptp, &rhs)
        .map(|fit| fit.transpose())
        .ok_or_else(|| {
            FarsError::Singular(
                "PᵀP is singular; the panel cannot identify this many factors, try fewer".into(),
            )
        })
}

/// Restricted least-squares loadings: each variable is regressed on its
/// allowed factor columns only, disallowed entries are exactly zero.
pub fn update_loadings(
    x: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    pattern: &LoadingPattern,
) -> Result<DMatrix<f64>> {
    let (t, n) = x.shape();
    let r = factors.ncols();
    if factors.nrows() != t || pattern.variables() != n || pattern.factors() != r {
        return Err(FarsError::Dimension(format!(
            "update_loadings: X is {t}×{n}, F is {:?}, pattern is {}×{}",
            factors.shape(),
            pattern.variables(),
            pattern.factors()
        )));
    }

    // Variables with the same allowed set share one Gram matrix.
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry(pattern.allowed_columns(i)).or_default().push(i);
    }

    let mut loadings = DMatrix::zeros(n, r);
    for (cols, vars) in &groups {
        if cols.is_empty() {
            continue;
        }
        let f = factors.select_columns(cols);
        let y = x.select_columns(vars);
        let ft = f.transpose();
        let coef = spd_solve(&(&ft * &f), &(&ft * &y)).ok_or_else(|| {
            FarsError::Rank(format!(
                "factors allowed for variable {} are collinear",
                vars[0] + 1
            ))
        })?;
        for (c, &i) in vars.iter().enumerate() {
            for (a, &j) in cols.iter().enumerate() {
                loadings[(i, j)] = coef[(a, c)];
            }
        }
    }
    Ok(loadings)
}

/// Top-down starting values for every node's factors (T×r, node order).
pub fn initialize_factors(
    x: &DMatrix<f64>,
    spec: &BlockSpec,
    structure: &FactorStructure,
    method: InitMethod,
) -> Result<DMatrix<f64>> {
    let (t, n) = x.shape();
    spec.check_columns(n)?;
    if structure.max_block() > spec.block_count() {
        return Err(FarsError::Structure(format!(
            "structure references block {} but only {} blocks exist",
            structure.max_block(),
            spec.block_count()
        )));
    }

    let mut residual_blocks: Vec<DMatrix<f64>> = (1..=spec.block_count())
        .map(|k| {
            let range = spec.range(k);
            x.columns(range.start, range.len()).into_owned()
        })
        .collect();

    let mut factors = DMatrix::zeros(t, structure.total_factors());
    for (idx, node) in structure.nodes().iter().enumerate() {
        let count = node.count();
        let members: Vec<&DMatrix<f64>> =
            node.blocks().iter().map(|&b| &residual_blocks[b - 1]).collect();
        let width: usize = members.iter().map(|m| m.ncols()).sum();
        if count > t.min(width) {
            return Err(FarsError::Dimension(format!(
                "node {} asks for {count} factors from {width} variables over {t} periods",
                node.label()
            )));
        }
        let pooled = hstack(&members);
        let node_factors = match method {
            InitMethod::Cca if members.len() > 1 => maxvar_factors(&members, &pooled, count)
                .map_err(|e| node_error(node.label(), e))?,
            _ => pc_estimate(&pooled, count)
                .map_err(|e| node_error(node.label(), e))?
                .factors,
        };
        for &b in node.blocks() {
            let updated = residualize(&residual_blocks[b - 1], &node_factors).ok_or_else(|| {
                FarsError::Singular(format!("initial factors of node {} are collinear", node.label()))
            })?;
            residual_blocks[b - 1] = updated;
        }
        factors
            .columns_mut(structure.node_columns(idx).start, count)
            .copy_from(&node_factors);
    }
    Ok(factors)
}

fn node_error(label: String, e: FarsError) -> FarsError {
    match e {
        FarsError::Rank(msg) | FarsError::Dimension(msg) => {
            FarsError::Dimension(format!("node {label}: {msg}"))
        }
        other => other,
    }
}

fn hstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let t = parts.first().map_or(0, |m| m.nrows());
    let width = parts.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(t, width);
    let mut at = 0;
    for m in parts {
        out.columns_mut(at, m.ncols()).copy_from(*m);
        at += m.ncols();
    }
    out
}

/// MAXVAR generalized canonical variates: the leading eigenvectors of the sum
/// of projectors onto each block's principal subspace.
fn maxvar_factors(
    blocks: &[&DMatrix<f64>],
    pooled: &DMatrix<f64>,
    count: usize,
) -> Result<DMatrix<f64>> {
    let t = pooled.nrows();
    let mut projector_sum = DMatrix::zeros(t, t);
    for block in blocks {
        let basis = leading_left_subspace(block, count + 2);
        projector_sum += &basis * basis.transpose();
    }
    let (values, vectors) = sorted_eigen(&projector_sum);
    if !(values[count - 1] > RANK_TOL) {
        return Err(FarsError::Rank(format!(
            "residual blocks span fewer than {count} canonical directions"
        )));
    }
    let tf = t as f64;
    let mut factors = vectors.columns(0, count) * tf.sqrt();
    let mut loadings = pooled.transpose() * &factors / tf;
    apply_sign_convention(&mut factors, &mut loadings);
    Ok(factors)
}

/// Sequential least-squares estimation of the multi-level model.
pub fn estimate_mldfm(
    x: &DMatrix<f64>,
    spec: &BlockSpec,
    structure: &FactorStructure,
    method: InitMethod,
    tol: f64,
    max_iter: usize,
) -> Result<MldfmResult> {
    let (t, n) = x.shape();
    spec.check_columns(n)?;
    if !(tol > 0.0) {
        return Err(FarsError::Parameter(format!("tol must be positive, got {tol}")));
    }
    let r = structure.total_factors();
    if r > t.min(n) {
        return Err(FarsError::Dimension(format!(
            "{r} factors requested from a {t}×{n} panel"
        )));
    }
    let pattern = build_pattern(spec, structure)?;

    if structure.is_single_global(spec.block_count()) {
        let pc = pc_estimate(x, r)?;
        let total = frobenius_sq(&pc.residuals);
        return Ok(MldfmResult {
            factors: pc.factors,
            loadings: pc.loadings,
            residuals: pc.residuals,
            method,
            iterations: 0,
            rss_trace: vec![total],
            converged: true,
            structure: structure.clone(),
            blocks: spec.clone(),
        });
    }

    let mut factors = initialize_factors(x, spec, structure, method)?;
    let mut loadings = update_loadings(x, &factors, &pattern)?;
    let mut trace = vec![rss(x, &factors, &loadings)?];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        factors = update_factors(x, &loadings)?;
        loadings = update_loadings(x, &factors, &pattern)?;
        let current = rss(x, &factors, &loadings)?;
        let previous = *trace.last().expect("non-empty trace");
        trace.push(current);
        iterations += 1;
        if (previous - current).abs() / previous.max(1.0) < tol {
            converged = true;
            break;
        }
    }

    let residuals = x - &factors * loadings.transpose();
    let raw = MldfmResult {
        factors,
        loadings,
        residuals,
        method,
        iterations,
        rss_trace: trace,
        converged,
        structure: structure.clone(),
        blocks: spec.clone(),
    };
    orthonormalize_levels(&raw)
}

/// Identifies the factors of a converged fit: each node's factors are first
/// residualized on the factors of every node that loads on a strict superset
/// of its blocks (global before middle layers before block-specific), then
/// replaced by the normalized principal components of the node's own common
/// component. Loadings are re-estimated afterwards, so the fitted common
/// component is unchanged.
pub fn orthonormalize_levels(result: &MldfmResult) -> Result<MldfmResult> {
    let structure = &result.structure;
    let pattern = build_pattern(&result.blocks, structure)?;
    let x = &result.residuals + result.common_component();
    let t = x.nrows();
    let tf = t as f64;
    let nodes = structure.nodes();

    let mut factors = result.factors.clone();
    for (idx, node) in nodes.iter().enumerate() {
        let parent_cols: Vec<usize> = (0..idx)
            .filter(|&p| nodes[p].is_strict_superset_of(node))
            .flat_map(|p| structure.node_columns(p))
            .collect();
        if parent_cols.is_empty() {
            continue;
        }
        let cols = structure.node_columns(idx);
        let own = factors.columns(cols.start, cols.len()).into_owned();
        let parents = factors.select_columns(&parent_cols);
        let orthogonal = residualize(&own, &parents).ok_or_else(|| {
            FarsError::Singular(format!("parent factors of node {} are collinear", node.label()))
        })?;
        factors.columns_mut(cols.start, cols.len()).copy_from(&orthogonal);
    }

    let loadings = update_loadings(&x, &factors, &pattern)?;
    for (idx, node) in nodes.iter().enumerate() {
        let cols = structure.node_columns(idx);
        let f = factors.columns(cols.start, cols.len());
        let p = loadings.columns(cols.start, cols.len());
        let common = f * p.transpose();
        let (values, vectors) = sorted_eigen(&(&common * common.transpose()));
        let count = cols.len();
        if !(values[0] > 0.0) || !(values[count - 1] > RANK_TOL * values[0]) {
            return Err(FarsError::Degenerate(format!(
                "node {} has a (near) zero common component",
                node.label()
            )));
        }
        factors
            .columns_mut(cols.start, count)
            .copy_from(&(vectors.columns(0, count) * tf.sqrt()));
    }

    let mut loadings = update_loadings(&x, &factors, &pattern)?;
    apply_sign_convention(&mut factors, &mut loadings);
    let residuals = &x - &factors * loadings.transpose();
    Ok(MldfmResult {
        factors,
        loadings,
        residuals,
        ..result.clone()
    })
}
