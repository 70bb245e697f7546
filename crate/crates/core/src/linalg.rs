//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue cutoff below which a Gram matrix is treated as singular.
pub(crate) const RANK_TOL: f64 = 1e-12;

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order (columns of the returned matrix follow the same order).
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = eig.eigenvectors.select_columns(&order);
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric matrix with every eigenvalue raised to at least `floor`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return symmetrize(m);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&out)
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    symmetrize(&out)
}

/// Solves `gram * X = rhs` for a symmetric positive definite `gram`,
/// refusing numerically singular systems.
pub fn spd_solve(gram: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if gram.nrows() == 0 {
        return Some(DMatrix::zeros(0, rhs.ncols()));
    }
    let (values, _) = sorted_eigen(gram);
    let max = values[0];
    let min = values[values.len() - 1];
    if !(max > 0.0) || !(min > RANK_TOL * max) {
        return None;
    }
    let chol = gram.clone().cholesky()?;
    Some(chol.solve(rhs))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(gram: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    spd_solve(gram, &DMatrix::identity(gram.nrows(), gram.ncols())).map(|m| symmetrize(&m))
}

/// OLS coefficients (p×m) of every column of `y` (n×m) on `x` (n×p), no intercept.
pub fn ols(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let xt = x.transpose();
    spd_solve(&(&xt * x), &(&xt * y))
}

/// Residuals of `y` after projecting its columns on the span of `x`.
pub fn residualize(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if x.ncols() == 0 {
        return Some(y.clone());
    }
    let beta = ols(y, x)?;
    Some(y - x * beta)
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Numerical rank from the eigenvalues of `m mᵀ` (or `mᵀ m`).
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let (values, _) = sorted_eigen(&gram);
    let max = values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    values.iter().filter(|&&v| v > 1e-10 * max).count()
}

/// Orthonormal basis (columns) of the span of `m`'s columns, sorted by
/// decreasing singular value; dimension capped at `cap`.
pub fn leading_left_subspace(m: &DMatrix<f64>, cap: usize) -> DMatrix<f64> {
    let (values, vectors) = sorted_eigen(&(m * m.transpose()));
    let max = values.iter().copied().fold(0.0, f64::max);
    let keep = values
        .iter()
        .take(cap)
        .take_while(|&&v| max > 0.0 && v > 1e-10 * max)
        .count();
    vectors.columns(0, keep).into_owned()
}

/// Cosines of the principal angles between the column spans of `a` and `b`,
/// sorted descending.
pub fn principal_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let m = qa.transpose() * qb;
    let mut s: Vec<f64> = m.singular_values().iter().map(|v| v.min(1.0)).collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}
