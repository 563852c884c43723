//! Dense statistics for small feature dimensions: feature matrices, covariance
//! estimation, positive-definite repair, Cholesky factors and squared
//! Mahalanobis distances.
//!
//! Everything here works on row-major `f64` buffers. Feature dimensions in
//! this toolkit are typically tens to a few thousand, so the routines are
//! written as plain loops rather than on top of a BLAS.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default eigenvalue floor for [`psd_repair`].
pub const DEFAULT_REPAIR_FLOOR: f64 = 1e-3;

/// Ridge escalations attempted when a Cholesky factorization fails.
const RIDGE_ESCALATIONS: usize = 3;

/// N×D matrix of extracted features with optional per-row labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "feature matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            labels: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(Error::invalid(format!(
                "row {i} has {} values, expected {cols}",
                r.len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                self.rows
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.cols)
    }

    /// Copies the given rows (and their labels) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::invalid(format!("row index {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        let out = Self::new(indices.len(), self.cols, data)?;
        match &self.labels {
            Some(l) => out.with_labels(indices.iter().map(|&i| l[i]).collect()),
            None => Ok(out),
        }
    }
}

/// Dense row-major square matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        m.add_diagonal(1.0);
        m
    }

    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::invalid(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix contains non-finite entries"));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += v;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.dim {
            for j in 0..i {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_nalgebra_symmetric())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    fn to_nalgebra_symmetric(&self) -> DMatrix<f64> {
        let s = self.symmetrized();
        DMatrix::from_row_slice(self.dim, self.dim, &s.data)
    }
}

/// Symmetrizes `matrix` and clips its eigenvalues from below at `floor`.
///
/// A symmetric input whose smallest eigenvalue is already at least `floor`
/// comes back unchanged.
pub fn psd_repair(matrix: &SquareMatrix, floor: f64) -> SquareMatrix {
    psd_repair_report(matrix, floor).0
}

/// Same as [`psd_repair`], also reporting whether eigenvalues were clipped.
pub fn psd_repair_report(matrix: &SquareMatrix, floor: f64) -> (SquareMatrix, bool) {
    let sym = matrix.symmetrized();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(sym.dim, sym.dim, &sym.data));
    let max_abs = eig.eigenvalues.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    // eigen-solver rounding on an already repaired matrix
    let slack = 1e-12 * max_abs;
    if eig.eigenvalues.iter().all(|&l| l >= floor - slack) {
        return (sym, false);
    }

    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let mut out = SquareMatrix::zeros(sym.dim);
    for i in 0..sym.dim {
        for j in 0..sym.dim {
            out.set(i, j, rebuilt[(i, j)]);
        }
    }
    (out.symmetrized(), true)
}

/// Lower-triangular `L` with `L Lᵀ = Σ`.
///
/// `(x − μ)ᵀ Σ⁻¹ (x − μ) = ‖L⁻¹(x − μ)‖²`, so one forward substitution gives
/// the squared Mahalanobis distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
}

impl CholeskyFactor {
    /// Returns `None` when the matrix is not numerically positive definite.
    pub fn new(matrix: &SquareMatrix) -> Option<Self> {
        let n = matrix.dim;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = matrix.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = matrix.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Some(Self { dim: n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// `ln det Σ`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim)
            .map(|i| self.lower[i * self.dim + i].ln())
            .sum::<f64>()
    }

    /// `‖L⁻¹(x − mean)‖²`, using `scratch` (length ≥ D) as working storage.
    #[inline]
    pub fn mahalanobis_sq_with(&self, x: &[f64], mean: &[f64], scratch: &mut [f64]) -> f64 {
        let n = self.dim;
        let mut acc = 0.0;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let mut s = x[i] - mean[i];
            for (lik, zk) in row.iter().zip(&scratch[..i]) {
                s -= lik * zk;
            }
            let z = s / self.lower[i * n + i];
            scratch[i] = z;
            acc += z * z;
        }
        acc
    }

    pub fn mahalanobis_sq(&self, x: &[f64], mean: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.dim];
        self.mahalanobis_sq_with(x, mean, &mut scratch)
    }
}

/// Ridge actually added for a requested `reg`: scaled by the average
/// variance so that the ridge is relative for large-scale features, never
/// smaller than `reg` itself.
pub fn scaled_ridge(covariance: &SquareMatrix, reg: f64) -> f64 {
    let avg_var = covariance.trace() / covariance.dim() as f64;
    reg * avg_var.max(1.0)
}

/// Adds the ridge, repairs and factors. Escalates the ridge ×10 up to three
/// times if the factorization still fails.
pub(crate) fn regularize_and_factor(
    covariance: &SquareMatrix,
    reg: f64,
) -> Result<(SquareMatrix, CholeskyFactor, f64, bool)> {
    let mut ridge = scaled_ridge(covariance, reg);
    for _ in 0..=RIDGE_ESCALATIONS {
        let mut cov = covariance.clone();
        cov.add_diagonal(ridge);
        let (cov, repaired) = psd_repair_report(&cov, ridge);
        if let Some(factor) = CholeskyFactor::new(&cov) {
            return Ok((cov, factor, ridge, repaired));
        }
        ridge *= 10.0;
    }
    Err(Error::NumericalFailure(format!(
        "covariance not positive definite after ridge {ridge:e}"
    )))
}

/// One cluster's empirical mean, covariance and cached factorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    mean: Vec<f64>,
    covariance: SquareMatrix,
    factor: CholeskyFactor,
    count: usize,
    ridge: f64,
    repaired: bool,
}

impl ClusterStats {
    /// Builds stats from a mean and a raw (un-regularized) covariance.
    pub fn from_moments(
        mean: Vec<f64>,
        covariance: &SquareMatrix,
        count: usize,
        reg: f64,
    ) -> Result<Self> {
        if mean.len() != covariance.dim() {
            return Err(Error::invalid(format!(
                "mean has dimension {}, covariance {}",
                mean.len(),
                covariance.dim()
            )));
        }
        if !(reg > 0.0) {
            return Err(Error::invalid(format!("ridge must be positive, got {reg}")));
        }
        let (covariance, factor, ridge, repaired) = regularize_and_factor(covariance, reg)?;
        Ok(Self {
            mean,
            covariance,
            factor,
            count,
            ridge,
            repaired,
        })
    }

    pub(crate) fn from_parts(
        mean: Vec<f64>,
        covariance: SquareMatrix,
        factor: CholeskyFactor,
        count: usize,
        ridge: f64,
        repaired: bool,
    ) -> Self {
        Self {
            mean,
            covariance,
            factor,
            count,
            ridge,
            repaired,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &SquareMatrix {
        &self.covariance
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Ridge added to the diagonal (after any escalation).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Whether eigenvalue clipping changed the regularized covariance.
    pub fn repaired(&self) -> bool {
        self.repaired
    }

    #[inline]
    pub(crate) fn mahalanobis_sq_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.factor.mahalanobis_sq_with(x, &self.mean, scratch)
    }
}

/// Squared Mahalanobis distance of `x` to the cluster.
pub fn mahalanobis_sq(x: &[f64], stats: &ClusterStats) -> Result<f64> {
    if x.len() != stats.dim() {
        return Err(Error::invalid(format!(
            "point has dimension {}, cluster {}",
            x.len(),
            stats.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("point contains non-finite values"));
    }
    Ok(stats.factor.mahalanobis_sq(x, &stats.mean))
}

/// Arithmetic mean and biased (divide-by-N) covariance of the given rows.
pub(crate) fn mean_and_covariance<'a, I>(rows: I, dim: usize) -> (Vec<f64>, SquareMatrix, usize)
where
    I: Iterator<Item = &'a [f64]> + Clone,
{
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
        n += 1;
    }
    let inv = 1.0 / n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m *= inv);

    let mut cov = SquareMatrix::zeros(dim);
    let mut delta = vec![0.0; dim];
    for r in rows {
        for ((d, v), m) in delta.iter_mut().zip(r).zip(&mean) {
            *d = v - m;
        }
        for i in 0..dim {
            for j in 0..=i {
                cov.data[i * dim + j] += delta[i] * delta[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..=i {
            let v = cov.data[i * dim + j] * inv;
            cov.data[i * dim + j] = v;
            cov.data[j * dim + i] = v;
        }
    }
    (mean, cov, n)
}

/// Empirical mean and biased covariance of the rows assigned to `cluster`,
/// regularized with a ridge of `reg` (scaled by the average variance when
/// that exceeds one) and repaired to be positive definite.
pub fn empirical_stats(
    features: &FeatureMatrix,
    assignment: &[usize],
    cluster: usize,
    reg: f64,
) -> Result<ClusterStats> {
    if assignment.len() != features.nrows() {
        return Err(Error::invalid(format!(
            "{} assignments for {} rows",
            assignment.len(),
            features.nrows()
        )));
    }
    let rows = features
        .iter_rows()
        .zip(assignment)
        .filter(move |(_, &a)| a == cluster)
        .map(|(r, _)| r);
    let (mean, cov, n) = mean_and_covariance(rows, features.ncols());
    if n == 0 {
        return Err(Error::EmptyCluster(cluster));
    }
    ClusterStats::from_moments(mean, &cov, n, reg)
}
