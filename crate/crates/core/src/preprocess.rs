//! Centering, iterative standardization, symmetric matrix powers and
//! whitening.
//!
//! All routines are pure functions of their inputs. Data matrices are stored
//! with subjects in rows and features in columns.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SingError};

/// Relative eigenvalue cutoff used when whitening: eigenvalues at or below
/// `DEFAULT_EIGEN_TOL * largest` are treated as zero.
pub const DEFAULT_EIGEN_TOL: f64 = 1e-10;

/// n subjects by p features, plus what has been done to it.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    row_centered: bool,
    column_centered: bool,
    column_standardized: bool,
}

impl DataMatrix {
    /// Wraps raw data. Needs at least 3 subjects and 2 features so that
    /// moments up to order four are estimable.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (n, p) = values.shape();
        if n < 3 || p < 2 {
            return Err(SingError::InvalidInput(format!(
                "data must have at least 3 rows and 2 columns, got {n}x{p}"
            )));
        }
        check_finite(&values)?;
        Ok(Self {
            values,
            row_centered: false,
            column_centered: false,
            column_standardized: false,
        })
    }

    pub fn from_row_slice(n: usize, p: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * p {
            return Err(SingError::DimensionMismatch(format!(
                "{} values cannot fill a {n}x{p} matrix",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, p, data))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_row_centered(&self) -> bool {
        self.row_centered
    }

    pub fn is_column_centered(&self) -> bool {
        self.column_centered
    }

    pub fn is_double_centered(&self) -> bool {
        self.row_centered && self.column_centered
    }

    pub fn is_column_standardized(&self) -> bool {
        self.column_standardized
    }
}

/// Denominator used for the subject covariance `X Xᵀ / p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceScaling {
    /// Divide by the number of features.
    #[default]
    Features,
    /// Divide by the number of features minus one.
    FeaturesMinusOne,
}

impl CovarianceScaling {
    pub fn denominator(self, p: usize) -> f64 {
        match self {
            CovarianceScaling::Features => p as f64,
            CovarianceScaling::FeaturesMinusOne => (p - 1) as f64,
        }
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if let Some(idx) = m.iter().position(|v| !v.is_finite()) {
        let (row, col) = (idx % m.nrows(), idx / m.nrows());
        return Err(SingError::InvalidInput(format!(
            "non-finite entry at row {row}, column {col}"
        )));
    }
    Ok(())
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Removes row, column and grand means so that `1ᵀX = 0` and `X1 = 0`.
///
/// Works on any non-empty finite matrix; the [`DataMatrix`] wrapper is
/// [`double_center`].
pub fn double_center_matrix(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = m.shape();
    if n == 0 || p == 0 {
        return Err(SingError::InvalidInput("empty matrix".into()));
    }
    check_finite(m)?;
    let first = m[(0, 0)];
    if m.iter().all(|&v| v == first) {
        return Err(SingError::Degenerate("matrix is constant".into()));
    }
    let row_means: DVector<f64> = m.column_mean();
    let col_means = m.row_mean();
    let grand = m.mean();
    let mut out = m.clone();
    for j in 0..p {
        for i in 0..n {
            out[(i, j)] = m[(i, j)] - row_means[i] - col_means[j] + grand;
        }
    }
    // A second sweep removes the O(eps) residual left by the first, which
    // makes the operation idempotent to within rounding.
    let row_means = out.column_mean();
    let col_means = out.row_mean();
    for j in 0..p {
        for i in 0..n {
            out[(i, j)] -= row_means[i] + col_means[j];
        }
    }
    Ok(out)
}

pub fn double_center(data: &DataMatrix) -> Result<DataMatrix> {
    Ok(DataMatrix {
        values: double_center_matrix(&data.values)?,
        row_centered: true,
        column_centered: true,
        column_standardized: false,
    })
}

/// Result of [`standardize_iterative`].
#[derive(Debug, Clone)]
pub struct Standardized {
    pub data: DataMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// max over columns of |variance - 1| after the last sweep.
    pub final_deviation: f64,
}

/// Alternates column standardization (mean 0, sample variance 1 across
/// subjects) with row centering until every column variance is within `tol`
/// of one.
///
/// Running out of iterations is not an error; the returned status carries
/// `converged = false` and the final deviation.
pub fn standardize_iterative(data: &DataMatrix, tol: f64, max_iter: usize) -> Result<Standardized> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(SingError::InvalidInput(
            "tol must be positive and max_iter at least 1".into(),
        ));
    }
    let (n, p) = data.values.shape();
    let mut x = data.values.clone();
    for (j, col) in x.column_iter().enumerate() {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            return Err(SingError::Degenerate(format!("column {j} is constant")));
        }
    }

    let mut deviation = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            let var = col.norm_squared() / (n - 1) as f64;
            if !(var > 0.0) {
                return Err(SingError::Degenerate(format!(
                    "column {j} collapsed to a constant during standardization"
                )));
            }
            col /= var.sqrt();
        }
        let row_means = x.column_mean();
        for j in 0..p {
            for i in 0..n {
                x[(i, j)] -= row_means[i];
            }
        }
        deviation = x
            .column_iter()
            .map(|col| {
                let mean = col.mean();
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var - 1.0).abs()
            })
            .fold(0.0, f64::max);
        if deviation < tol {
            break;
        }
    }

    Ok(Standardized {
        data: DataMatrix {
            values: x,
            row_centered: true,
            column_centered: true,
            column_standardized: true,
        },
        iterations,
        converged: deviation < tol,
        final_deviation: deviation,
    })
}

/// Fractional power of a symmetric matrix through its eigendecomposition.
///
/// Eigenvalues at or below `eigen_tol` are mapped to zero (generalized
/// inverse semantics for negative exponents). Integer exponents also keep
/// negative eigenvalues whose magnitude exceeds `eigen_tol`; fractional
/// exponents reject them.
pub fn matrix_power(m: &DMatrix<f64>, exponent: f64, eigen_tol: f64) -> Result<DMatrix<f64>> {
    Ok(SymmetricPower::new(m, eigen_tol)?.power(exponent)?.0)
}

/// Eigendecomposition of a symmetric matrix, reused for several powers.
#[derive(Debug, Clone)]
pub(crate) struct SymmetricPower {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    eigen_tol: f64,
}

impl SymmetricPower {
    pub(crate) fn new(m: &DMatrix<f64>, eigen_tol: f64) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(SingError::InvalidInput(format!(
                "matrix power needs a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if !(eigen_tol >= 0.0) {
            return Err(SingError::InvalidInput(
                "eigen_tol must be nonnegative".into(),
            ));
        }
        check_finite(m)?;
        let asym = (m - m.transpose()).norm();
        if asym > 1e-8 * m.norm() {
            return Err(SingError::InvalidInput(format!(
                "matrix is not symmetric (||m - m^T|| = {asym:e})"
            )));
        }
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        Ok(Self {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            eigen_tol,
        })
    }

    pub(crate) fn largest_eigenvalue(&self) -> f64 {
        self.eigenvalues.max()
    }

    /// Returns the power and the number of eigenvalues kept.
    pub(crate) fn power(&self, exponent: f64) -> Result<(DMatrix<f64>, usize)> {
        if !exponent.is_finite() {
            return Err(SingError::InvalidInput("exponent must be finite".into()));
        }
        let integer = exponent.fract() == 0.0;
        let mut scaled = self.eigenvectors.clone();
        let mut kept = 0;
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            let factor = if lambda > self.eigen_tol {
                kept += 1;
                lambda.powf(exponent)
            } else if lambda < -self.eigen_tol {
                if !integer {
                    return Err(SingError::Domain(format!(
                        "negative eigenvalue {lambda:e} has no real power {exponent}"
                    )));
                }
                kept += 1;
                lambda.powi(exponent as i32)
            } else {
                0.0
            };
            scaled.column_mut(k).scale_mut(factor);
        }
        let mut out = &scaled * self.eigenvectors.transpose();
        symmetrize(&mut out);
        Ok((out, kept))
    }

    /// Orthonormal basis (n×k) of the eigenspace with eigenvalues above the
    /// tolerance.
    pub(crate) fn retained_basis(&self) -> DMatrix<f64> {
        let cols: Vec<_> = self
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > self.eigen_tol)
            .map(|(k, _)| self.eigenvectors.column(k).into_owned())
            .collect();
        DMatrix::from_columns(&cols)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Whitening transform of double-centered data.
#[derive(Debug, Clone)]
pub struct Whitener {
    /// `Σ^(-1/2)` on the retained eigenspace, n×n.
    pub whitening: DMatrix<f64>,
    /// `Σ^(1/2)`, the generalized inverse of `whitening`, n×n.
    pub inverse: DMatrix<f64>,
    /// `whitening · X_c`, n×p.
    pub whitened: DMatrix<f64>,
    /// The double-centered data the whitener was built from.
    pub centered: DMatrix<f64>,
    /// Orthonormal basis of the retained eigenspace, n×eigen_rank.
    pub basis: DMatrix<f64>,
    pub eigen_rank: usize,
    /// Absolute eigenvalue cutoff that was applied.
    pub eigen_tol: f64,
    pub covariance: CovarianceScaling,
}

impl Whitener {
    pub fn n(&self) -> usize {
        self.whitening.nrows()
    }

    pub fn p(&self) -> usize {
        self.whitened.ncols()
    }

    /// Orthogonal projector onto the retained eigenspace.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }
}

pub fn whiten(data: &DataMatrix) -> Result<Whitener> {
    whiten_with(data, CovarianceScaling::default(), DEFAULT_EIGEN_TOL)
}

/// Builds `L = Σ^(-1/2)` and `L⁻ = Σ^(1/2)` from `Σ = X_c X_cᵀ / p` (or
/// `/(p-1)`), dropping eigenvalues at or below `relative_tol` times the
/// largest one.
pub fn whiten_with(
    data: &DataMatrix,
    covariance: CovarianceScaling,
    relative_tol: f64,
) -> Result<Whitener> {
    let x = &data.values;
    if !data.is_double_centered() {
        let scale = max_abs(x).max(f64::MIN_POSITIVE);
        let row_dev = x.column_mean().amax();
        let col_dev = x.row_mean().amax();
        if row_dev > 1e-8 * scale || col_dev > 1e-8 * scale {
            return Err(SingError::InvalidInput(
                "whitening requires double-centered data".into(),
            ));
        }
    }
    let sigma = (x * x.transpose()) / covariance.denominator(data.p());
    let probe = SymmetricPower::new(&sigma, 0.0)?;
    let largest = probe.largest_eigenvalue();
    if !(largest > 0.0) {
        return Err(SingError::Degenerate("data has zero covariance".into()));
    }
    let eigen_tol = relative_tol * largest;
    let power = SymmetricPower { eigen_tol, ..probe };
    let (whitening, eigen_rank) = power.power(-0.5)?;
    if eigen_rank < 2 {
        return Err(SingError::Degenerate(format!(
            "covariance has rank {eigen_rank}; at least 2 is required"
        )));
    }
    let (inverse, _) = power.power(0.5)?;
    let whitened = &whitening * x;
    Ok(Whitener {
        whitening,
        inverse,
        whitened,
        centered: x.clone(),
        basis: power.retained_basis(),
        eigen_rank,
        eigen_tol,
        covariance,
    })
}
