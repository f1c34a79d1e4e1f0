//! Fréchet distance between two Gaussian fits of feature sets.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as zero when taking square roots.
pub const EIGEN_CLIP: f64 = 1e-8;

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.len() < 2 {
        return Err(Error::invalid(format!("{what}: Fréchet statistics need at least 2 samples, got {}", rows.len())));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(format!("{what}: feature rows must share a nonzero width")));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Sample mean and unbiased covariance of the rows.
pub fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = to_matrix(rows, "moments")?;
    let n = m.nrows() as f64;
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    Ok((mean, cov))
}

/// Square root of a symmetric positive semi-definite matrix.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| if l > EIGEN_CLIP { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt_psd(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().map(|&l| if l > EIGEN_CLIP { l.sqrt() } else { 0.0 }).sum()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() {
        return Err(Error::ShapeMismatch { op: "frechet_distance", lhs: vec![mu_a.len()], rhs: vec![mu_b.len()] });
    }
    let root_a = sqrt_psd(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_psd(&inner);
    if !d.is_finite() {
        return Err(Error::invalid("Fréchet distance is not finite"));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between the Gaussian fits of two row sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}
