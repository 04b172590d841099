use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues down to `-PSD_TOLERANCE × max(1, ‖Σ‖)` count as zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    /// Row-major `F × F`.
    pub covariance: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let f = mean.len();
        if covariance.len() != f * f {
            return Err(Error::Shape(format!(
                "covariance of {} values for {f} features",
                covariance.len()
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance of `n × dim` row-major features.
    pub fn fit(features: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || features.len() % dim != 0 {
            return Err(Error::Shape(format!("{} feature values with width {dim}", features.len())));
        }
        let n = features.len() / dim;
        if n < 2 {
            return Err(Error::InvalidArgument(format!("moments need >= 2 samples, got {n}")));
        }
        let x = DMatrix::from_row_slice(n, dim, features);
        let mean = x.row_mean();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let cov = (centered.transpose() * &centered) / (n - 1) as f64;
        Ok(Self {
            mean: mean.iter().copied().collect(),
            covariance: row_major(&cov),
        })
    }

    fn matrix(&self) -> DMatrix<f64> {
        let f = self.dim();
        DMatrix::from_row_slice(f, f, &self.covariance)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix with tolerated negatives clipped to 0.
fn clipped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut eig = SymmetricEigen::new(symmetrize(m));
    for v in eig.eigenvalues.iter_mut() {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{what} has non-finite eigenvalues")));
        }
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::Numerical(format!("{what} is not positive semi-definite (eigenvalue {v:.3e})")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`.
///
/// The cross term is evaluated as `tr((√Σ_a Σ_b √Σ_a)^{1/2})`, which has the
/// same eigenvalues and stays symmetric.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("moments of dimension {} and {}", a.dim(), b.dim())));
    }
    let (sa, sb) = (a.matrix(), b.matrix());
    let asym = |m: &DMatrix<f64>| (m - m.transpose()).amax();
    let tol = |m: &DMatrix<f64>| 1e-9 * m.amax().max(1.0);
    if asym(&sa) > tol(&sa) || asym(&sb) > tol(&sb) {
        return Err(Error::InvalidArgument("covariance is not symmetric".into()));
    }
    let ea = clipped_eigen(&sa, "first covariance")?;
    clipped_eigen(&sb, "second covariance")?;
    let root_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &root_a * &sb * &root_a;
    let cross: f64 = clipped_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let dm = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let d = dm.norm_squared() + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}
