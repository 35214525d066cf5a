use super::Matrix;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric positive-definite matrix together with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    matrix: Matrix,
    chol: Matrix,
}

impl SpdMatrix {
    /// Validates symmetry and positive definiteness through a Cholesky
    /// factorization.
    pub fn new(matrix: Matrix) -> Result<Self> {
        let (r, c) = matrix.shape();
        if r != c {
            return Err(Error::invalid(format!("covariance must be square, got {r}x{c}")));
        }
        for i in 0..r {
            for j in 0..i {
                let (a, b) = (matrix[(i, j)], matrix[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::invalid(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        let chol = cholesky(&matrix)?;
        Ok(Self { matrix, chol })
    }

    /// `scale · I`
    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = scale;
        }
        Self::new(m)
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn cholesky_factor(&self) -> &Matrix {
        &self.chol
    }

    /// `ln det Σ = 2 Σ ln L_ii`
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.chol[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Squared Mahalanobis norm `dᵀ Σ⁻¹ d` by forward substitution.
    pub fn mahalanobis_sq(&self, d: &[f64]) -> f64 {
        let k = self.dim();
        assert_eq!(d.len(), k);
        let mut z = vec![0.0; k];
        for i in 0..k {
            let mut s = d[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * z[j];
            }
            z[i] = s / self.chol[(i, i)];
        }
        z.iter().map(|v| v * v).sum()
    }
}

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::SingularCovariance);
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// `ln N(x; mean, cov)`, evaluated through the Cholesky factor.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], cov: &SpdMatrix) -> Result<f64> {
    let k = cov.dim();
    if x.len() != k || mean.len() != k {
        return Err(Error::invalid(format!(
            "dimension mismatch: x={}, mean={}, cov={k}",
            x.len(),
            mean.len()
        )));
    }
    let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    Ok(-0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + cov.log_det() + cov.mahalanobis_sq(&d)))
}
