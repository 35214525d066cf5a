//! Dense kernels shared by the rest of the crate: matrices, Cholesky-based
//! Gaussian densities, softmax, k-means and the seeded RNG.

mod kmeans;
mod linalg;
mod matrix;
mod rng;

pub use kmeans::{kmeans, kmeans_restarts, KMeansResult};
pub use linalg::{cholesky, gaussian_logpdf, SpdMatrix};
pub use matrix::{argmax, dot, log_sum_exp, sq_euclidean, Matrix};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Row-wise softmax with a per-row max shift.
pub fn softmax_rows(scores: &Matrix) -> Result<Matrix> {
    if !scores.is_finite() {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let mut out = scores.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}
