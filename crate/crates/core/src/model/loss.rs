use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Weighted mean squared residual `(1/Σw) Σ_i w_i ‖Q_i − O_i‖²`.
pub fn clustering_loss(q: &Matrix, o: &Matrix, w: &[f64]) -> Result<f64> {
    if q.shape() != o.shape() || w.len() != q.rows() {
        return Err(Error::invalid("clustering loss inputs disagree in shape"));
    }
    let total_w: f64 = w.iter().sum();
    if !(total_w > 0.0) {
        return Err(Error::AllSamplesDiscarded);
    }
    let mut acc = 0.0;
    for ((qi, oi), &wi) in q.row_iter().zip(o.row_iter()).zip(w) {
        if wi == 0.0 {
            continue;
        }
        let sq: f64 = qi.iter().zip(oi).map(|(a, b)| (a - b) * (a - b)).sum();
        acc += wi * sq;
    }
    Ok(acc / total_w)
}

/// Squared Frobenius distance between local and global centers.
pub fn alignment_loss(c_local: &Matrix, c_global: &Matrix) -> Result<f64> {
    if c_local.shape() != c_global.shape() {
        return Err(Error::invalid(format!(
            "center shapes differ: {:?} vs {:?}",
            c_local.shape(),
            c_global.shape()
        )));
    }
    Ok(c_local.sq_dist(c_global))
}

/// Per-batch centers: mean of the representations assigned to each cluster.
/// Clusters with no member in the batch take the row from `fallback`.
pub fn batch_centers(e: &Matrix, assignments: &[usize], fallback: &Matrix) -> (Matrix, Vec<usize>) {
    let k = fallback.rows();
    let mut centers = Matrix::zeros(k, e.cols());
    let mut counts = vec![0usize; k];
    for (row, &a) in e.row_iter().zip(assignments) {
        counts[a] += 1;
        for (c, v) in centers.row_mut(a).iter_mut().zip(row) {
            *c += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            centers.row_mut(c).copy_from_slice(fallback.row(c));
        } else {
            let inv = 1.0 / counts[c] as f64;
            centers.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    (centers, counts)
}
