//! Equipartitioned pseudo-labels from cluster scores via entropic optimal
//! transport.
//!
//! Given scores `O` (N×K) the plan `ξ` minimizes `⟨ξ, M⟩ + ε Σ ξ log ξ` with
//! cost `M = −log softmax(O)`, row marginals `1` and column marginals `N/K`.
//! The scaling vectors are kept as log-potentials: at `ε = 0.1` the kernel
//! `exp(−M/ε)` underflows for any moderately confident row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Matrix};

/// Floor applied to probabilities before taking logs.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iters: 200,
            marginal_tol: 1e-6,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.marginal_tol >= 0.0) {
            return Err(Error::invalid("marginal_tol must be nonnegative"));
        }
        Ok(())
    }
}

/// Transport plan plus convergence diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub xi: Matrix,
    pub converged: bool,
    pub iterations: usize,
    /// `max_i |Σ_k ξ_ik − 1|`
    pub row_residual: f64,
    /// `max_k |Σ_i ξ_ik − N/K|`
    pub col_residual: f64,
}

#[derive(Debug, Clone)]
pub struct PseudoLabelBatch {
    pub xi: Matrix,
    pub q: Matrix,
    pub converged: bool,
    pub iterations: usize,
}

/// Solves the equipartition transport problem for one batch of scores.
///
/// Stops when both marginal residuals are within `cfg.marginal_tol` or after
/// `cfg.max_iters` sweeps; in the latter case `converged` is false.
pub fn sinkhorn_project(scores: &Matrix, cfg: &TransportConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, k) = scores.shape();
    if n == 0 || k == 0 {
        return Err(Error::invalid(format!("scores must be non-empty, got {n}x{k}")));
    }
    let p = softmax_rows(scores)?;
    let log_kernel = p.map(|v| v.max(PROB_FLOOR).ln() / cfg.epsilon);
    let log_col_target = (n as f64 / k as f64).ln();
    let col_target = n as f64 / k as f64;

    let mut log_u = vec![0.0; n];
    let mut log_v = vec![0.0; k];
    let mut row_lse = vec![0.0; n];
    let mut scratch = vec![0.0; n.max(k)];
    let mut iterations = 0;

    // Each sweep ends on the column update, so columns are exact up to
    // rounding and only the row sums need watching. Row sums of the current
    // plan fall out of the next row update for free.
    loop {
        for (i, out) in row_lse.iter_mut().enumerate() {
            let t = &mut scratch[..k];
            for ((s, &lk), &lv) in t.iter_mut().zip(log_kernel.row(i)).zip(&log_v) {
                *s = lk + lv;
            }
            *out = lse(t);
        }
        if iterations > 0 {
            let drift = log_u
                .iter()
                .zip(&row_lse)
                .map(|(lu, l)| ((lu + l).exp() - 1.0).abs())
                .fold(0.0, f64::max);
            if drift <= cfg.marginal_tol || iterations >= cfg.max_iters {
                break;
            }
        }
        iterations += 1;

        // u = a ⊘ K v
        for (lu, l) in log_u.iter_mut().zip(&row_lse) {
            *lu = -l;
        }
        // v = b ⊘ Kᵀ u
        for j in 0..k {
            let t = &mut scratch[..n];
            for (i, s) in t.iter_mut().enumerate() {
                *s = log_kernel[(i, j)] + log_u[i];
            }
            log_v[j] = log_col_target - lse(t);
        }
    }

    let mut xi = Matrix::zeros(n, k);
    fill_plan(&mut xi, &log_kernel, &log_u, &log_v);
    let row_residual = xi
        .row_iter()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let col_residual = xi.col_sums().iter().map(|c| (c - col_target).abs()).fold(0.0, f64::max);
    let converged = row_residual <= cfg.marginal_tol && col_residual <= cfg.marginal_tol;

    if !converged {
        log::warn!(
            "sinkhorn stopped after {iterations} iterations: row residual {row_residual:e}, column residual {col_residual:e}"
        );
    }

    Ok(TransportPlan {
        xi,
        converged,
        iterations,
        row_residual,
        col_residual,
    })
}

fn fill_plan(xi: &mut Matrix, log_kernel: &Matrix, log_u: &[f64], log_v: &[f64]) {
    for (i, &lu) in log_u.iter().enumerate() {
        for ((x, &lk), &lv) in xi.row_mut(i).iter_mut().zip(log_kernel.row(i)).zip(log_v) {
            *x = (lu + lk + lv).exp();
        }
    }
}

fn lse(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `q_ik = ξ_ik² / Σ_k' ξ_ik'²`
pub fn square_normalize(xi: &Matrix) -> Result<Matrix> {
    let mut q = xi.clone();
    for i in 0..q.rows() {
        let row = q.row_mut(i);
        if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "transport plan row {i} has negative or non-finite entries"
            )));
        }
        let denom: f64 = row.iter().map(|v| v * v).sum();
        if denom == 0.0 {
            return Err(Error::DegenerateRow { row: i });
        }
        for v in row.iter_mut() {
            *v = *v * *v / denom;
        }
    }
    Ok(q)
}

/// Transport plan followed by square normalization.
pub fn generate_pseudo_labels(scores: &Matrix, cfg: &TransportConfig) -> Result<PseudoLabelBatch> {
    let plan = sinkhorn_project(scores, cfg)?;
    let q = square_normalize(&plan.xi)?;
    Ok(PseudoLabelBatch {
        xi: plan.xi,
        q,
        converged: plan.converged,
        iterations: plan.iterations,
    })
}

/// `KL(Q ∥ P) = −Σ Q log P + Σ Q log Q`, with `0 log 0 = 0`.
pub fn kl_divergence(q: &Matrix, p: &Matrix) -> f64 {
    q.as_slice()
        .iter()
        .zip(p.as_slice())
        .filter(|(&qv, _)| qv > 0.0)
        .map(|(&qv, &pv)| qv * (qv.ln() - pv.max(PROB_FLOOR).ln()))
        .sum()
}
