//! Gaussian-uniform mixture over pseudo-label residuals.
//!
//! A residual `δ_i = Q_i − O_i` is explained either by a zero-mean Gaussian
//! (pseudo-label agrees with the model) or by a uniform box (pseudo-label is
//! wrong). The posterior of the Gaussian branch, `r_i`, becomes the sample's
//! reliability; samples with `r_i < 0.5` are dropped from the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_logpdf, Matrix, SpdMatrix};

/// Reliability threshold below which a sample gets zero weight.
pub const KEEP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumConfig {
    /// EM sweeps per fit.
    pub tau: usize,
    pub pi_min: f64,
    pub pi_max: f64,
    /// Lower bound on per-dimension variance inside the uniform-width moments.
    pub var_floor: f64,
    /// Added to the covariance diagonal after every M-step.
    pub ridge: f64,
}

impl Default for GumConfig {
    fn default() -> Self {
        Self {
            tau: 3,
            pi_min: 0.05,
            pi_max: 0.95,
            var_floor: 1e-6,
            ridge: 1e-6,
        }
    }
}

impl GumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::invalid("tau must be at least 1"));
        }
        if !(0.0 < self.pi_min && self.pi_min <= self.pi_max && self.pi_max < 1.0) {
            return Err(Error::invalid("pi clamps must satisfy 0 < pi_min <= pi_max < 1"));
        }
        if !(self.var_floor > 0.0) || !(self.ridge > 0.0) {
            return Err(Error::invalid("var_floor and ridge must be positive"));
        }
        Ok(())
    }
}

/// `θ = {π, Σ, γ}`. The uniform density is kept as `ln γ` because the
/// product of box widths under- or overflows for larger `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct GumParams {
    pub pi: f64,
    pub sigma: Matrix,
    pub log_gamma: f64,
}

impl GumParams {
    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    pub r: Vec<f64>,
    pub w: Vec<f64>,
}

impl SampleWeights {
    pub fn kept_fraction(&self) -> f64 {
        if self.w.is_empty() {
            return 0.0;
        }
        self.w.iter().filter(|&&v| v > 0.0).count() as f64 / self.w.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct EStep {
    pub r: Vec<f64>,
    /// Set when `Σ` failed to factorize and was repaired with a ridge.
    pub repaired: bool,
}

fn check_shapes(q: &Matrix, o: &Matrix) -> Result<()> {
    if q.shape() != o.shape() {
        return Err(Error::invalid(format!(
            "pseudo-labels {:?} and scores {:?} differ in shape",
            q.shape(),
            o.shape()
        )));
    }
    Ok(())
}

/// Posterior probability of correct labeling for every row.
pub fn e_step(q: &Matrix, o: &Matrix, params: &GumParams) -> Result<EStep> {
    check_shapes(q, o)?;
    let k = q.cols();
    if params.sigma.shape() != (k, k) {
        return Err(Error::invalid("covariance size does not match cluster count"));
    }
    let (sigma, repaired) = match SpdMatrix::new(params.sigma.clone()) {
        Ok(s) => (s, false),
        Err(Error::SingularCovariance) => {
            log::warn!("singular GUM covariance, retrying with ridge 1e-6");
            let mut m = params.sigma.clone();
            for i in 0..k {
                m[(i, i)] += 1e-6;
            }
            (SpdMatrix::new(m)?, true)
        }
        Err(e) => return Err(e),
    };

    let log_inlier_prior = params.pi.ln();
    let log_outlier = (1.0 - params.pi).ln() + params.log_gamma;
    let mut r = Vec::with_capacity(q.rows());
    for (qi, oi) in q.row_iter().zip(o.row_iter()) {
        let log_inlier = log_inlier_prior + gaussian_logpdf(qi, oi, &sigma)?;
        r.push(logistic(log_inlier - log_outlier));
    }
    Ok(EStep { r, repaired })
}

/// `1 / (1 + e^{-t})` without overflow.
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Re-estimates `θ` from the current reliabilities.
pub fn m_step(q: &Matrix, o: &Matrix, r: &[f64], cfg: &GumConfig) -> Result<GumParams> {
    check_shapes(q, o)?;
    let (n, k) = q.shape();
    if n == 0 {
        return Err(Error::invalid("GUM fit needs at least one sample"));
    }
    if r.len() != n {
        return Err(Error::invalid(format!("expected {n} reliabilities, got {}", r.len())));
    }
    let nf = n as f64;
    let sum_r: f64 = r.iter().sum();

    // Σ = Σ_i r_i δ_i δ_iᵀ / Σ_i r_i; falls back to equal weights when every r_i is 0
    let weight = |i: usize| {
        if sum_r >= f64::MIN_POSITIVE {
            r[i] / sum_r
        } else {
            1.0 / nf
        }
    };
    let mut sigma = Matrix::zeros(k, k);
    let mut delta = vec![0.0; k];
    for i in 0..n {
        residual(q.row(i), o.row(i), &mut delta);
        let wi = weight(i);
        if wi == 0.0 {
            continue;
        }
        for a in 0..k {
            let da = wi * delta[a];
            for b in a..k {
                sigma[(a, b)] += da * delta[b];
            }
        }
    }
    for a in 0..k {
        sigma[(a, a)] += cfg.ridge;
        for b in 0..a {
            sigma[(a, b)] = sigma[(b, a)];
        }
    }

    let pi = (sum_r / nf).clamp(cfg.pi_min, cfg.pi_max);

    // Moment weights (1 − r_i)/(1 − π)/N; with no outlier mass at all (the
    // r = 1 start) the box is fitted to every sample with equal weights.
    let sum_out: f64 = r.iter().map(|v| 1.0 - v).sum();
    let mut c1 = vec![0.0; k];
    let mut c2 = vec![0.0; k];
    for i in 0..n {
        residual(q.row(i), o.row(i), &mut delta);
        let wi = if sum_out >= f64::MIN_POSITIVE {
            (1.0 - r[i]) / (1.0 - pi) / nf
        } else {
            1.0 / nf
        };
        for a in 0..k {
            c1[a] += wi * delta[a];
            c2[a] += wi * delta[a] * delta[a];
        }
    }
    // 1/γ = Π_k 2√(3(C2 − C1²))
    let log_inv_gamma: f64 = c1
        .iter()
        .zip(&c2)
        .map(|(m1, m2)| (2.0 * (3.0 * (m2 - m1 * m1).max(cfg.var_floor)).sqrt()).ln())
        .sum();

    let mut params = GumParams {
        pi,
        sigma,
        log_gamma: -log_inv_gamma,
    };
    ensure_factorizable(&mut params.sigma, cfg.ridge)?;
    Ok(params)
}

fn residual(q: &[f64], o: &[f64], out: &mut [f64]) {
    for ((d, a), b) in out.iter_mut().zip(q).zip(o) {
        *d = a - b;
    }
}

/// Grows the diagonal until the Cholesky factorization succeeds.
fn ensure_factorizable(sigma: &mut Matrix, ridge: f64) -> Result<()> {
    let mut extra = ridge;
    for _ in 0..20 {
        if crate::numerics::cholesky(sigma).is_ok() {
            return Ok(());
        }
        for i in 0..sigma.rows() {
            sigma[(i, i)] += extra;
        }
        extra *= 10.0;
    }
    Err(Error::SingularCovariance)
}

/// `w_i = r_i` if `r_i ≥ 0.5`, else `0`.
pub fn weights_from_r(r: &[f64]) -> Vec<f64> {
    r.iter().map(|&v| if v >= KEEP_THRESHOLD { v } else { 0.0 }).collect()
}

/// Runs `cfg.tau` rounds of M-step followed by E-step, starting from
/// `r_init`.
pub fn fit(q: &Matrix, o: &Matrix, r_init: &[f64], cfg: &GumConfig) -> Result<(SampleWeights, GumParams)> {
    cfg.validate()?;
    check_shapes(q, o)?;
    if r_init.len() != q.rows() {
        return Err(Error::invalid(format!(
            "expected {} initial reliabilities, got {}",
            q.rows(),
            r_init.len()
        )));
    }
    let mut r = r_init.to_vec();
    let mut params = m_step(q, o, &r, cfg)?;
    for sweep in 0..cfg.tau {
        if sweep > 0 {
            params = m_step(q, o, &r, cfg)?;
        }
        r = e_step(q, o, &params)?.r;
    }
    let w = weights_from_r(&r);
    Ok((SampleWeights { r, w }, params))
}
