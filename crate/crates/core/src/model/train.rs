use serde::{Deserialize, Serialize};

use super::loss::{alignment_loss, batch_centers, clustering_loss};
use super::{ModelParams, ParamGroup};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One mini-batch: inputs, pseudo-labels and sample weights.
#[derive(Debug, Clone, Copy)]
pub struct TrainBatch<'a> {
    pub x: &'a Matrix,
    pub q: &'a Matrix,
    pub w: &'a [f64],
}

/// Global centers to align with, plus the client's shard-level centers used
/// for clusters that have no member in the batch.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentTarget<'a> {
    pub global: &'a Matrix,
    pub fallback: &'a Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_a: f64,
    pub total: f64,
    pub lambda: f64,
    /// True when every sample had zero weight and no step was taken.
    pub skipped: bool,
}

/// Adam state, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub adapter_lr: f64,
    pub head_lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, adapter_lr: f64, head_lr: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            adapter_lr,
            head_lr,
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);

        let grads = grads.tensors();
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for (((_, group, p), (_, _, g)), ((_, _, m), (_, _, v))) in
            params.tensors_mut().into_iter().zip(grads).zip(moments)
        {
            let lr = match group {
                ParamGroup::Adapter => self.adapter_lr,
                ParamGroup::Head => self.head_lr,
            };
            for j in 0..p.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Total loss `L_C + λ L_A` and its gradient with respect to every
/// parameter.
///
/// `L_A` uses centers recomputed from this batch's representations and the
/// argmax of its pseudo-labels, so it is differentiable through the adapter.
/// When every weight is zero `L_C` is reported as 0, `skipped` is set, and
/// the gradient contains only the alignment term.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: TrainBatch<'_>,
    align: AlignmentTarget<'_>,
    lambda: f64,
) -> Result<(LossBreakdown, ModelParams)> {
    let n = batch.x.rows();
    let k = params.clusters();
    if n == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    if batch.q.shape() != (n, k) || batch.w.len() != n {
        return Err(Error::invalid("batch pseudo-labels or weights have the wrong shape"));
    }
    if align.global.shape() != (k, params.input_dim()) || align.fallback.shape() != align.global.shape() {
        return Err(Error::invalid("center matrices must be K x D"));
    }

    let cache = params.forward_cached(batch.x)?;
    let total_w: f64 = batch.w.iter().sum();
    let skipped = !(total_w > 0.0);

    // dL/dO
    let mut d_o = Matrix::zeros(n, k);
    let l_c = if skipped {
        0.0
    } else {
        let l_c = clustering_loss(batch.q, &cache.o, batch.w)?;
        for i in 0..n {
            let s = 2.0 * batch.w[i] / total_w;
            if s == 0.0 {
                continue;
            }
            for j in 0..k {
                d_o[(i, j)] = s * (cache.o[(i, j)] - batch.q[(i, j)]);
            }
        }
        l_c
    };

    let assignments = batch.q.argmax_rows();
    let (centers, counts) = batch_centers(&cache.e, &assignments, align.fallback);
    let l_a = alignment_loss(&centers, align.global)?;

    let mut grads = params.zeros_like();

    // head
    grads.head.w2 = cache.hidden.t_matmul(&d_o);
    grads.head.b2 = d_o.col_sums();
    let mut d_z1 = d_o.matmul_t(&params.head.w2);
    for (dz, &z) in d_z1.as_mut_slice().iter_mut().zip(cache.z1.as_slice()) {
        if z <= 0.0 {
            *dz = 0.0;
        }
    }
    grads.head.w1 = cache.e.t_matmul(&d_z1);
    grads.head.b1 = d_z1.col_sums();

    if let Some(adapter) = &params.adapter {
        let mut d_e = d_z1.matmul_t(&params.head.w1);
        if lambda != 0.0 {
            for (i, &a) in assignments.iter().enumerate() {
                let scale = 2.0 * lambda / counts[a] as f64;
                for (j, de) in d_e.row_mut(i).iter_mut().enumerate() {
                    *de += scale * (centers[(a, j)] - align.global[(a, j)]);
                }
            }
        }
        let mut d_pre = d_e;
        if adapter.activation != super::Activation::Identity {
            for (dp, &e) in d_pre.as_mut_slice().iter_mut().zip(cache.e.as_slice()) {
                *dp *= adapter.activation.derivative_from_output(e);
            }
        }
        let ga = grads.adapter.as_mut().expect("gradient mirrors params");
        ga.weight = batch.x.t_matmul(&d_pre);
        ga.bias = d_pre.col_sums();
    }

    let breakdown = LossBreakdown {
        l_c,
        l_a,
        total: l_c + lambda * l_a,
        lambda,
        skipped,
    };
    Ok((breakdown, grads))
}

/// Computes the loss, backpropagates and applies one Adam step. Batches
/// whose weights are all zero are reported with `skipped = true` and leave
/// the parameters and optimizer untouched.
pub fn backward_and_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: TrainBatch<'_>,
    align: AlignmentTarget<'_>,
    lambda: f64,
) -> Result<LossBreakdown> {
    let (loss, grads) = loss_and_gradients(params, batch, align, lambda)?;
    if loss.skipped {
        return Ok(loss);
    }
    if !loss.total.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss or gradient at step {} (L_C={}, L_A={})",
            opt.step + 1,
            loss.l_c,
            loss.l_a
        )));
    }
    if !opt.m.same_shape(params) {
        return Err(Error::invalid("optimizer state does not match model parameters"));
    }
    opt.apply(params, &grads);
    Ok(loss)
}
