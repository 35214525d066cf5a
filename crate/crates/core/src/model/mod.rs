//! The local trainable model.
//!
//! Representations are `e = act(x·A + a)` when the adapter is enabled and
//! `e = x` otherwise; cluster scores are `o = relu(e·W1 + b1)·W2 + b2`.
//! All weight matrices are stored `in × out`.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{alignment_loss, batch_centers, clustering_loss};
pub use train::{backward_and_step, loss_and_gradients, AlignmentTarget, LossBreakdown, OptimizerState, TrainBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub adapter: Option<Adapter>,
    pub head: Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden width of the head; `None` means `input_dim`.
    pub hidden_dim: Option<usize>,
    pub clusters: usize,
    pub adapter: bool,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(self.input_dim)
    }
}

/// Which learning rate a tensor trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Adapter,
    Head,
}

/// Names in checkpoint order.
pub const TENSOR_NAMES: [&str; 6] = ["adapter.W", "adapter.b", "head.W1", "head.b1", "head.W2", "head.b2"];

impl ModelParams {
    /// Identity adapter and Glorot-uniform head layers with zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (d, h, k) = (cfg.input_dim, cfg.hidden(), cfg.clusters);
        if d == 0 || h == 0 || k == 0 {
            return Err(Error::invalid(format!(
                "model dimensions must be positive (D={d}, H={h}, K={k})"
            )));
        }
        let adapter = cfg.adapter.then(|| Adapter {
            weight: Matrix::identity(d),
            bias: vec![0.0; d],
            activation: cfg.activation,
        });
        Ok(Self {
            adapter,
            head: Head {
                w1: glorot(d, h, rng),
                b1: vec![0.0; h],
                w2: glorot(h, k, rng),
                b2: vec![0.0; k],
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.head.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.head.w1.cols()
    }

    pub fn clusters(&self) -> usize {
        self.head.w2.cols()
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<(&'static str, ParamGroup, &[f64])> {
        let mut out: Vec<(&'static str, ParamGroup, &[f64])> = Vec::with_capacity(6);
        if let Some(a) = &self.adapter {
            out.push((TENSOR_NAMES[0], ParamGroup::Adapter, a.weight.as_slice()));
            out.push((TENSOR_NAMES[1], ParamGroup::Adapter, &a.bias));
        }
        out.push((TENSOR_NAMES[2], ParamGroup::Head, self.head.w1.as_slice()));
        out.push((TENSOR_NAMES[3], ParamGroup::Head, &self.head.b1));
        out.push((TENSOR_NAMES[4], ParamGroup::Head, self.head.w2.as_slice()));
        out.push((TENSOR_NAMES[5], ParamGroup::Head, &self.head.b2));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ParamGroup, &mut [f64])> {
        let mut out: Vec<(&'static str, ParamGroup, &mut [f64])> = Vec::with_capacity(6);
        if let Some(a) = &mut self.adapter {
            out.push((TENSOR_NAMES[0], ParamGroup::Adapter, a.weight.as_mut_slice()));
            out.push((TENSOR_NAMES[1], ParamGroup::Adapter, &mut a.bias));
        }
        out.push((TENSOR_NAMES[2], ParamGroup::Head, self.head.w1.as_mut_slice()));
        out.push((TENSOR_NAMES[3], ParamGroup::Head, &mut self.head.b1));
        out.push((TENSOR_NAMES[4], ParamGroup::Head, self.head.w2.as_mut_slice()));
        out.push((TENSOR_NAMES[5], ParamGroup::Head, &mut self.head.b2));
        out
    }

    /// All parameters flattened in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, _, t)| t.iter().copied())
            .collect()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let layout = |p: &ModelParams| -> Vec<(&'static str, usize)> {
            p.tensors().into_iter().map(|(n, _, t)| (n, t.len())).collect()
        };
        layout(self) == layout(other)
            && self.input_dim() == other.input_dim()
            && self.hidden_dim() == other.hidden_dim()
            && self.adapter.as_ref().map(|a| a.activation) == other.adapter.as_ref().map(|a| a.activation)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Representations and cluster scores.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let cache = self.forward_cached(x)?;
        Ok((cache.e, cache.o))
    }

    /// Representations only.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(self.embed_unchecked(x))
    }

    /// Argmax of the cluster scores.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.1.argmax_rows())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if !x.is_finite() {
            return Err(Error::invalid("input contains non-finite values"));
        }
        Ok(())
    }

    fn embed_unchecked(&self, x: &Matrix) -> Matrix {
        match &self.adapter {
            None => x.clone(),
            Some(a) => {
                let mut e = x.matmul(&a.weight);
                e.add_row_vector(&a.bias);
                if a.activation != Activation::Identity {
                    e = e.map(|v| a.activation.apply(v));
                }
                e
            }
        }
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let e = self.embed_unchecked(x);
        let mut z1 = e.matmul(&self.head.w1);
        z1.add_row_vector(&self.head.b1);
        let hidden = z1.map(|v| v.max(0.0));
        let mut o = hidden.matmul(&self.head.w2);
        o.add_row_vector(&self.head.b2);
        Ok(ForwardCache { e, z1, hidden, o })
    }
}

pub(crate) struct ForwardCache {
    pub e: Matrix,
    pub z1: Matrix,
    pub hidden: Matrix,
    pub o: Matrix,
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-limit, limit))
        .collect();
    Matrix::from_vec_unchecked(fan_in, fan_out, data)
}
