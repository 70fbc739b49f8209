//! Loss, optimizer, learning-rate schedule, checkpoints and the training loop.

mod checkpoint;
mod trainer;

use crate::error::{param_err, Error, Result};
use crate::heads::SegOutput;
use crate::layers::ParamStore;
use crate::tensor::{Element, Graph, Var};

pub use checkpoint::{Checkpoint, Entry, FinetuneReport, CHECKPOINT_VERSION};
pub use trainer::{IterRecord, TrainSettings, TrainState, Trainer, BEST_CHECKPOINT, LATEST_CHECKPOINT, METRICS_FILE, METRICS_HEADER};

/// `base_lr * (1 - iter / max_iter) ^ power`.
pub fn poly_lr(iter: u64, max_iter: u64, base_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return param_err(format!("poly_lr: iter {iter} exceeds max_iter {max_iter}"));
    }
    if !(power > 0.0) {
        return param_err(format!("poly_lr: power must be positive, got {power}"));
    }
    if max_iter == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Cross-entropy on the main logits plus `aux_weight` times each auxiliary term.
pub fn total_loss<T: Element>(g: &mut Graph<T>, out: &SegOutput, labels: &[u8], ignore_index: u8, aux_weight: f64) -> Result<Var> {
    let mut loss = g.cross_entropy(out.main, labels, ignore_index)?;
    if aux_weight != 0.0 {
        for &aux in &out.aux {
            let a = g.cross_entropy(aux, labels, ignore_index)?;
            let a = g.mul_scalar(a, T::lit(aux_weight));
            loss = g.add(loss, a)?;
        }
    }
    Ok(loss)
}

/// Configured pixel-wise cross-entropy with auxiliary weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub ignore_index: u8,
    pub aux_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            ignore_index: crate::data::IGNORE_INDEX,
            aux_weight: 0.4,
        }
    }
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        "cross_entropy"
    }
}

/// SGD with momentum and decoupled-from-schedule L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter in store order; empty for non-trainable entries.
    pub velocity: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return param_err(format!("momentum must lie in [0, 1), got {momentum}"));
        }
        if weight_decay < 0.0 {
            return param_err(format!("weight_decay must be non-negative, got {weight_decay}"));
        }
        Ok(Self {
            momentum,
            weight_decay,
            velocity: params
                .iter()
                .map(|(_, e)| if e.trainable { vec![T::zero(); e.tensor.numel()] } else { Vec::new() })
                .collect(),
        })
    }

    /// `g' = g + wd * w; v = m * v + g'; w -= lr * v`, then clear the gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters but the model has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let (m, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((name, e), v) in params.iter_mut().zip(&mut self.velocity) {
            if !e.trainable {
                continue;
            }
            if v.len() != e.tensor.numel() {
                return Err(Error::Shape(format!("velocity for '{name}' has the wrong length")));
            }
            let grad = e.tensor.grad().map(<[T]>::to_vec);
            let w = e.tensor.data_mut();
            for i in 0..w.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]) + wd * w[i];
                v[i] = m * v[i] + g;
                w[i] -= lr * v[i];
            }
            e.tensor.zero_grad();
        }
        Ok(())
    }
}
