use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Adam hyperparameters and the global gradient-norm clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm above which gradients are rescaled; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: IndexMap<String, Tensor<F>>,
    pub v: IndexMap<String, Tensor<F>>,
}

impl<F: Float> OptimizerState<F> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ModelParams<F>, config: AdamConfig) -> Self {
        let zeros: IndexMap<String, Tensor<F>> = params
            .iter()
            .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Gradient norms of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepNorms {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

fn global_norm<F: Float>(grads: &IndexMap<String, Tensor<F>>) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norms before and after.
pub fn clip_global_norm<F: Float>(
    grads: &mut IndexMap<String, Tensor<F>>,
    max_norm: f64,
) -> StepNorms {
    let grad_norm = global_norm(grads);
    if grad_norm > max_norm {
        let scale = F::of(max_norm / grad_norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    StepNorms {
        grad_norm,
        clipped_norm: global_norm(grads),
    }
}

/// One bias-corrected Adam update after global-norm clipping.
///
/// Parameters without an entry in `grads` receive a zero gradient. A
/// non-finite gradient aborts before anything is modified, naming the
/// offending parameter.
pub fn adam_step<F: Float>(
    params: &mut ModelParams<F>,
    mut grads: IndexMap<String, Tensor<F>>,
    state: &mut OptimizerState<F>,
) -> Result<StepNorms> {
    for (name, g) in &grads {
        let Some(p) = params.get(name) else {
            return Err(Error::invalid(format!(
                "gradient for unknown parameter '{name}'"
            )));
        };
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient for '{name}' has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient for parameter '{name}'"
            )));
        }
    }
    let norms = match state.config.clip_norm {
        Some(max) => clip_global_norm(&mut grads, max),
        None => {
            let n = global_norm(&grads);
            StepNorms {
                grad_norm: n,
                clipped_norm: n,
            }
        }
    };

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let correct1 = 1.0 - c.beta1.powi(t);
    let correct2 = 1.0 - c.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(Error::invalid(format!(
                "optimizer has no moments for '{name}'"
            )));
        };
        let g = grads.get(name);
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = c.beta1 * m.data()[i].as_f64() + (1.0 - c.beta1) * gi;
            let vi = c.beta2 * v.data()[i].as_f64() + (1.0 - c.beta2) * gi * gi;
            m.data_mut()[i] = F::of(mi);
            v.data_mut()[i] = F::of(vi);
            let update = c.lr * (mi / correct1) / ((vi / correct2).sqrt() + c.eps);
            let pi = p.data()[i].as_f64() - update;
            p.data_mut()[i] = F::of(pi);
        }
    }
    Ok(norms)
}
