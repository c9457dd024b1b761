//! Global-norm clipping and AdamW with decoupled weight decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Tensor, TensorError};

/// Gradients keyed by parameter name, in manifest order.
pub type GradMap = IndexMap<String, Tensor>;

/// Global L2 norm of all gradients, accumulated in f64 in manifest order.
pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `max_norm / ‖g‖` when the global norm exceeds
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f32) -> Result<f64> {
    if grads.values().any(|t| !t.is_finite()) {
        return Err(TensorError::NonFinite { op: "clip_global_norm" }.into());
    }
    let norm = global_norm(grads);
    if norm > f64::from(max_norm) {
        let scale = (f64::from(max_norm) / norm) as f32;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
    pub step: u64,
}

/// One AdamW update: `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &GradMap,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            Some(g) if g.shape() == p.shape() => {}
            Some(g) => {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            None => return Err(Error::Contract(format!("no gradient for {name}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = (1.0 - f64::from(cfg.betas.0).powi(t)) as f32;
    let bc2 = (1.0 - f64::from(cfg.betas.1).powi(t)) as f32;
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let (b1, b2) = (cfg.betas.0, cfg.betas.1);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.entry(name.to_owned()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.to_owned()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= decay;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}
