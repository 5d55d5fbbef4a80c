//! AdamW with decoupled weight decay.
//!
//! Decay applies only to parameters flagged as weight matrices (never norms,
//! biases, the mask token, or position tables). Parameters and moments are
//! rounded through f32 after every update so the optimizer state serializes
//! exactly in the 32-bit checkpoint format.

use crate::error::{MumError, Result};
use crate::model::ParamStore;
use crate::numerics::Array;
use crate::train::TrainConfig;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    /// Completed update count (bias correction uses step + 1).
    pub step: usize,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> OptimizerState {
        OptimizerState {
            m: store
                .ids()
                .map(|id| Array::zeros(store.value(id).shape()))
                .collect(),
            v: store
                .ids()
                .map(|id| Array::zeros(store.value(id).shape()))
                .collect(),
            step: 0,
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `clip`.
pub fn clip_global_norm(grads: &mut [Option<Array>], clip: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(Array::sq_norm)
        .sum::<f64>()
        .sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(scale);
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update. `grads` aligns with the store's
/// parameter ids; `None` means a zero gradient. Non-finite gradients abort
/// with the parameter's name.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Array>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(MumError::contract(
            "adamw_step",
            format!("{} gradients for {} parameters", grads.len(), store.len()),
        ));
    }
    let (b1, b2) = cfg.betas;
    let t = state.step + 1;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (idx, id) in store.ids().enumerate() {
        if let Some(g) = &grads[idx] {
            if !g.all_finite() {
                return Err(MumError::NonFinite {
                    what: "gradient",
                    name: store.name(id).to_string(),
                });
            }
            if g.shape() != store.value(id).shape() {
                return Err(MumError::DimensionMismatch {
                    op: "adamw_step",
                    lhs: g.shape().to_vec(),
                    rhs: store.value(id).shape().to_vec(),
                });
            }
        }
        let zero = Array::zeros(store.value(id).shape());
        let g = grads[idx].as_ref().unwrap_or(&zero);
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let decay = if store.decays(id) {
            cfg.weight_decay
        } else {
            0.0
        };
        let p = store.value_mut(id);
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            let pi = p.data()[i];
            p.data_mut()[i] = pi - lr * update - lr * decay * pi;
        }
        p.quantize_f32();
        m.quantize_f32();
        v.quantize_f32();
    }
    state.step = t;
    Ok(())
}
