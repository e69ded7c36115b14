//! AdamW with decoupled weight decay, cosine learning-rate schedule with
//! linear warmup, and global gradient-norm clipping.
//!
//! After every update the parameters and moments are snapped to their f32
//! checkpoint representation, so the live training state and a saved/loaded
//! state are bit-identical and resuming reproduces the next step exactly.

use std::collections::BTreeMap;

use crate::autograd::Tensor;
use crate::encoders::DualEncoderParams;

use super::TrainError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters excluded from weight decay.
fn decay_exempt(name: &str) -> bool {
    name == "log_temperature"
}

/// First/second moment estimates per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &DualEncoderParams) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, t) in params.named() {
            first.insert(name.clone(), vec![0.0; t.numel()]);
            second.insert(name, vec![0.0; t.numel()]);
        }
        OptimizerState {
            step: 0,
            first,
            second,
        }
    }
}

pub(crate) fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Snap every parameter to its f32 storage value.
pub fn snap_params(params: &mut DualEncoderParams) {
    for (_, slot) in params.named_mut() {
        let snapped: Vec<f64> = slot.data().iter().map(|&v| snap_f32(v)).collect();
        *slot = Tensor::from_vec(slot.shape().to_vec(), snapped).expect("same shape");
    }
}

/// One bias-corrected AdamW update. Decay is applied directly to the
/// weights; missing gradients count as zero; non-finite gradients abort the
/// step without touching any state.
pub fn adamw_step(
    params: &mut DualEncoderParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(TrainError::Config(format!("bad learning rate {lr}")));
    }
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(TrainError::NonFinite {
                what: format!("gradient of {name} at step {}", state.step + 1),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, slot) in params.named_mut() {
        let zero;
        let g = match grads.get(&name) {
            Some(g) => g.data(),
            None => {
                zero = vec![0.0; slot.numel()];
                &zero
            }
        };
        let m = state.first.get_mut(&name).expect("state mirrors params");
        let v = state.second.get_mut(&name).expect("state mirrors params");
        let wd = if decay_exempt(&name) { 0.0 } else { weight_decay };
        let mut data = slot.data().to_vec();
        for i in 0..data.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            m[i] = snap_f32(m[i]);
            v[i] = snap_f32(v[i]);
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = snap_f32(data[i] - lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * data[i]));
        }
        *slot = Tensor::from_vec(slot.shape().to_vec(), data).expect("same shape");
    }
    Ok(())
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. `max_norm <= 0` disables clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm_sq: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            let data: Vec<f64> = g.data().iter().map(|v| v * scale).collect();
            *g = Tensor::from_vec(g.shape().to_vec(), data).expect("same shape");
        }
    }
    norm
}

/// Linear ramp `0 → base_lr` over `warmup` steps, then cosine decay to 0 at
/// `total_steps`. Steps are 0-indexed completed-step counts, so the first
/// optimizer step runs at `lr(0)`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, warmup: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if warmup > 0 && step <= warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
