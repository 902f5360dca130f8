//! Sharpness-aware sign perturbation, Adam updates, and cosine-annealed
//! learning rates.
//!
//! The perturbation is the closed form `ε* = γ·sign(∇)` with
//! `sign(0) = 0`: the first-order maximizer of the loss under the sign
//! constraint, satisfying `⟨ε*, ∇⟩ = γ·‖∇‖₁ ≥ 0`. Gradients fed to Adam
//! are evaluated at the perturbed point but applied to the unperturbed
//! parameters; batch-norm running statistics are not trainable and are
//! never touched here.

use thiserror::Error;

use crate::mlp::{Gradients, MlpConfig, MlpParams};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("shape mismatch in {tensor}: expected {expected} entries, got {got}")]
    ShapeMismatch {
        tensor: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("step {step} out of range: schedule has {total} steps")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Perturbation magnitude; γ = 0 disables the sharpness-aware step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamConfig {
    pub gamma: f64,
}

impl SamConfig {
    pub fn new(gamma: f64) -> Self {
        debug_assert!(gamma >= 0.0);
        Self { gamma }
    }
}

impl Default for SamConfig {
    fn default() -> Self {
        Self { gamma: 0.05 }
    }
}

/// Element-wise `ε* = γ·sign(∇)` over every trainable tensor, with
/// `sign(0) = 0` so dead coordinates stay unperturbed.
pub fn sam_perturbation(grads: &Gradients, config: &SamConfig) -> Gradients {
    let gamma = config.gamma;
    let mut eps = grads.clone();
    for t in eps.tensors_mut() {
        for v in t.iter_mut() {
            *v = if *v > 0.0 {
                gamma
            } else if *v < 0.0 {
                -gamma
            } else {
                0.0
            };
        }
    }
    eps
}

/// Adam moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(config: &MlpConfig) -> Self {
        Self {
            m: Gradients::zeros(config),
            v: Gradients::zeros(config),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

const TENSOR_NAMES: [&str; 10] = [
    "w1",
    "b1",
    "bn1.scale",
    "bn1.shift",
    "w2",
    "b2",
    "bn2.scale",
    "bn2.shift",
    "w3",
    "b3",
];

/// One bias-corrected Adam update:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
/// The step counter increments once per call. Running batch-norm
/// statistics are not trainable and are not touched.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), OptimError> {
    let t = state.step + 1;
    let c1 = 1.0 - state.beta1.powi(t as i32);
    let c2 = 1.0 - state.beta2.powi(t as i32);
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.epsilon);

    let p_tensors = params.trainable_mut();
    let g_tensors = grads.tensors();
    let m_tensors = state.m.tensors_mut();
    let v_tensors = state.v.tensors_mut();
    for i in 0..10 {
        if g_tensors[i].len() != p_tensors[i].len() {
            return Err(OptimError::ShapeMismatch {
                tensor: TENSOR_NAMES[i],
                expected: p_tensors[i].len(),
                got: g_tensors[i].len(),
            });
        }
    }
    for (((p, g), m), v) in p_tensors
        .into_iter()
        .zip(g_tensors)
        .zip(m_tensors)
        .zip(v_tensors)
    {
        for (((pj, &gj), mj), vj) in p
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *pj -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// Cosine annealing from `base` down to `min` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base: f64, min: f64, total_steps: u64) -> Result<Self, OptimError> {
        if min.is_nan() || base.is_nan() || min < 0.0 || min > base {
            return Err(OptimError::InvalidSchedule(format!(
                "need 0 ≤ min ≤ base, got min {min}, base {base}"
            )));
        }
        if total_steps < 1 {
            return Err(OptimError::InvalidSchedule(
                "schedule needs at least 1 step".into(),
            ));
        }
        Ok(Self {
            base,
            min,
            total_steps,
        })
    }
}

/// `lr(t) = min + ½(base − min)(1 + cos(π·t/T))` for `0 ≤ t ≤ T`.
pub fn cosine_lr(schedule: &LrSchedule, step: u64) -> Result<f64, OptimError> {
    if step > schedule.total_steps {
        return Err(OptimError::StepOutOfRange {
            step,
            total: schedule.total_steps,
        });
    }
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(schedule.min
        + 0.5 * (schedule.base - schedule.min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
