//! Adam with bias correction and the inverse-square-root warmup schedule.

use crate::error::{CoreError, Result};
use crate::graph::Precision;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        }
    }
}

/// One Adam update. `step` is the 1-indexed global step shared by all
/// tensors; bias correction uses it directly. In f32 mode the updated
/// parameter and both moments are rounded through f32 so a resumed run
/// sees exactly the stored values.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    hp: &AdamHyper,
    lr: f64,
    step: u64,
    precision: Precision,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() {
        return Err(CoreError::Shape {
            op: "adam_step",
            detail: format!(
                "param {} grad {} state {}",
                param.len(),
                grad.len(),
                state.m.len()
            ),
        });
    }
    if step == 0 {
        return Err(CoreError::Numerical("adam step index starts at 1".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(CoreError::NanGradient(format!("gradient entry {}", i)));
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        let mut m = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        let mut v = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mut p = param[i] - lr * (m / bc1) / ((v / bc2).sqrt() + hp.eps);
        if precision == Precision::F32 {
            m = m as f32 as f64;
            v = v as f32 as f64;
            p = p as f32 as f64;
        }
        state.m[i] = m;
        state.v[i] = v;
        param[i] = p;
    }
    Ok(())
}

/// Linear ramp to the peak rate over the warmup steps, then inverse
/// square-root decay: peak * min(step/warmup, sqrt(warmup/step)).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WarmupSchedule {
    pub peak: f64,
    pub warmup: u64,
}

impl WarmupSchedule {
    pub fn new(peak: f64, warmup: u64) -> Result<Self> {
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(CoreError::Config(format!("peak lr must be positive, got {}", peak)));
        }
        if warmup == 0 {
            return Err(CoreError::Config("warmup must be at least 1 step".into()));
        }
        Ok(WarmupSchedule { peak, warmup })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(CoreError::Numerical("schedule step index starts at 1".into()));
        }
        let s = step as f64;
        let w = self.warmup as f64;
        Ok(self.peak * (s / w).min((w / s).sqrt()))
    }
}
