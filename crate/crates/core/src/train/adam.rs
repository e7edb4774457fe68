//! Adam without weight decay.

use clear_tensor::ParamStore;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::input(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::input(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::input(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments, one buffer per parameter, and the number of
/// applied steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One update of a single buffer at step `t` (1-based).
pub fn adam_update(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
        p[i] = (p[i] as f64 - step) as f32;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Nothing changed because this parameter's gradient held a NaN or
    /// infinity.
    Skipped { param: String },
}

/// Applies one Adam step using the grad slots of `store`, then clears them.
/// A parameter without a grad slot counts as a zero gradient. If any
/// gradient is non-finite the whole step is skipped and `t` is not advanced.
pub fn adam_step(store: &mut ParamStore<f32>, state: &mut AdamState, cfg: &AdamConfig) -> Result<StepOutcome> {
    if state.m.len() != store.len() {
        return Err(CoreError::input(format!(
            "optimizer state holds {} buffers for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    let bad = store
        .iter()
        .find(|(_, _, t)| t.grad.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
        .map(|(_, name, _)| name.to_string());
    if let Some(param) = bad {
        store.zero_grad();
        return Ok(StepOutcome::Skipped { param });
    }
    state.t += 1;
    let t = state.t;
    for (i, tensor) in store.tensors_mut().iter_mut().enumerate() {
        let g = tensor.grad.take().unwrap_or_else(|| vec![0.0; tensor.numel()]);
        adam_update(tensor.data_mut(), &g, &mut state.m[i], &mut state.v[i], t, cfg);
    }
    Ok(StepOutcome::Applied)
}
