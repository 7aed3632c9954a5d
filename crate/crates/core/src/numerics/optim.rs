//! Adam with linear warmup followed by linear decay to zero.

use super::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    /// Number of updates applied so far.
    pub step: u64,
    pub config: AdamConfig,
    pub total_steps: u64,
    moments: Vec<Option<Moments>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, total_steps: u64) -> Self {
        assert!(total_steps > 0, "total_steps must be positive");
        assert!(
            (0.0..=1.0).contains(&config.warmup_fraction),
            "warmup_fraction must lie in [0, 1]"
        );
        Self {
            step: 0,
            config,
            total_steps,
            moments: Vec::new(),
        }
    }

    pub fn warmup_steps(&self) -> f64 {
        self.config.warmup_fraction * self.total_steps as f64
    }
}

/// Learning rate at `step`: linear ramp from 0 to `base_lr` over the warmup
/// steps, then linear decay reaching 0 at `total_steps`.
pub fn lr_schedule(state: &OptimizerState, step: u64) -> f64 {
    let base = state.config.base_lr;
    let total = state.total_steps as f64;
    let warm = state.warmup_steps();
    let s = step as f64;
    if s < warm {
        return base * s / warm;
    }
    if total <= warm {
        return base;
    }
    base * ((total - s) / (total - warm)).max(0.0)
}

/// One bias-corrected Adam update over the trainable parameters, using the
/// learning rate scheduled for the update being applied. Frozen parameters
/// are not touched.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState) {
    if state.moments.len() < params.len() {
        state.moments.resize(params.len(), None);
    }
    state.step += 1;
    let t = state.step;
    let lr = lr_schedule(state, t);
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
        ..
    } = state.config;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (p, slot) in params.iter_mut().zip(state.moments.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let m = slot.get_or_insert_with(|| Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
        });
        let grad = p.grad.data().to_vec();
        for (i, (w, g)) in p.value.data_mut().iter_mut().zip(&grad).enumerate() {
            m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
            m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
            let mhat = m.first[i] / c1;
            let vhat = m.second[i] / c2;
            *w -= lr * mhat / (vhat.sqrt() + epsilon);
        }
    }
}

/// Rescales trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for p in params.iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
    norm
}
