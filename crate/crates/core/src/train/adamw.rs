//! AdamW with decoupled weight decay, plus global-norm gradient clipping.
//!
//! Semantics follow the standard decoupled formulation: decay is applied to
//! the parameter directly (`p *= 1 − lr·wd`), then first/second moments are
//! updated and the bias-corrected step is taken. Scalar coefficients are
//! computed in f64; parameter and moment storage is f32.

use std::collections::HashMap;

use super::TrainConfig;

/// Optimizer hyperparameters (a subset of [`TrainConfig`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(cfg: &TrainConfig) -> Self {
        AdamWConfig {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// AdamW state: step counter plus per-parameter moment vectors keyed by name.
#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one optimizer step to every `(name, params, grad)` triple.
    ///
    /// At `lr == 0` the moments and step counter still advance but the
    /// parameter bytes are left untouched, making the zero-learning-rate
    /// limit a bitwise no-op on the model.
    pub fn step(&mut self, updates: &mut [(&str, &mut [f32], &[f32])]) {
        self.t += 1;
        let bc1 = 1.0 - f64::from(self.cfg.beta1).powi(self.t as i32);
        let bc2 = 1.0 - f64::from(self.cfg.beta2).powi(self.t as i32);
        let step_size = (f64::from(self.cfg.lr) / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay_factor = 1.0 - self.cfg.lr * self.cfg.weight_decay;
        let frozen = self.cfg.lr == 0.0;

        for (name, params, grad) in updates.iter_mut() {
            assert_eq!(params.len(), grad.len(), "grad length mismatch for {name}");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; params.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; params.len()]);
            assert_eq!(m.len(), params.len(), "stale optimizer state for {name}");

            if !frozen && decay_factor != 1.0 {
                for p in params.iter_mut() {
                    *p *= decay_factor;
                }
            }
            for i in 0..params.len() {
                let g = grad[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                if !frozen {
                    let denom = v[i].sqrt() / bc2_sqrt + self.cfg.eps;
                    params[i] -= step_size * m[i] / denom;
                }
            }
        }
    }
}

/// Scales all gradients so their joint Euclidean norm does not exceed
/// `max_norm`; returns the pre-clip norm. The norm is accumulated in f64 in
/// slice order, so the result is deterministic for a fixed ordering.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f64 {
    let mut sum_sq = 0.0f64;
    for g in grads.iter() {
        for &x in g {
            sum_sq += f64::from(x) * f64::from(x);
        }
    }
    let norm = sum_sq.sqrt();
    let coef = f64::from(max_norm) / (norm + 1e-6);
    if coef < 1.0 {
        let coef = coef as f32;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= coef;
            }
        }
    }
    norm
}
