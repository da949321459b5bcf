//! AdamW with decoupled weight decay and a linear-warmup learning rate.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParameterStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Linear ramp from 0 to `peak_lr` over the first `warmup_fraction` of steps, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        LrSchedule {
            peak_lr,
            warmup_fraction,
            total_steps,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    /// Learning rate for the 1-based optimizer step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if warm > 0 && step <= warm {
            self.peak_lr * step as f64 / warm as f64
        } else {
            self.peak_lr
        }
    }
}

/// First and second moments mirroring a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore) -> Self {
        OptimizerState {
            first: store.iter().map(|t| vec![0.0; t.numel()]).collect(),
            second: store.iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update over every tensor selected by `trainable` (all when `None`).
///
/// Returns the learning rate used.
pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    sched: &LrSchedule,
    cfg: &AdamWConfig,
    trainable: Option<&[usize]>,
) -> Result<f64> {
    if grads.grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Shape("optimizer state does not mirror parameters".into()));
    }
    let ids: Vec<usize> = match trainable {
        Some(ids) => ids.to_vec(),
        None => (0..params.len()).collect(),
    };
    for &i in &ids {
        if grads.grads[i].len() != params.tensor(i).numel() {
            return Err(Error::Shape(format!(
                "gradient for '{}' has wrong length",
                params.tensor(i).name
            )));
        }
        if grads.grads[i].iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: state.step + 1,
                what: format!("gradient of '{}'", params.tensor(i).name),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = sched.lr(state.step);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for &i in &ids {
        let g = &grads.grads[i];
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let p = &mut params.tensor_mut(i).data;
        for j in 0..p.len() {
            let mut w = p[j] as f64;
            w -= lr * cfg.weight_decay * w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w -= lr * mhat / (vhat.sqrt() + cfg.eps);
            p[j] = w as f32;
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramp() {
        let s = LrSchedule::new(5e-5, 0.1, 1000);
        assert_eq!(s.warmup_steps(), 100);
        assert!((s.lr(100) - 5e-5).abs() < 1e-18);
        assert!((s.lr(50) - 2.5e-5).abs() < 1e-18);
        assert_eq!(s.lr(1000), 5e-5);
        assert!(s.lr(1) > 0.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = ParameterStore::new();
        p.insert("w", vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let g = Gradients::zeros_like(&p);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &LrSchedule::new(1e-3, 0.1, 10), &cfg, None).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn matches_reference_update() {
        // One step by hand: m = 0.1 g, v = 0.001 g², mhat = g, vhat = g² → w -= lr·sign(g) (eps aside).
        let mut p = ParameterStore::new();
        p.insert("w", vec![2], vec![1.0, -1.0]).unwrap();
        let g = Gradients {
            grads: vec![vec![0.5, -2.0]],
        };
        let mut st = OptimizerState::new(&p);
        let sched = LrSchedule::new(0.1, 0.0, 10);
        adamw_step(&mut p, &g, &mut st, &sched, &AdamWConfig::default(), None).unwrap();
        let expect0 = (1.0 - 0.1 * 0.01 * 1.0) - 0.1 * 0.5 / (0.5 + 1e-8);
        let expect1 = (-1.0 + 0.1 * 0.01 * 1.0) + 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.get("w").unwrap().data[0] as f64 - expect0).abs() < 1e-6);
        assert!((p.get("w").unwrap().data[1] as f64 - expect1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = ParameterStore::new();
        p.insert("w", vec![1], vec![1.0]).unwrap();
        let g = Gradients {
            grads: vec![vec![f64::NAN]],
        };
        let mut st = OptimizerState::new(&p);
        let r = adamw_step(&mut p, &g, &mut st, &LrSchedule::new(0.1, 0.0, 1), &AdamWConfig::default(), None);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }
}
