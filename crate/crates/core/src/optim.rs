//! Adam with bias correction, inverse-square-root learning-rate schedule,
//! and optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter. Moments are allocated on the
/// first step from the parameter shapes.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`.
/// A parameter without a gradient is treated as having a zero gradient.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || params.iter().zip(&state.m).any(|(p, m)| p.numel() != m.len()) {
        return Err(Error::shape("adam_step", "optimizer state does not match parameters"));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((param, m), v) in params.into_iter().zip(&mut state.m).zip(&mut state.v) {
        let Some(grad) = param.grad().map(<[f64]>::to_vec) else {
            // Zero gradient: moments decay, parameter moves only by the decayed moment.
            for ((w, m), v) in param.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                *m *= beta1;
                *v *= beta2;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            continue;
        };
        for (((w, m), v), g) in param.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grad) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> Result<f64> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad().map(|g| g.iter().map(|v| v * scale).collect::<Vec<_>>()) {
                p.zero_grad();
                p.accumulate_grad(&g)?;
            }
        }
    }
    Ok(norm)
}

/// Linear warmup followed by inverse-square-root decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    /// `base_lr · min(step · warmup^-1.5, step^-0.5)`, for `step ≥ 1`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step < 1 {
            return Err(Error::InvalidArgument("schedule steps start at 1".into()));
        }
        let s = step as f64;
        let w = self.warmup_steps.max(1) as f64;
        Ok(self.base_lr * (s * w.powf(-1.5)).min(s.powf(-0.5)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(values: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::new(vec![values.len()], values.to_vec()).unwrap().with_requires_grad(true);
        t.accumulate_grad(grad).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = with_grad(&[0.3, -1.2], &[0.0, 0.0]);
        let mut state = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step([&mut p], &mut state, 0.1).unwrap();
        }
        assert_eq!(p.data(), &[0.3, -1.2]);
        assert_eq!(state.step(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 at step 1, so Δθ = -lr / (1 + eps).
        let mut p = with_grad(&[0.0], &[1.0]);
        let mut state = AdamState::new(AdamConfig::default());
        adam_step([&mut p], &mut state, 0.1).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_histories_give_identical_updates() {
        let mut a = with_grad(&[1.0], &[0.5]);
        let mut b = with_grad(&[1.0, 1.0], &[0.5, 0.5]);
        let mut sa = AdamState::new(AdamConfig::default());
        let mut sb = AdamState::new(AdamConfig::default());
        for g in [0.5, -0.25, 2.0] {
            a.zero_grad();
            a.accumulate_grad(&[g]).unwrap();
            b.zero_grad();
            b.accumulate_grad(&[g, g]).unwrap();
            adam_step([&mut a], &mut sa, 0.01).unwrap();
            adam_step([&mut b], &mut sb, 0.01).unwrap();
        }
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert_eq!(b.data()[0].to_bits(), b.data()[1].to_bits());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = with_grad(&[0.0], &[1.0]);
        let mut state = AdamState::new(AdamConfig::default());
        adam_step([&mut p], &mut state, 0.1).unwrap();
        let mut q = with_grad(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(adam_step([&mut q], &mut state, 0.1).is_err());
    }

    #[test]
    fn schedule_branches_meet_at_warmup() {
        let s = LrSchedule {
            base_lr: 0.03,
            warmup_steps: 5000,
        };
        let at = |step| s.lr_at(step).unwrap();
        assert!((at(5000) - 0.03 / 5000f64.sqrt()).abs() < 1e-15);
        assert!((at(20_000) - 0.03 / (2.0 * 5000f64.sqrt())).abs() < 1e-15);
        assert!((at(1) - 0.03 * 5000f64.powf(-1.5)).abs() < 1e-20);
        assert!((at(1) - 8.485e-8).abs() < 1e-10);
        assert!(s.lr_at(0).is_err());
    }

    #[test]
    fn schedule_rises_then_decays() {
        let s = LrSchedule {
            base_lr: 0.03,
            warmup_steps: 100,
        };
        let lrs: Vec<f64> = (1..=1000).map(|t| s.lr_at(t).unwrap()).collect();
        assert!(lrs.iter().all(|&l| l > 0.0));
        assert!(lrs[..100].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[99..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = with_grad(&[0.0, 0.0], &[3.0, 4.0]);
        let norm = clip_global_norm([&mut a], 1.0).unwrap();
        assert_eq!(norm, 5.0);
        let g = a.grad().unwrap();
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-12);
    }
}
