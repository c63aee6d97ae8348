//! Adam without weight decay, and the learning-rate schedule.

use crate::model::Parameters;
use crate::scalar::Scalar;
use crate::train::backward::Gradients;
use crate::train::config::TrainConfig;

/// Constant `init_lr` through warmup, then exponential decay that lands on
/// `end_lr` at the last step.
pub fn lr_at(step: usize, tc: &TrainConfig) -> f64 {
    if step < tc.warmup_steps {
        return tc.init_lr;
    }
    let span = tc.total_steps.saturating_sub(tc.warmup_steps + 1);
    if span == 0 || step >= tc.total_steps - 1 {
        return tc.end_lr;
    }
    let frac = (step - tc.warmup_steps) as f64 / span as f64;
    tc.init_lr * (tc.end_lr / tc.init_lr).powf(frac)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Global L2 norm of all gradient entries.
pub fn grad_norm<T: Scalar>(grads: &Gradients<T>) -> f64 {
    let mut s = 0.0;
    for t in grads.tensors() {
        for &g in t.data {
            s += g.f64() * g.f64();
        }
    }
    s.sqrt()
}

/// Rescales `grads` so its global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for t in grads.tensors_mut() {
            for g in t.data.iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() / (T::one() - b1.powi(t));
    let c2 = T::one() / (T::one() - b2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
            v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
            let mhat = m.data[i] * c1;
            let vhat = v.data[i] * c2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::init_random;
    use crate::model::ModelConfig;

    fn schedule() -> TrainConfig {
        TrainConfig {
            init_lr: 6e-4,
            end_lr: 1e-5,
            warmup_steps: 10,
            total_steps: 100,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_shape() {
        let tc = schedule();
        assert_eq!(lr_at(0, &tc), 6e-4);
        assert!((0..10).all(|s| lr_at(s, &tc) == 6e-4));
        assert!(((lr_at(99, &tc) - 1e-5) / 1e-5).abs() <= 1e-12);
        for s in 10..99 {
            assert!(lr_at(s + 1, &tc) <= lr_at(s, &tc));
        }
        // Geometric: equal ratios between consecutive decayed steps.
        let r1 = lr_at(21, &tc) / lr_at(20, &tc);
        let r2 = lr_at(71, &tc) / lr_at(70, &tc);
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn warmup_up_to_last_step() {
        let tc = TrainConfig {
            warmup_steps: 4,
            total_steps: 5,
            ..schedule()
        };
        assert_eq!(lr_at(3, &tc), tc.init_lr);
        assert_eq!(lr_at(4, &tc), tc.end_lr);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let m = init_random::<f64>(&ModelConfig::new(8, 4, 1, 8), 1, 0.5).unwrap();
        let mut p = m.params.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-2, &AdamConfig::default());
        assert_eq!(p, m.params);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let m = init_random::<f64>(&ModelConfig::new(8, 4, 1, 8), 1, 0.5).unwrap();
        let mut p = m.params.clone();
        let mut g = p.zeros_like();
        for (k, t) in g.tensors_mut().into_iter().enumerate() {
            for (i, x) in t.data.iter_mut().enumerate() {
                *x = ((k * 31 + i) as f64 * 0.77).sin() * 10f64.powi((i % 5) as i32 - 2);
            }
        }
        let cfg = AdamConfig::default();
        let lr = 1e-3;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, lr, &cfg);
        for ((new, old), gt) in p.tensors().iter().zip(m.params.tensors()).zip(g.tensors()) {
            for i in 0..new.data.len() {
                let gi = gt.data[i];
                let want = old.data[i] - lr * gi / (gi.abs() + cfg.eps);
                assert!((new.data[i] - want).abs() < 1e-15, "{}", new.name);
            }
        }
    }

    #[test]
    fn repeated_steps_are_deterministic() {
        let m = init_random::<f64>(&ModelConfig::new(8, 4, 1, 8), 2, 0.5).unwrap();
        let run = || {
            let mut p = m.params.clone();
            let mut st = AdamState::new(&p);
            let g = m.params.clone();
            for _ in 0..2 {
                adam_step(&mut p, &g, &mut st, 1e-3, &AdamConfig::default());
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping() {
        let m = init_random::<f64>(&ModelConfig::new(8, 4, 1, 8), 2, 0.5).unwrap();
        let mut g = m.params.clone();
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }
}
