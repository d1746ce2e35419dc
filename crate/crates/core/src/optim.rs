//! Adam with linear warmup, cosine decay and global-norm clipping.

use crate::config::TrainConfig;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Learning rate at optimizer step `step` (0-based) of `total`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let t = ((step - cfg.warmup_steps.min(step)) as f64 / span as f64).min(1.0);
    let floor = cfg.lr * cfg.min_lr_ratio;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scale gradients so their global L2 norm is at most `max_norm` (0 = off).
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut [(ParamId, Tensor<F>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|&x| x.f64() * x.f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![None; params], v: vec![None; params] }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)], lr: f64) {
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(self.step));
        let c2 = F::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (F::of(lr), F::of(self.eps));
        let one = F::one();
        for (id, g) in grads {
            let (r, c) = g.shape();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(r, c));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(r, c));
            let w = store.get_mut(*id);
            for (((w, m), v), &g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { lr: 1.0, warmup_steps: 4, min_lr_ratio: 0.1, ..TrainConfig::default() };
        assert_eq!(lr_at(&cfg, 0, 20), 0.25);
        assert_eq!(lr_at(&cfg, 3, 20), 1.0);
        assert!((lr_at(&cfg, 4, 20) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 20, 20) - 0.1).abs() < 1e-12);
        assert!(lr_at(&cfg, 10, 20) < lr_at(&cfg, 6, 20));
    }

    #[test]
    fn adam_moves_against_gradient_and_zero_lr_is_noop() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(1, 2, &[1.0, 1.0]));
        let g = vec![(id, Tensor::from_f64(1, 2, &[2.0, -3.0]))];
        let mut adam = Adam::new(1);
        adam.step(&mut store, &g, 0.0);
        assert_eq!(store.get(id).data(), &[1.0, 1.0]);
        adam.step(&mut store, &g, 0.1);
        let w = store.get(id).data();
        assert!(w[0] < 1.0 && w[1] > 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![(ParamId(0), Tensor::<f64>::from_f64(1, 2, &[3.0, 4.0]))];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-12);
    }
}
