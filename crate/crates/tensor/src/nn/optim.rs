use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, v)| Tensor::zeros(v.shape().to_vec())).collect();
        Self { config, first: zeros.clone(), second: zeros, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr`; `grads` is in store order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = T::from_f64_lossy(lr / bc1);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one, wd, eps) = (T::one(), T::from_f64_lossy(c.weight_decay), T::from_f64_lossy(c.eps));
        let sqrt_bc2 = T::from_f64_lossy(bc2.sqrt());
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let g = &grads[i];
            assert_eq!(param.shape(), g.shape(), "gradient shape for parameter {i}");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &gv), mv), vv) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gd = gv + wd * *p;
                *mv = b1 * *mv + (one - b1) * gd;
                *vv = b2 * *vv + (one - b2) * gd * gd;
                let denom = vv.sqrt() / sqrt_bc2 + eps;
                *p -= step_size * *mv / denom;
            }
        }
    }
}

/// Cosine decay from `base_lr` to `min_lr` over `total_steps` updates.
///
/// Step `0` uses `base_lr` and step `total_steps - 1` uses `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineAnnealing {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl CosineAnnealing {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.base_lr;
        }
        let progress = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = CosineAnnealing { base_lr: 3e-4, min_lr: 0.0, total_steps: 100 };
        assert_eq!(s.lr_at(0), 3e-4);
        assert!(s.lr_at(99) <= 1e-12);
        let mid = CosineAnnealing { base_lr: 1.0, min_lr: 0.0, total_steps: 3 }.lr_at(1);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_monotone() {
        let s = CosineAnnealing { base_lr: 1.0, min_lr: 0.0, total_steps: 50 };
        for i in 1..50 {
            assert!(s.lr_at(i) <= s.lr_at(i - 1));
        }
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(id).data().iter().map(|v| 2.0 * (v - 1.0)).collect();
            opt.step(&mut store, &[Tensor::new([2], g).unwrap()], 0.01);
        }
        for v in store.get(id).data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // with bias correction the first step is lr * sign(g)
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new([2], vec![0.0, 0.0]).unwrap());
        let mut opt = Adam::new(&store, AdamConfig { eps: 0.0, ..AdamConfig::default() });
        opt.step(&mut store, &[Tensor::new([2], vec![5.0, -0.1]).unwrap()], 0.1);
        let d = store.get(id).data();
        assert!((d[0] + 0.1).abs() < 1e-12 && (d[1] - 0.1).abs() < 1e-12);
    }
}
