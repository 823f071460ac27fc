//! Adam optimizer with L2 weight decay and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lr <= 0.0 {
            return Err("learning rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err("betas must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// lr(epoch) = lr₀ · (1 + cos(π · epoch / total)) / 2
pub fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    base * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step_count: u64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        Adam {
            cfg,
            m: store.zero_grads(),
            v: store.zero_grads(),
            step_count: 0,
        }
    }

    /// One update with externally scheduled learning rate. Weight decay is
    /// folded into the gradient (L2 style).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step_count += 1;
        let (b1, b2) = self.cfg.betas;
        let bias1 = 1.0 - b1.powi(self.step_count as i32);
        let bias2 = 1.0 - b2.powi(self.step_count as i32);
        for pid in store.param_ids().collect::<Vec<_>>() {
            let i = pid.index();
            let theta = store.value_mut(pid);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((t, g0), (m, v)) in theta
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g0 + self.cfg.weight_decay * *t;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *t -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn cosine_closed_form_points() {
        let lr0 = 1e-3;
        assert!((cosine_lr(lr0, 0, 30) - lr0).abs() < 1e-18);
        assert!((cosine_lr(lr0, 15, 30) - lr0 / 2.0).abs() < 1e-12);
        assert!(cosine_lr(lr0, 30, 30).abs() < 1e-18);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let mut opt = Adam::new(OptimizerConfig::default(), &store);
        let grads = vec![Tensor::from_vec(vec![0.5, 0.5, 0.5])];
        opt.step(&mut store, &grads, 0.0);
        let id = store.param_ids().next().unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (w - 3)²
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_vec(vec![0.0]));
        let mut opt = Adam::new(
            OptimizerConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
            &store,
        );
        let id = store.param_ids().next().unwrap();
        for _ in 0..500 {
            let w = store.value(id).data()[0];
            let grads = vec![Tensor::from_vec(vec![2.0 * (w - 3.0)])];
            opt.step(&mut store, &grads, 0.1);
        }
        let w = store.value(id).data()[0];
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn weight_decay_shrinks_unused_weights() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_vec(vec![5.0]));
        let mut opt = Adam::new(
            OptimizerConfig {
                lr: 0.01,
                weight_decay: 0.1,
                ..OptimizerConfig::default()
            },
            &store,
        );
        let id = store.param_ids().next().unwrap();
        for _ in 0..200 {
            let grads = vec![Tensor::from_vec(vec![0.0])];
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.value(id).data()[0].abs() < 5.0 * 0.9);
    }
}
