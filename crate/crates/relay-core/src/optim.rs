//! Adam with linear warmup.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Optional global-norm gradient clip; off by default.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            warmup_steps: 200,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: None,
        }
    }
}

/// Linear ramp from 0 at step 0 to `base_lr` at `warmup_steps`, constant after.
pub fn lr_schedule(step: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

/// First/second moment state per parameter plus the step counter.
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: usize,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.step, self.cfg.base_lr, self.cfg.warmup_steps)
    }

    /// One update over the given trainable parameters; gradients must be
    /// populated. Clears nothing: callers zero grads when they choose.
    pub fn step(&mut self, store: &mut ParamStore<T>, params: &[ParamId]) -> Result<f64> {
        self.step += 1;
        let lr = lr_schedule(self.step, self.cfg.base_lr, self.cfg.warmup_steps);

        let mut clip_scale = 1.0f64;
        if let Some(max_norm) = self.cfg.clip_norm {
            let mut sq = 0.0f64;
            for &id in params {
                if let Some(g) = store.grad(id) {
                    for &v in g.data() {
                        let v = v.as_f64();
                        sq += v * v;
                    }
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                clip_scale = max_norm / norm;
            }
        }

        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let cs = T::from_f64(clip_scale);

        for &id in params {
            if !store.is_trainable(id) {
                return Err(Error::contract(format!(
                    "adam step on frozen parameter {:?}",
                    store.name(id)
                )));
            }
            let grad = match store.grad(id) {
                Some(g) => g.clone(),
                None => {
                    return Err(Error::contract(format!(
                        "missing gradient on trainable parameter {:?}",
                        store.name(id)
                    )))
                }
            };
            if self.moments.len() <= id.0 {
                self.moments.resize_with(id.0 + 1, || None);
            }
            let shape = grad.shape().to_vec();
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape)));
            let value = store.value_mut(id);
            for i in 0..grad.numel() {
                let g = grad.data()[i] * cs;
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mh = mi / bc1;
                let vh = vi / bc2;
                value.data_mut()[i] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl_store() -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("x", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap(), true)
            .unwrap();
        (s, id)
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(2000, 1e-5, 2000), 1e-5);
        assert_eq!(lr_schedule(1000, 1e-5, 2000), 5e-6);
        assert_eq!(lr_schedule(4000, 1e-5, 2000), 1e-5);
        assert_eq!(lr_schedule(0, 1e-5, 2000), 0.0);
        assert_eq!(lr_schedule(0, 1e-5, 0), 1e-5);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let (mut s, id) = bowl_store();
        let mut adam = Adam::new(AdamConfig {
            base_lr: 0.1,
            warmup_steps: 0,
            ..Default::default()
        });
        s.accumulate_grad(id, &Tensor::zeros(vec![1, 2]));
        adam.step(&mut s, &[id]).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = bowl_store();
        let mut adam = Adam::new(AdamConfig {
            base_lr: 0.1,
            warmup_steps: 0,
            ..Default::default()
        });
        let g = Tensor::new(vec![1, 2], vec![2.0, -4.0]).unwrap();
        s.accumulate_grad(id, &g);
        adam.step(&mut s, &[id]).unwrap();
        // bias-corrected first step is -lr * sign(g) up to eps rounding
        assert!((s.value(id).data()[0] - 0.9).abs() < 1e-7);
        assert!((s.value(id).data()[1] - (-1.9)).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let (mut s, id) = bowl_store();
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut s, &[id]).is_err());
    }

    #[test]
    fn ten_steps_on_quadratic_bowl_match_scripted_reference() {
        // Independent scalar reference for f(x) = sum(x^2), grad = 2x.
        let (b1, b2, eps, lr) = (0.9f64, 0.999, 1e-8, 0.1);
        let mut xr = [1.0f64, -2.0];
        let mut mr = [0.0f64; 2];
        let mut vr = [0.0f64; 2];
        let mut trajectory = Vec::new();
        for t in 1..=10 {
            let g = [2.0 * xr[0], 2.0 * xr[1]];
            for i in 0..2 {
                mr[i] = b1 * mr[i] + (1.0 - b1) * g[i];
                vr[i] = b2 * vr[i] + (1.0 - b2) * g[i] * g[i];
                let mh = mr[i] / (1.0 - b1.powi(t));
                let vh = vr[i] / (1.0 - b2.powi(t));
                xr[i] -= lr * mh / (vh.sqrt() + eps);
            }
            trajectory.push(xr);
        }

        let (mut s, id) = bowl_store();
        let mut adam = Adam::new(AdamConfig {
            base_lr: lr,
            warmup_steps: 0,
            ..Default::default()
        });
        for step in 0..10 {
            s.zero_grads();
            let x = s.value(id).clone();
            s.accumulate_grad(id, &x.scale(2.0));
            adam.step(&mut s, &[id]).unwrap();
            for i in 0..2 {
                assert!(
                    (s.value(id).data()[i] - trajectory[step][i]).abs() < 1e-6,
                    "step {step} diverged from reference"
                );
            }
        }
        // Frozen endpoint from an externally scripted run of the same recipe.
        assert!((s.value(id).data()[0] - 0.076249155607).abs() < 1e-9);
        assert!((s.value(id).data()[1] - (-1.024586837825)).abs() < 1e-9);
    }

    #[test]
    fn warmup_scales_first_update() {
        let (mut s, id) = bowl_store();
        let mut adam = Adam::new(AdamConfig {
            base_lr: 0.1,
            warmup_steps: 10,
            ..Default::default()
        });
        let g = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        s.accumulate_grad(id, &g);
        let lr = adam.step(&mut s, &[id]).unwrap();
        assert!((lr - 0.01).abs() < 1e-12);
        assert!((s.value(id).data()[0] - 0.99).abs() < 1e-7);
    }
}
