//! AdamW, the warmup/linear-decay learning-rate schedule and gradient clipping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{L2dError, Result};
use crate::numerics::{Gradients, Scalar};
use crate::params::{Bound, ParamStore};

/// Linear warmup to `peak` followed by linear decay to `floor` at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, floor: f64, warmup: usize, total_steps: usize) -> Result<Self> {
        if !(peak >= floor && floor > 0.0) {
            return Err(L2dError::Config(format!(
                "learning rates need peak >= floor > 0 (peak {peak}, floor {floor})"
            )));
        }
        if warmup >= total_steps {
            return Err(L2dError::Config(format!(
                "warmup ({warmup}) must be shorter than the run ({total_steps} steps)"
            )));
        }
        Ok(Self {
            peak,
            floor,
            warmup,
            total_steps,
        })
    }

    /// Learning rate used at 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let last = self.total_steps - 1;
        if last <= self.warmup {
            return self.peak;
        }
        let frac = ((step - self.warmup) as f64 / (last - self.warmup) as f64).min(1.0);
        self.peak + (self.floor - self.peak) * frac
    }
}

/// Gradients of the trainable parameters of one store, keyed by name.
pub struct ParamGrads<F> {
    pub grads: Vec<(String, Vec<F>)>,
}

impl<F: Scalar> ParamGrads<F> {
    pub fn collect(store: &ParamStore<F>, bound: &Bound, gradients: &Gradients<F>) -> Self {
        let grads = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let g = gradients
                    .get(bound.var(name))
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![F::zero(); p.value.len()]);
                (name.to_string(), g)
            })
            .collect();
        Self { grads }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales to `max_norm` when the global norm exceeds it; returns the
    /// norm before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = F::lit(max_norm / norm);
            for (_, g) in &mut self.grads {
                for x in g.iter_mut() {
                    *x *= s;
                }
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }
}

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
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW<F> {
    cfg: AdamWConfig,
    moments: HashMap<String, (Vec<F>, Vec<F>)>,
    t: i32,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            moments: HashMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, g) in &grads.grads {
            let Some(param) = store.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![F::zero(); g.len()], vec![F::zero(); g.len()]));
            let w = param.value.data_mut();
            for i in 0..g.len() {
                let gi = g[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = F::lit(mi);
                v[i] = F::lit(vi);
                let update = (mi / c1) / ((vi / c2).sqrt() + self.cfg.eps);
                let wi = w[i].as_f64();
                w[i] = F::lit(wi - lr * (update + self.cfg.weight_decay * wi));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_reference_points() {
        let s = LrSchedule::new(1e-4, 1e-6, 100, 1000).unwrap();
        assert!((s.lr(0) - 1e-6).abs() < 1e-18);
        assert!((s.lr(100) - 1e-4).abs() < 1e-18);
        assert!((s.lr(999) - 1e-6).abs() < 1e-18);
        assert!(s.lr(500) < s.lr(100) && s.lr(500) > s.lr(999));
    }

    #[test]
    fn schedule_rejects_bad_configs() {
        assert!(LrSchedule::new(1e-4, 1e-6, 100, 100).is_err());
        assert!(LrSchedule::new(1e-6, 1e-4, 10, 100).is_err());
        assert!(LrSchedule::new(1e-4, 0.0, 10, 100).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        use crate::numerics::Tensor;
        use crate::params::ParamRole;
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(&[2], 1.0), ParamRole::New, true);
        let grads = ParamGrads {
            grads: vec![("w".to_string(), vec![0.5, -2.0])],
        };
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store, &grads, 0.1);
        let w = store.tensor("w").data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = ParamGrads::<f64> {
            grads: vec![("a".into(), vec![3.0]), ("b".into(), vec![4.0])],
        };
        assert_eq!(g.clip(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
