use std::collections::BTreeMap;

use super::config::{OptimConfig, OptimizerKind};
use crate::nn::ParamStore;

/// First-order optimiser over named parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update. `grads` maps parameter names to gradients of
    /// matching length; parameters without a gradient are left alone.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        for (name, param) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let first = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let second = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            param
                .update(|w| {
                    for i in 0..w.len() {
                        let gi = g[i] * scale;
                        w[i] -= match c.kind {
                            OptimizerKind::Sgd => c.learning_rate * gi,
                            OptimizerKind::Momentum => {
                                first[i] = c.momentum * first[i] + gi;
                                c.learning_rate * first[i]
                            }
                            OptimizerKind::Adam => {
                                first[i] = c.beta1 * first[i] + (1.0 - c.beta1) * gi;
                                second[i] = c.beta2 * second[i] + (1.0 - c.beta2) * gi * gi;
                                let m = first[i] / (1.0 - c.beta1.powi(t));
                                let v = second[i] / (1.0 - c.beta2.powi(t));
                                c.learning_rate * m / (v.sqrt() + c.epsilon)
                            }
                        };
                    }
                })
                .expect("parameter update keeps its shape");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic(kind: OptimizerKind, lr: f64) -> f64 {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(&[3.0, -2.0]).unwrap());
        let mut opt = Optimizer::new(OptimConfig {
            kind,
            learning_rate: lr,
            ..Default::default()
        });
        for _ in 0..300 {
            let x = store.get("x").unwrap().data().to_vec();
            let g: BTreeMap<String, Vec<f64>> = [("x".to_string(), x.iter().map(|v| 2.0 * v).collect())].into();
            opt.apply(&mut store, &g);
        }
        store.get("x").unwrap().data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn all_kinds_minimise_a_quadratic() {
        assert!(quadratic(OptimizerKind::Sgd, 0.1) < 1e-10);
        assert!(quadratic(OptimizerKind::Momentum, 0.02) < 1e-6);
        assert!(quadratic(OptimizerKind::Adam, 0.05) < 1e-3);
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(&[1.0]).unwrap());
        let mut opt = Optimizer::new(OptimConfig {
            learning_rate: 0.5,
            ..Default::default()
        });
        opt.apply(&mut store, &[("w".to_string(), vec![4.0])].into());
        assert_eq!(store.get("w").unwrap().data(), &[-1.0]);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(&[0.0, 0.0]).unwrap());
        let mut opt = Optimizer::new(OptimConfig {
            learning_rate: 1.0,
            clip_norm: Some(1.0),
            ..Default::default()
        });
        opt.apply(&mut store, &[("w".to_string(), vec![30.0, 40.0])].into());
        let w = store.get("w").unwrap().data();
        assert!((w[0] + 0.6).abs() < 1e-15 && (w[1] + 0.8).abs() < 1e-15);
    }
}
