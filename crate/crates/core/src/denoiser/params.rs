use std::collections::BTreeMap;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

/// Named trainable matrices, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Scaled-normal weight with `std = gain / sqrt(fan_in)`.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) {
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        self.insert(
            format!("{name}.w"),
            Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng)),
        );
        self.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
    }

    pub fn init_zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{name}.w"), Array2::zeros((fan_in, fan_out)));
        self.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adam {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>, cfg: &AdamConfig) {
        self.step += 1;
        let norm = grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .map
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .map
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *p -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new();
        let cfg = AdamConfig {
            lr: 0.1,
            clip_norm: 0.0,
            ..Default::default()
        };
        for _ in 0..500 {
            let g: BTreeMap<_, _> = [("x".to_string(), params.get("x").unwrap() * 2.0)].into();
            opt.update(&mut params, &g, &cfg);
        }
        assert!(params.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_step_size_freezes_parameters() {
        let mut params = ParamStore::new();
        params.insert("x", array![[1.5]]);
        let before = params.clone();
        let mut opt = Adam::new();
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        let g: BTreeMap<_, _> = [("x".to_string(), array![[4.0]])].into();
        opt.update(&mut params, &g, &cfg);
        assert_eq!(params, before);
    }
}
