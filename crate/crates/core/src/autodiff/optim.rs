use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Named parameters plus Adam state. Iteration order is by name, so any
/// traversal of the store is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.moments.insert(
            name.clone(),
            Moments {
                first: Tensor::zeros(value.shape()),
                second: Tensor::zeros(value.shape()),
            },
        );
        self.params.insert(name, value);
    }

    /// Overwrites an existing parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.moments.get(name).map(|m| &m.first)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.moments.get(name).map(|m| &m.second)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies parameter values (not optimizer state) from another store.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (name, value) in &other.params {
            if let Some(slot) = self.params.get_mut(name) {
                slot.clone_from(value);
            }
        }
    }

    /// Parameter values only, with fresh optimizer state.
    pub fn values_only(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.params {
            out.insert(k.clone(), v.clone());
        }
        out
    }

    /// Merges another store's parameters into this one.
    pub fn extend(&mut self, other: ParamStore) {
        for (k, v) in other.params {
            self.insert(k, v);
        }
    }

    /// L2 norms per parameter, used for divergence diagnostics.
    pub fn norms(&self) -> BTreeMap<String, f64> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.norm_sq().sqrt()))
            .collect()
    }

    /// Adds a uniform `[-bound, bound]` matrix/vector initialised parameter.
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    /// One Adam step with bias correction. Parameters absent from `grads`
    /// are left untouched, but the step counter advances once per call.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("validated");
            let m = self.moments.get_mut(name).expect("moments follow params");
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.first.data_mut())
                .zip(m.second.data_mut())
                .zip(g.data())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
