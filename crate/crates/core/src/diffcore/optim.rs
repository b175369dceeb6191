use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};

use super::params::ParamStore;
use super::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// First/second moment buffers for every parameter of a store.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |p: &super::params::Parameter<T>| vec![T::zero(); p.tensor.numel()];
        Self {
            config,
            step: 0,
            m: store.params().iter().map(zeros).collect(),
            v: store.params().iter().map(zeros).collect(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimState<T>) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(usage_err!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        ));
    }
    for (i, p) in store.params().iter().enumerate() {
        if store.grad(super::params::ParamId(i)).is_none() {
            return Err(usage_err!("parameter {} has no gradient", p.name));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let step_size = T::of(c.lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(c.eps);
    for i in 0..store.len() {
        let id = super::params::ParamId(i);
        let grad = store.grad(id).expect("checked above").to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = store.get_mut(id).tensor.data_mut();
        for k in 0..data.len() {
            let g = grad[k];
            m[k] = b1 * m[k] + one_b1 * g;
            v[k] = b2 * v[k] + one_b2 * g * g;
            data[k] -= step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
