//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors. Ordered so iteration (and serialization) is
/// deterministic.
pub type ParamStore = BTreeMap<String, Tensor>;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Optimizer moments and hyperparameters for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            t: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::shape(format!("adam: no parameter named {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "adam: gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for moments in [&self.m, &self.v] {
                if let Some(existing) = moments.get(name) {
                    if existing.shape() != g.shape() {
                        return Err(Error::shape(format!("adam: moment shape mismatch for {name}")));
                    }
                }
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let iter = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((p, m), v), &g) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}
