//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First and second moments for every parameter plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Zero moments for every parameter in `params`.
    pub fn for_params(params: &ParameterSet) -> Self {
        let mut s = AdamState::default();
        for (name, t) in params.iter() {
            let z = Tensor::zeros(t.shape());
            s.moments.insert(name.clone(), (z.clone(), z));
        }
        s
    }
}

/// One Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::contract("adam_step", format!("lr {lr} must be > 0")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        p.ensure_same_shape(g, "adam_step")?;
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
        p.ensure_same_shape(m, "adam_step")?;
        let (pd, gd) = (p.data_mut(), g.data());
        for (i, (mi, vi)) in m.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            *mi = b1 * *mi + (1.0 - b1) * gd[i];
            *vi = b2 * *vi + (1.0 - b2) * gd[i] * gd[i];
            pd[i] -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}
