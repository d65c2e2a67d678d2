use indexmap::IndexMap;

use super::ParameterStore;
use crate::error::{Error, Result};

/// Adam hyperparameters plus per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self::with_betas(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            moments: IndexMap::new(),
        }
    }
}

/// One bias-corrected Adam update over every unfrozen parameter, then clears all
/// gradients. Every unfrozen parameter must carry a gradient.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    if let Some((name, _)) = store
        .iter()
        .find(|(name, p)| !store.is_frozen(name) && p.grad.is_none())
    {
        return Err(Error::Contract(format!(
            "parameter `{name}` has no gradient at optimizer step"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);

    let frozen: Vec<String> = store.frozen_names().map(str::to_string).collect();
    for (name, p) in store.iter_mut() {
        if frozen.iter().any(|f| f == name) {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let n = p.value.numel();
        let m = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
        });
        if m.first.len() != n {
            return Err(Error::dim("adam_step", p.value.shape(), &[m.first.len()]));
        }
        let value = p.value.data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            m.first[i] = b1 * m.first[i] + (1.0 - b1) * g;
            m.second[i] = b2 * m.second[i] + (1.0 - b2) * g * g;
            let mhat = m.first[i] / bc1;
            let vhat = m.second[i] / bc2;
            value[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    store.clear_grads();
    Ok(())
}
