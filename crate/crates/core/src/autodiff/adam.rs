use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{ModelParams, ParamId};
use super::AutodiffError;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// Rescales the gradients of `ids` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ModelParams, ids: &[ParamId], max_norm: f64) -> f64 {
    let sq: f64 = ids
        .iter()
        .filter_map(|&id| params.get(id).grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for &id in ids {
            let t = params.get_mut(id);
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * factor).collect();
                t.clear_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

/// One Adam update over `ids`; clears their gradients afterwards.
pub fn adam_step(
    params: &mut ModelParams,
    ids: &[ParamId],
    state: &mut AdamState,
) -> Result<(), AutodiffError> {
    if let Some(&missing) = ids.iter().find(|&&id| params.get(id).grad().is_none()) {
        return Err(AutodiffError::MissingGrad(params.name(missing).to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, f64::from(t));
    let bc2 = 1.0 - libm::pow(state.beta2, f64::from(t));
    for &id in ids {
        let tensor = params.get_mut(id);
        let g = tensor.grad().expect("checked above").to_vec();
        let (m, v) = state
            .moments
            .entry(id)
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let data = tensor.data_mut();
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= state.learning_rate * m_hat / (libm::sqrt(v_hat) + state.epsilon);
        }
        tensor.clear_grad();
    }
    Ok(())
}
