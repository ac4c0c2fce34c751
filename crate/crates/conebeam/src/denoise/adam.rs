//! Adam with bias correction, operating directly on denoiser parameters.

use serde::{Deserialize, Serialize};

use super::unet::{DenoiserParams, Gradients};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates, one pair of buffers per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        let mut m = Vec::new();
        for c in &params.convs {
            m.push(vec![0.0; c.weights.len()]);
            m.push(vec![0.0; c.bias.len()]);
        }
        Self { step: 0, v: m.clone(), m }
    }
}

/// One Adam update; increments the step counter.
pub fn adam_step(
    params: &mut DenoiserParams,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.convs.len() != params.convs.len() || state.m.len() != 2 * params.convs.len() {
        return Err(Error::DimMismatch(format!(
            "adam_step: {} gradient tensors / {} moment buffers for {} layers",
            grads.convs.len(),
            state.m.len(),
            params.convs.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);

    for (li, (p, g)) in params.convs.iter_mut().zip(&grads.convs).enumerate() {
        if p.weights.len() != g.weights.len() || p.bias.len() != g.bias.len() {
            return Err(Error::DimMismatch(format!("adam_step: layer {li} shape mismatch")));
        }
        for (slot, (pv, gv)) in [(&mut p.weights, &g.weights), (&mut p.bias, &g.bias)]
            .into_iter()
            .enumerate()
        {
            let m = &mut state.m[2 * li + slot];
            let v = &mut state.v[2 * li + slot];
            for i in 0..pv.len() {
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gv[i];
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gv[i] * gv[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pv[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
            }
        }
    }
    Ok(())
}
