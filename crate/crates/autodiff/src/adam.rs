use crate::error::{AdError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Bias-corrected Adam state over a parameter store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let first = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect::<Vec<_>>();
        let second = first.clone();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: first,
            second_moment: second,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn from_parts(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        step: u64,
        first_moment: Vec<Tensor>,
        second_moment: Vec<Tensor>,
    ) -> Self {
        AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step,
            first_moment,
            second_moment,
        }
    }
}

/// One bias-corrected Adam update. Gradients must line up with the store's
/// iteration order. Rejects the whole step if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    assert_eq!(
        grads.len(),
        params.len(),
        "one gradient tensor per parameter"
    );
    for ((name, param), grad) in params.iter().zip(grads) {
        if param.shape() != grad.shape() {
            return Err(AdError::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(AdError::NonFiniteGradient(name.to_string()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (_, param)) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = param.data_mut();
        for k in 0..p.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm_sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
