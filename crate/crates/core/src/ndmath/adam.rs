use super::scalar::Scalar;
use super::tensor::{Gradients, ParamStore};
use super::MathError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::with_lr(1e-3)
    }
}

/// First/second moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<S>> = params.params().iter().map(|p| vec![S::zero(); p.value.len()]).collect();
        OptimizerState { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn first_moment(&self) -> &[Vec<S>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<S>] {
        &self.v
    }
}

/// One bias-corrected Adam update. Any NaN/Inf gradient aborts the step
/// before anything is modified.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, grads: &Gradients<S>, state: &mut OptimizerState<S>) -> Result<(), MathError> {
    for (p, g) in params.params().iter().zip(grads.bufs()) {
        if g.len() != p.value.len() {
            return Err(MathError::ShapeMismatch { expected: format!("{} gradients for {}", p.value.len(), p.name), found: g.len().to_string() });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(MathError::NonFiniteGradient { param: p.name.clone() });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
    let (ob1, ob2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
    let step_size = S::of(c.lr / bc1);
    let inv_bc2 = S::of(1.0 / bc2);
    let eps = S::of(c.eps);
    for ((p, g), (m, v)) in params.params_mut().iter_mut().zip(grads.bufs()).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + ob1 * g[i];
            v[i] = b2 * v[i] + ob2 * g[i] * g[i];
            let denom = (v[i] * inv_bc2).sqrt() + eps;
            p.value[i] = p.value[i] - step_size * m[i] / denom;
        }
    }
    Ok(())
}
