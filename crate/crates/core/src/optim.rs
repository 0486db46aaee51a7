//! Adam with bias-corrected moments and per-parameter learning rates.

use crate::autodiff::Gradients;
use crate::error::TrainError;
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState<F = f32> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros: Vec<_> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<F> {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<F> {
        &self.v[i]
    }
}

/// One Adam update. `lr_for(i)` gives the learning rate of parameter slot `i`;
/// a rate of zero leaves that parameter (and its moments) untouched.
///
/// Gradients are checked for NaN/infinity before anything is modified.
pub fn adam_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    lr_for: impl Fn(usize) -> f64,
) -> Result<(), TrainError> {
    if let Some(name) = grads.first_non_finite() {
        return Err(TrainError::NonFinite {
            what: "gradient",
            step: state.step as usize,
            detail: format!("parameter `{name}`"),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (F::lit(state.beta1), F::lit(state.beta2));
    let (one_b1, one_b2) = (F::lit(1.0 - state.beta1), F::lit(1.0 - state.beta2));
    let eps = F::lit(state.eps);
    for i in 0..params.len() {
        let lr = lr_for(i);
        if lr == 0.0 {
            continue;
        }
        // lr·m̂/(√v̂+ε) = (lr/bc1)·m / (√v/√bc2 + ε)
        let step_size = F::lit(lr / bc1);
        let inv_sqrt_bc2 = F::lit(1.0 / bc2.sqrt());
        let g = grads.at(i).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.at_mut(i).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}
