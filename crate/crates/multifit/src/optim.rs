//! Adam-style optimizer with decoupled weight decay and a beta1 that the
//! learning-rate schedule drives per step (cyclical momentum).

use crate::error::NumericsError;
use crate::tensor::Tensor;

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct MomentPair {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-parameter moments plus the step counter. Because beta1 changes from
/// step to step, bias correction tracks the running products of the betas
/// actually used rather than `beta^t`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub moments: Vec<MomentPair>,
    pub step: u64,
    pub beta1_product: f64,
    pub beta2_product: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState {
            moments: vec![MomentPair::default(); n_params],
            step: 0,
            beta1_product: 1.0,
            beta2_product: 1.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Scale all gradients so their joint L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
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

/// One update with a uniform learning rate across all parameters.
///
/// Decoupled weight decay shrinks the parameter directly (`p -= lr*wd*p`)
/// before the adaptive term; it never touches the moment estimates.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    lr: f64,
    beta1: f64,
    wd: f64,
) -> Result<(), NumericsError> {
    let lrs = vec![lr; params.len()];
    adam_step_lrs(params, grads, state, &lrs, beta1, wd)
}

/// One update with a per-parameter learning rate (discriminative
/// fine-tuning assigns each depth group its own rate). All parameters
/// advance in the same optimizer step, so bias correction stays shared.
pub fn adam_step_lrs(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    lrs: &[f64],
    beta1: f64,
    wd: f64,
) -> Result<(), NumericsError> {
    if let Some(&bad) = lrs.iter().find(|&&lr| lr < 0.0) {
        return Err(NumericsError::InvalidConfig { what: format!("negative learning rate {bad}") });
    }
    if !(0.0..1.0).contains(&beta1) {
        return Err(NumericsError::InvalidConfig { what: format!("beta1 {beta1} outside [0,1)") });
    }
    if params.len() != grads.len() || params.len() != state.moments.len() || params.len() != lrs.len() {
        return Err(NumericsError::InvalidConfig {
            what: format!(
                "optimizer got {} params, {} grads, {} lrs, {} moment slots",
                params.len(),
                grads.len(),
                lrs.len(),
                state.moments.len()
            ),
        });
    }
    state.step += 1;
    state.beta1_product *= beta1;
    state.beta2_product *= state.beta2;
    let bc1 = 1.0 - state.beta1_product;
    let bc2 = 1.0 - state.beta2_product;
    let beta2 = state.beta2;
    let eps = state.eps;

    for (((p, g), mom), &lr) in params.iter_mut().zip(grads).zip(&mut state.moments).zip(lrs) {
        if p.shape() != g.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if mom.m.is_empty() {
            mom.m = vec![0.0; p.numel()];
            mom.v = vec![0.0; p.numel()];
        }
        let pd = p.data_mut();
        let gd = g.data();
        for j in 0..pd.len() {
            pd[j] -= lr * wd * pd[j];
            mom.m[j] = beta1 * mom.m[j] + (1.0 - beta1) * gd[j];
            mom.v[j] = beta2 * mom.v[j] + (1.0 - beta2) * gd[j] * gd[j];
            let m_hat = mom.m[j] / bc1;
            let v_hat = mom.v[j] / bc2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
