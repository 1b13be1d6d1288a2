//! Adam with bias correction, f64 update arithmetic on f32 storage.

use alloc::format;
use alloc::vec::Vec;

use super::{NumericsError, Tensor};
use crate::math;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers plus the step counter, aligned with the
/// parameter list they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One Adam update over a flat parameter list. Deterministic given state.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            detail: format!("{} params vs {} grads", params.len(), grads.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(hp.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(hp.beta2, t as f64);
    for i in 0..params.len() {
        if params[i].shape() != grads[i].shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?} vs grad {:?}", params[i].shape(), grads[i].shape()),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        let p = params[i].data_mut();
        for j in 0..p.len() {
            let gj = g[j] as f64;
            let mj = hp.beta1 * m[j] as f64 + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j] as f64 + (1.0 - hp.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            p[j] = (p[j] as f64 - hp.lr * mhat / (math::sqrt(vhat) + hp.eps)) as f32;
        }
        params[i].check_finite("adam_step")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut state = AdamState::new(&params);
        let hp = AdamHyper::with_lr(0.1);
        adam_step(&mut params, &grads, &mut state, &hp).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign_by_lr() {
        let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
        let grads = vec![Tensor::vector(vec![3.0, -0.25])];
        let mut state = AdamState::new(&params);
        let hp = AdamHyper::with_lr(0.01);
        adam_step(&mut params, &grads, &mut state, &hp).unwrap();
        // bias-corrected first step is -lr * g/(|g| + eps') ~ -lr * sign(g)
        assert!((params[0].data()[0] + 0.01).abs() < 1e-5);
        assert!((params[0].data()[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
        let grads = vec![Tensor::vector(vec![1.0])];
        let mut state = AdamState::new(&params);
        let hp = AdamHyper::with_lr(0.01);
        assert!(adam_step(&mut params, &grads, &mut state, &hp).is_err());
    }

    /// Ten steps on f(x) = x^2 against an independently coded reference.
    #[test]
    fn trajectory_matches_reference_adam() {
        let hp = AdamHyper::with_lr(0.05);
        let mut params = vec![Tensor::vector(vec![1.0])];
        let mut state = AdamState::new(&params);

        // reference: scalar Adam written out longhand
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g_ref = 2.0 * x;
            m = hp.beta1 * m + (1.0 - hp.beta1) * g_ref;
            v = hp.beta2 * v + (1.0 - hp.beta2) * g_ref * g_ref;
            let mhat = m / (1.0 - libm::pow(hp.beta1, t as f64));
            let vhat = v / (1.0 - libm::pow(hp.beta2, t as f64));
            x -= hp.lr * mhat / (libm::sqrt(vhat) + hp.eps);

            let g = 2.0 * params[0].data()[0];
            let grads = vec![Tensor::vector(vec![g])];
            adam_step(&mut params, &grads, &mut state, &hp).unwrap();
        }
        assert!((params[0].data()[0] as f64 - x).abs() < 1e-5);
    }
}
