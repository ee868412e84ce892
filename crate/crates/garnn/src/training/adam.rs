//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter first/second moment accumulators and the step counter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .ids()
            .map(|id| vec![0.0; params.value(id).len()])
            .collect();
        OptimizerState {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update across every parameter.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    assert_eq!(grads.len(), params.len());
    for (id, grad) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
        if !grad.data().iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", params.name(id)),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - BETA1.powi(t as i32);
    let bias2 = 1.0 - BETA2.powi(t as i32);
    for (idx, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads[idx].data();
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        let p = params.value_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Scale all gradients down so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> (ParamSet, crate::numerics::ParamId) {
        let mut params = ParamSet::new();
        let id = params.insert("p", Tensor::scalar(v));
        (params, id)
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let (mut params, id) = scalar_param(1.5);
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(0.0)], &mut state, 0.01).unwrap();
        assert_eq!(params.value(id).data(), &[1.5]);
        assert_eq!(state.first_moment[0], vec![0.0]);
        assert_eq!(state.second_moment[0], vec![0.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // bias-corrected m̂ = v̂ = 1 on the first unit-gradient step, so the
        // update is lr / (1 + ε)
        let (mut params, id) = scalar_param(2.0);
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut state, 0.01).unwrap();
        let moved = 2.0 - params.value(id).data()[0];
        assert!((moved - 0.01 / (1.0 + EPSILON)).abs() < 1e-12);
    }

    #[test]
    fn two_steps_match_a_scalar_transcription() {
        let g = 0.37;
        let lr = 0.05;
        let (mut params, id) = scalar_param(1.0);
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(g)], &mut state, lr).unwrap();
        adam_step(&mut params, &[Tensor::scalar(g)], &mut state, lr).unwrap();

        // independent step-by-step recurrence
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=2 {
            m = BETA1 * m + (1.0 - BETA1) * g;
            v = BETA2 * v + (1.0 - BETA2) * g * g;
            let m_hat = m / (1.0 - BETA1.powi(t));
            let v_hat = v / (1.0 - BETA2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        assert!((params.value(id).data()[0] - p).abs() < 1e-15);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = ParamSet::new();
        params.insert("fine", Tensor::scalar(0.0));
        params.insert("model.broken.w", Tensor::scalar(0.0));
        let mut state = OptimizerState::new(&params);
        let err = adam_step(
            &mut params,
            &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)],
            &mut state,
            0.01,
        )
        .unwrap_err();
        assert!(err.to_string().contains("model.broken.w"), "{err}");
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = vec![
            Tensor::new(vec![2], vec![3.0, 4.0]), // norm 5 alone
            Tensor::new(vec![1], vec![12.0]),
        ];
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!((norm - 13.0).abs() < 1e-12);
        let after: f64 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!((after - 5.0).abs() < 1e-12);
        // direction preserved
        assert!((grads[0].data()[0] / grads[0].data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn clipping_leaves_small_gradients_alone() {
        let mut grads = vec![Tensor::new(vec![2], vec![0.3, 0.4])];
        clip_global_norm(&mut grads, 5.0);
        assert_eq!(grads[0].data(), &[0.3, 0.4]);
    }
}
