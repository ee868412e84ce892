//! Gradient verification by central finite differences.

use crate::error::Result;
use crate::numerics::tape::{ParamSet, Tape, Val};

/// Floor for the relative-error denominator, so coordinates whose analytic
/// and numeric gradients are both tiny compare on an absolute scale.
const SCALE_FLOOR: f64 = 1e-6;

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` must deterministically construct the scalar loss on the given tape
/// from the current parameter values; it is called once for the analytic
/// gradient and twice per parameter coordinate for (f(p+h) - f(p-h)) / 2h.
/// Returns the worst relative error over all coordinates, where relative
/// error is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-6).
///
/// Points where the loss is not differentiable (e.g. a leaky-relu input of
/// exactly 0) must be avoided by the caller; central differences straddle the
/// kink and disagree with the one-sided derivative there.
pub fn finite_difference_check<F>(build: F, params: &mut ParamSet, step: f64) -> Result<f64>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<Val>,
{
    let mut tape = Tape::new();
    let loss = build(params, &mut tape)?;
    tape.backward(loss)?;
    let analytic = tape.param_grads(params);
    drop(tape);

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(params, &mut tape)?;
        Ok(tape.value(loss)[0])
    };

    let mut worst: f64 = 0.0;
    for id in params.ids().collect::<Vec<_>>() {
        for coord in 0..params.value(id).len() {
            let orig = params.value(id).data()[coord];
            params.value_mut(id).data_mut()[coord] = orig + step;
            let f_plus = eval(params)?;
            params.value_mut(id).data_mut()[coord] = orig - step;
            let f_minus = eval(params)?;
            params.value_mut(id).data_mut()[coord] = orig;

            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = analytic[id.index()].data()[coord];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(SCALE_FLOOR);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::new(vec![3], vec![0.7, -1.3, 2.1]));
        // loss = sum(p ⊙ p) — central differences are exact for quadratics
        let err = finite_difference_check(
            |ps, tape| {
                let p = tape.param(ps, ps.ids().next().unwrap());
                let sq = tape.mul(p, p)?;
                Ok(tape.sum_all(sq))
            },
            &mut params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // loss = sum(2p) but pretend it's sum(p) by scaling after a
        // stop-gradient: the analytic gradient misses a factor of 2.
        let mut params = ParamSet::new();
        params.insert("p", Tensor::new(vec![2], vec![0.4, 1.5]));
        let err = finite_difference_check(
            |ps, tape| {
                let p = tape.param(ps, ps.ids().next().unwrap());
                let frozen = tape.stop_gradient(p);
                let doubled = tape.add(p, frozen)?;
                Ok(tape.sum_all(doubled))
            },
            &mut params,
            1e-6,
        )
        .unwrap();
        assert!(err > 0.4, "expected a large mismatch, got {err}");
    }
}
