//! Masked mean-absolute-error loss.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Val};

/// Mean |pred − truth| over the masked entries of a multi-step batch:
/// the 1/(Y·N·P) normalization restricted to valid entries.
pub fn mae_loss(preds: &[Tensor], truth: &[Tensor], mask: &[Tensor]) -> Result<f64> {
    if preds.len() != truth.len() || preds.len() != mask.len() {
        return Err(Error::Contract(format!(
            "mae_loss: {} predictions, {} truths, {} masks",
            preds.len(),
            truth.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, t), m) in preds.iter().zip(truth.iter()).zip(mask.iter()) {
        if p.shape() != t.shape() || p.len() != m.len() {
            return Err(Error::Dimension {
                op: "mae_loss",
                left: p.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        for ((&pv, &tv), &mv) in p.data().iter().zip(t.data().iter()).zip(m.data().iter()) {
            if mv != 0.0 {
                total += (pv - tv).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(total / count as f64)
}

/// Taped sum of masked absolute residuals for one step, plus its valid-entry
/// count. Summands from several steps/instances divide by the total count to
/// form the batch loss.
pub fn taped_masked_abs_sum(
    tape: &mut Tape,
    pred: Val,
    truth: &Tensor,
    mask: &Tensor,
) -> Result<(Val, usize)> {
    let t = tape.leaf(truth);
    let m = tape.leaf(mask);
    let diff = tape.sub(pred, t)?;
    let abs = tape.abs(diff);
    let masked = tape.mul(abs, m)?;
    let sum = tape.sum_all(masked);
    let count = mask.data().iter().filter(|&&v| v != 0.0).count();
    Ok((sum, count))
}

/// Taped masked MAE over a full multi-step prediction.
pub fn taped_mae_loss(
    tape: &mut Tape,
    preds: &[Val],
    truth: &[Tensor],
    mask: &[Tensor],
) -> Result<Val> {
    let mut total: Option<Val> = None;
    let mut count = 0usize;
    for ((&pred, t), m) in preds.iter().zip(truth.iter()).zip(mask.iter()) {
        let (sum, c) = taped_masked_abs_sum(tape, pred, t, m)?;
        count += c;
        total = Some(match total {
            None => sum,
            Some(acc) => tape.add(acc, sum)?,
        });
    }
    let total = total.ok_or(Error::DegenerateBatch)?;
    if count == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(tape.scale(total, 1.0 / count as f64))
}
