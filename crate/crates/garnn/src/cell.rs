//! The graph-attention GRU cell.
//!
//! A classic GRU with every dense weight multiplication replaced by the
//! diffusion convolution over the timestamp's attention matrices:
//!   r = σ(Θ_r ⊗ [x||h] + b_r)
//!   u = σ(Θ_u ⊗ [x||h] + b_u)
//!   ĥ = tanh(Θ_ĥ ⊗ [x||(r⊙h)] + b_ĥ)
//!   h' = u⊙h + (1−u)⊙ĥ
//! The gate nonlinearities live out here, so the convolutions run with an
//! identity internal activation.

use rand::Rng;

use crate::attention::AttentionMatrices;
use crate::diffusion::{apply_filter_bank, diffusion_basis, Activation, FilterBank};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Val};

/// Parameters of one GA-GRU layer: three filter banks with Q = U filters
/// over K_sig = K_in + U input columns, plus per-unit biases broadcast
/// across vertices.
#[derive(Debug, Clone)]
pub struct GaGruLayerParams {
    pub bank_r: FilterBank,
    pub bank_u: FilterBank,
    pub bank_h: FilterBank,
    pub b_r: ParamId,
    pub b_u: ParamId,
    pub b_h: ParamId,
    pub k_in: usize,
    pub units: usize,
    pub diffusion_steps: usize,
}

impl GaGruLayerParams {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        k_in: usize,
        units: usize,
        diffusion_steps: usize,
        rng: &mut R,
    ) -> Self {
        let k_sig = k_in + units;
        let mut bank =
            |gate: &str, params: &mut ParamSet, rng: &mut R| {
                FilterBank::init(params, &format!("{prefix}.{gate}"), units, k_sig, diffusion_steps, rng)
            };
        let bank_r = bank("reset", params, rng);
        let bank_u = bank("update", params, rng);
        let bank_h = bank("candidate", params, rng);
        let b_r = params.insert(format!("{prefix}.reset.bias"), Tensor::zeros(vec![units]));
        let b_u = params.insert(format!("{prefix}.update.bias"), Tensor::zeros(vec![units]));
        let b_h = params.insert(format!("{prefix}.candidate.bias"), Tensor::zeros(vec![units]));
        GaGruLayerParams {
            bank_r,
            bank_u,
            bank_h,
            b_r,
            b_u,
            b_h,
            k_in,
            units,
            diffusion_steps,
        }
    }
}

/// One recurrent step for one layer. `x` is N×K_in, `h_prev` is N×U; the
/// same attention pair drives all three gates.
pub fn ga_gru_step(
    tape: &mut Tape,
    params: &ParamSet,
    x: Val,
    h_prev: Val,
    att: &AttentionMatrices,
    p: &GaGruLayerParams,
) -> Result<Val> {
    let n = tape.shape(x)[0];
    if tape.shape(x)[1] != p.k_in || tape.shape(h_prev) != [n, p.units] {
        return Err(Error::Dimension {
            op: "ga_gru_step",
            left: tape.shape(x).to_vec(),
            right: tape.shape(h_prev).to_vec(),
        });
    }
    let cat = tape.concat_cols(&[x, h_prev])?;
    let basis = diffusion_basis(tape, cat, att, p.diffusion_steps)?;

    let b_r = tape.param(params, p.b_r);
    let pre_r = apply_filter_bank(tape, params, &basis, &p.bank_r, Activation::Identity)?;
    let pre_r = tape.add_row_broadcast(pre_r, b_r)?;
    let reset = tape.sigmoid(pre_r);

    let b_u = tape.param(params, p.b_u);
    let pre_u = apply_filter_bank(tape, params, &basis, &p.bank_u, Activation::Identity)?;
    let pre_u = tape.add_row_broadcast(pre_u, b_u)?;
    let update = tape.sigmoid(pre_u);

    let gated = tape.mul(reset, h_prev)?;
    let cat_candidate = tape.concat_cols(&[x, gated])?;
    let basis_candidate = diffusion_basis(tape, cat_candidate, att, p.diffusion_steps)?;
    let b_h = tape.param(params, p.b_h);
    let pre_h = apply_filter_bank(tape, params, &basis_candidate, &p.bank_h, Activation::Identity)?;
    let pre_h = tape.add_row_broadcast(pre_h, b_h)?;
    let candidate = tape.tanh(pre_h);

    let keep = tape.mul(update, h_prev)?;
    let inv_update = tape.scale(update, -1.0);
    let inv_update = tape.add_scalar(inv_update, 1.0);
    let take = tape.mul(inv_update, candidate)?;
    tape.add(keep, take)
}

/// Zero-initialized per-layer hidden states for a stack.
pub fn zero_states(tape: &mut Tape, n: usize, layers: &[GaGruLayerParams]) -> Vec<Val> {
    layers
        .iter()
        .map(|layer| tape.leaf(&Tensor::zeros(vec![n, layer.units])))
        .collect()
}

/// One step through a stack of layers: layer 1 consumes the graph signal,
/// layer l consumes layer l−1's fresh output; every layer shares the same
/// attention pair. Returns the updated per-layer states.
pub fn stacked_step(
    tape: &mut Tape,
    params: &ParamSet,
    x: Val,
    states: &[Val],
    att: &AttentionMatrices,
    layers: &[GaGruLayerParams],
) -> Result<Vec<Val>> {
    if layers.is_empty() || states.len() != layers.len() {
        return Err(Error::Config(format!(
            "stacked_step: {} states for {} layers",
            states.len(),
            layers.len()
        )));
    }
    let mut expected = tape.shape(x)[1];
    for layer in layers {
        if layer.k_in != expected {
            return Err(Error::Config(format!(
                "layer expects {} input columns, got {}",
                layer.k_in, expected
            )));
        }
        expected = layer.units;
    }
    let mut new_states = Vec::with_capacity(layers.len());
    let mut input = x;
    for (layer, &state) in layers.iter().zip(states.iter()) {
        let next = ga_gru_step(tape, params, input, state, att, layer)?;
        new_states.push(next);
        input = next;
    }
    Ok(new_states)
}
