//! Diffusion convolution over the dynamic attention matrices.
//!
//! A filter Θ (K_sig×H×2) maps an N×K_sig signal to an N-vector:
//!   Σ_k Σ_{h=1..H} (θ[k,h,out]·(A_out)^h + θ[k,h,in]·(A_in)^h) · signal[:,k]
//! Matrix powers are applied by iterated products against the signal, never
//! materialized. A bank of Q filters shares the diffusion basis and emits an
//! N×Q matrix, one column per filter.

use std::sync::Arc;

use rand::Rng;

use crate::attention::AttentionMatrices;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Val};

/// Pointwise activation applied after the filter sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, v: Val) -> Val {
        match self {
            Activation::Identity => v,
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Tanh => tape.tanh(v),
        }
    }
}

/// One learnable filter with coefficients θ[k, h, direction].
#[derive(Debug, Clone)]
pub struct DiffusionFilter {
    pub theta: ParamId,
    pub k_sig: usize,
    pub h: usize,
}

impl DiffusionFilter {
    /// Fresh filter, uniform [-s, s] with s = sqrt(3 / (K_sig·H·2)).
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: impl Into<String>,
        k_sig: usize,
        h: usize,
        rng: &mut R,
    ) -> Self {
        assert!(h >= 1, "diffusion needs H >= 1");
        let count = k_sig * h * 2;
        let s = (3.0 / count as f64).sqrt();
        let data = (0..count).map(|_| rng.gen_range(-s..s)).collect();
        let theta = params.insert(name, Tensor::new(vec![k_sig, h, 2], data));
        DiffusionFilter { theta, k_sig, h }
    }

    /// A filter with explicit coefficients (row-major over [K_sig, H, 2]).
    pub fn with_values(
        params: &mut ParamSet,
        name: impl Into<String>,
        k_sig: usize,
        h: usize,
        values: Vec<f64>,
    ) -> Self {
        let theta = params.insert(name, Tensor::new(vec![k_sig, h, 2], values));
        DiffusionFilter { theta, k_sig, h }
    }
}

/// Q filters sharing K_sig and H.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub filters: Vec<DiffusionFilter>,
    pub k_sig: usize,
    pub h: usize,
}

impl FilterBank {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        q: usize,
        k_sig: usize,
        h: usize,
        rng: &mut R,
    ) -> Self {
        assert!(q >= 1, "filter bank needs Q >= 1");
        let filters = (0..q)
            .map(|i| DiffusionFilter::init(params, format!("{prefix}.filter{i}"), k_sig, h, rng))
            .collect();
        FilterBank { filters, k_sig, h }
    }

    pub fn q(&self) -> usize {
        self.filters.len()
    }
}

/// The stacked diffusion terms for one (signal, attention) pair:
/// columns [A_out·x₁ … A_out·x_K, A_in·x₁ …] for each power h in order
/// h-major, direction, then signal column. Shared by every filter bank
/// applied to the same signal at the same timestamp.
pub struct DiffusionBasis {
    b: Val,
    k_sig: usize,
    h: usize,
}

/// Build the basis by H successive products of each attention matrix with
/// the (progressively diffused) signal.
pub fn diffusion_basis(
    tape: &mut Tape,
    signal: Val,
    att: &AttentionMatrices,
    h: usize,
) -> Result<DiffusionBasis> {
    assert!(h >= 1, "diffusion needs H >= 1");
    let k_sig = tape.shape(signal)[1];
    let mut blocks = Vec::with_capacity(2 * h);
    let mut p_out = signal;
    let mut p_in = signal;
    for _ in 0..h {
        p_out = tape.matmul(att.a_out, p_out)?;
        p_in = tape.matmul(att.a_in, p_in)?;
        blocks.push(p_out);
        blocks.push(p_in);
    }
    let b = tape.concat_cols(&blocks)?;
    Ok(DiffusionBasis { b, k_sig, h })
}

/// Map basis-column order (h, direction, k) to the θ tensor's row-major
/// (k, h, direction) layout.
fn theta_perm(k_sig: usize, h: usize) -> Arc<Vec<usize>> {
    let mut perm = Vec::with_capacity(k_sig * h * 2);
    for step in 0..h {
        for dir in 0..2 {
            for k in 0..k_sig {
                perm.push(k * (h * 2) + step * 2 + dir);
            }
        }
    }
    Arc::new(perm)
}

fn check_filter(basis: &DiffusionBasis, k_sig: usize, h: usize) -> Result<()> {
    if basis.k_sig != k_sig || basis.h != h {
        return Err(Error::Dimension {
            op: "diffusion_conv",
            left: vec![basis.k_sig, basis.h],
            right: vec![k_sig, h],
        });
    }
    Ok(())
}

/// Apply one filter to a prebuilt basis; returns an N-vector.
pub fn apply_filter(
    tape: &mut Tape,
    params: &ParamSet,
    basis: &DiffusionBasis,
    filter: &DiffusionFilter,
    activation: Activation,
) -> Result<Val> {
    check_filter(basis, filter.k_sig, filter.h)?;
    let theta = tape.param(params, filter.theta);
    let col = tape.gather(theta, theta_perm(filter.k_sig, filter.h))?;
    let out = tape.matvec(basis.b, col)?;
    Ok(activation.apply(tape, out))
}

/// Apply a bank of Q filters to a prebuilt basis; returns N×Q.
pub fn apply_filter_bank(
    tape: &mut Tape,
    params: &ParamSet,
    basis: &DiffusionBasis,
    bank: &FilterBank,
    activation: Activation,
) -> Result<Val> {
    check_filter(basis, bank.k_sig, bank.h)?;
    let perm = theta_perm(bank.k_sig, bank.h);
    let mut cols = Vec::with_capacity(bank.q());
    for filter in &bank.filters {
        let theta = tape.param(params, filter.theta);
        cols.push(tape.gather(theta, Arc::clone(&perm))?);
    }
    let theta_mat = tape.concat_cols(&cols)?;
    let out = tape.matmul(basis.b, theta_mat)?;
    Ok(activation.apply(tape, out))
}

/// The full operator for a single filter: basis construction plus filter
/// application.
pub fn diffusion_conv(
    tape: &mut Tape,
    params: &ParamSet,
    signal: Val,
    att: &AttentionMatrices,
    filter: &DiffusionFilter,
    activation: Activation,
) -> Result<Val> {
    if tape.shape(signal)[1] != filter.k_sig {
        return Err(Error::Dimension {
            op: "diffusion_conv",
            left: tape.shape(signal).to_vec(),
            right: vec![filter.k_sig, filter.h, 2],
        });
    }
    let basis = diffusion_basis(tape, signal, att, filter.h)?;
    apply_filter(tape, params, &basis, filter, activation)
}

/// The full operator for a bank: one shared basis, one output column per
/// filter.
pub fn diffusion_conv_bank(
    tape: &mut Tape,
    params: &ParamSet,
    signal: Val,
    att: &AttentionMatrices,
    bank: &FilterBank,
    activation: Activation,
) -> Result<Val> {
    if tape.shape(signal)[1] != bank.k_sig {
        return Err(Error::Dimension {
            op: "diffusion_conv_bank",
            left: tape.shape(signal).to_vec(),
            right: vec![bank.k_sig, bank.h, 2],
        });
    }
    let basis = diffusion_basis(tape, signal, att, bank.h)?;
    apply_filter_bank(tape, params, &basis, bank, activation)
}
