//! Per-timestamp directional attention matrices.
//!
//! For every vertex i the score against each neighbor j in NB(i) is
//! LReLU(vᵀ[W·xᵢ || W·xⱼ]), normalized by a softmax restricted to NB(i).
//! Heads are averaged. The out-direction matrix uses the graph's own
//! neighbor sets; the in-direction matrix uses the transposed graph's.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{out_neighbor_sets, transpose_graph, SensorGraph};
use crate::numerics::{ParamId, ParamSet, SupportMask, Tape, Tensor, Val};

/// Default negative-input slope for the score activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// One attention head: embedding W (F×K_in), score vector v (2F), and the
/// leaky-relu slope.
#[derive(Debug, Clone)]
pub struct AttentionHeadParams {
    pub w: ParamId,
    pub v: ParamId,
    pub slope: f64,
    pub embed: usize,
    pub k_in: usize,
}

impl AttentionHeadParams {
    /// Fresh head with uniform [-s, s] initialization,
    /// s = sqrt(6 / (fan_in + fan_out)).
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        embed: usize,
        k_in: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.insert(
            format!("{prefix}.w"),
            uniform_tensor(vec![embed, k_in], k_in + embed, rng),
        );
        let v = params.insert(
            format!("{prefix}.v"),
            uniform_tensor(vec![2 * embed], 2 * embed + 1, rng),
        );
        AttentionHeadParams {
            w,
            v,
            slope: LEAKY_SLOPE,
            embed,
            k_in,
        }
    }
}

fn uniform_tensor<R: Rng>(shape: Vec<usize>, fan_sum: usize, rng: &mut R) -> Tensor {
    let s = (6.0 / fan_sum as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(shape, data)
}

/// C heads per direction, each with its own embedding matrix and score
/// vector. Out- and in-direction heads are independent.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub out_heads: Vec<AttentionHeadParams>,
    pub in_heads: Vec<AttentionHeadParams>,
}

impl MultiHeadParams {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        heads: usize,
        embed: usize,
        k_in: usize,
        rng: &mut R,
    ) -> Self {
        let build = |dir: &str, params: &mut ParamSet, rng: &mut R| {
            (0..heads)
                .map(|c| {
                    AttentionHeadParams::init(
                        params,
                        &format!("{prefix}.{dir}.head{c}"),
                        embed,
                        k_in,
                        rng,
                    )
                })
                .collect()
        };
        let out_heads = build("out", params, rng);
        let in_heads = build("in", params, rng);
        MultiHeadParams {
            out_heads,
            in_heads,
        }
    }
}

/// The pair of dynamic adjacency matrices for one timestamp, row-stochastic
/// on their neighbor supports and zero elsewhere.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMatrices {
    pub a_out: Val,
    pub a_in: Val,
    pub t: usize,
}

/// The pair of neighbor supports an attention computation runs on. Built
/// once per graph; immutable and freely shared.
#[derive(Debug, Clone)]
pub struct GraphSupports {
    pub out: Arc<SupportMask>,
    pub incoming: Arc<SupportMask>,
    pub n: usize,
}

impl GraphSupports {
    pub fn new(g: &SensorGraph) -> Self {
        GraphSupports {
            out: out_neighbor_sets(g).support_mask(),
            incoming: out_neighbor_sets(&transpose_graph(g)).support_mask(),
            n: g.n(),
        }
    }
}

/// One head's attention matrix over the given support.
///
/// Uses the split vᵀ[a||b] = v₁ᵀa + v₂ᵀb, so the N×N score matrix is an
/// outer sum of two projected score vectors; identical to evaluating the
/// concatenation per pair.
pub fn attention_head(
    tape: &mut Tape,
    params: &ParamSet,
    x: Val,
    support: &Arc<SupportMask>,
    head: &AttentionHeadParams,
) -> Result<Val> {
    let k_cols = tape.shape(x)[1];
    if k_cols != head.k_in {
        return Err(Error::Dimension {
            op: "attention_head",
            left: tape.shape(x).to_vec(),
            right: vec![head.embed, head.k_in],
        });
    }
    let w = tape.param(params, head.w);
    let v = tape.param(params, head.v);
    let z = tape.matmul_tb(x, w)?; // N×F
    let v_self = tape.slice_range(v, 0, head.embed)?;
    let v_neigh = tape.slice_range(v, head.embed, head.embed)?;
    let s_self = tape.matvec(z, v_self)?;
    let s_neigh = tape.matvec(z, v_neigh)?;
    let scores = tape.outer_sum(s_self, s_neigh)?;
    let activated = tape.leaky_relu(scores, head.slope);
    tape.masked_row_softmax(activated, support)
}

/// Elementwise mean of the per-head matrices.
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &ParamSet,
    x: Val,
    support: &Arc<SupportMask>,
    heads: &[AttentionHeadParams],
) -> Result<Val> {
    if heads.is_empty() {
        return Err(Error::Config(
            "multi_head_attention needs C >= 1 heads".into(),
        ));
    }
    let mut acc = attention_head(tape, params, x, support, &heads[0])?;
    for head in &heads[1..] {
        let a = attention_head(tape, params, x, support, head)?;
        acc = tape.add(acc, a)?;
    }
    Ok(tape.scale(acc, 1.0 / heads.len() as f64))
}

/// Both directional matrices for one timestamp: out-direction over the
/// graph's neighbor sets, in-direction over the transposed graph's, each
/// with its own head parameters.
pub fn directional_attention(
    tape: &mut Tape,
    params: &ParamSet,
    x: Val,
    supports: &GraphSupports,
    p: &MultiHeadParams,
    t: usize,
) -> Result<AttentionMatrices> {
    let a_out = multi_head_attention(tape, params, x, &supports.out, &p.out_heads)?;
    let a_in = multi_head_attention(tape, params, x, &supports.incoming, &p.in_heads)?;
    Ok(AttentionMatrices { a_out, a_in, t })
}
