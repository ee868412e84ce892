//! Synthetic correlated series with regime-switching interactions.
//!
//! The generator runs a contraction around a daily sinusoid:
//!   x_{t+1} = ρ·Â_t·x_t + (1−ρ)·s(t) + σ·ε_t
//! where Â_t is a row-stochastic weighting of the graph's neighbor support
//! that alternates between two fixed weightings every `regime_period` steps,
//! and s_i(t) is a per-vertex phase-shifted daily sinusoid. Deterministic
//! given the seed.

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::series::SeriesTable;
use crate::graph::{out_neighbor_sets, SensorGraph};

/// Shape constants of the generated process.
#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Steps between interaction-regime switches; 0 disables switching.
    pub regime_period: usize,
    /// Mean speed level of the sinusoid.
    pub base: f64,
    /// Sinusoid amplitude.
    pub amplitude: f64,
    /// Contraction factor on the diffused previous state.
    pub rho: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            noise: 0.0,
            regime_period: 0,
            base: 50.0,
            amplitude: 10.0,
            rho: 0.8,
        }
    }
}

fn synth_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2012, 3, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
}

/// Row-stochastic weighting of the self+out-neighbor support with weights
/// drawn from the rng.
fn regime_weights(g: &SensorGraph, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = g.n();
    let nb = out_neighbor_sets(g);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let mut total = 0.0;
        for &j in nb.neighbors(i) {
            let v = rng.gen_range(0.05..1.0);
            w[i * n + j] = v;
            total += v;
        }
        for &j in nb.neighbors(i) {
            w[i * n + j] /= total;
        }
    }
    w
}

/// Generate `t_len` steps of correlated series on the graph, 5-minute grid.
pub fn synth_generate(
    g: &SensorGraph,
    t_len: usize,
    seed: u64,
    noise: f64,
    regime_period: usize,
) -> SeriesTable {
    synth_generate_with(
        g,
        t_len,
        seed,
        SynthOptions {
            noise,
            regime_period,
            ..SynthOptions::default()
        },
    )
}

/// Generator with explicit process constants.
pub fn synth_generate_with(
    g: &SensorGraph,
    t_len: usize,
    seed: u64,
    opts: SynthOptions,
) -> SeriesTable {
    assert!(t_len >= 1);
    let n = g.n();
    let period = Duration::minutes(5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = [regime_weights(g, &mut rng), regime_weights(g, &mut rng)];
    // evenly spread phases make neighboring sinusoids disagree, so the
    // active regime visibly shifts each vertex's equilibrium
    let phases: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();

    let steps_per_day = (86_400 / period.num_seconds()) as f64;
    let sinusoid = |t: usize, i: usize| -> f64 {
        let tod = (t as f64 % steps_per_day) / steps_per_day;
        opts.base + opts.amplitude * (2.0 * std::f64::consts::PI * (tod + phases[i])).sin()
    };

    let mut values = Vec::with_capacity(t_len * n);
    let mut state: Vec<f64> = (0..n).map(|i| sinusoid(0, i)).collect();
    values.extend_from_slice(&state);
    for t in 1..t_len {
        let regime = if opts.regime_period == 0 {
            0
        } else {
            ((t - 1) / opts.regime_period) % 2
        };
        let w = &weights[regime];
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut diffused = 0.0;
            for j in 0..n {
                diffused += w[i * n + j] * state[j];
            }
            let eps: f64 = StandardNormal.sample(&mut rng);
            next[i] =
                opts.rho * diffused + (1.0 - opts.rho) * sinusoid(t - 1, i) + opts.noise * eps;
        }
        values.extend_from_slice(&next);
        state = next;
    }
    let mask = vec![true; values.len()];
    SeriesTable::from_parts(
        synth_start(),
        period,
        g.vertex_ids().to_vec(),
        values,
        mask,
    )
}

/// A ring graph i → (i+1) mod n with unit distances, the default synthetic
/// topology.
pub fn ring_records(n: usize) -> Vec<crate::graph::DistanceRecord> {
    (0..n)
        .map(|i| crate::graph::DistanceRecord {
            from: format!("s{i:03}"),
            to: format!("s{:03}", (i + 1) % n),
            distance: 1.0,
        })
        .collect()
}
