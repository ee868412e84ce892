//! Training: configuration, the optimizer loop, checkpointing, and the
//! autoregressive forecasting used for validation and evaluation.

mod adam;
mod checkpoint;
mod loss;

pub use adam::{adam_step, clip_global_norm, OptimizerState};
pub use checkpoint::{Checkpoint, EpochRecord, NamedTensor, FORMAT_VERSION};
pub use loss::{mae_loss, taped_mae_loss, taped_masked_abs_sum};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::GraphSupports;
use crate::data::{materialize_window, window_count, NormStats, SeriesTable};
use crate::error::{Error, Result};
use crate::evaluation::compute_metrics;
use crate::graph::SensorGraph;
use crate::numerics::{ParamSet, Tape, Tensor};
use crate::seq2seq::{forward, sampling_probability, DecodeOptions, ModelConfig, Seq2SeqParams};

/// Everything a training run needs, with defaults matching the published
/// protocol (Adam at 0.01, batch 64, C=2 heads, F=16, 2×64 GRU, L=P=12).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_start_epoch: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub heads: usize,
    pub embed: usize,
    pub layers: usize,
    pub units: usize,
    pub diffusion_steps: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub tau: f64,
    pub seed: u64,
    pub patience: usize,
    pub grad_clip: f64,
    pub threads: usize,
    pub share_attention: bool,
    pub stop_attention_grad: bool,
    /// Treat a recorded speed of exactly 0 as a missing measurement.
    pub zero_is_missing: bool,
    /// Check every parameter for NaN/Inf after each optimizer step.
    pub debug_checks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 100,
            lr_decay_start_epoch: 40,
            lr_decay_every: 10,
            lr_decay_factor: 0.1,
            heads: 2,
            embed: 16,
            layers: 2,
            units: 64,
            diffusion_steps: 2,
            lookback: 12,
            horizon: 12,
            tau: 2000.0,
            seed: 1,
            patience: 50,
            grad_clip: 5.0,
            threads: 1,
            share_attention: false,
            stop_attention_grad: false,
            zero_is_missing: true,
            debug_checks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, f64); 10] = [
            ("learning_rate", self.learning_rate),
            ("batch_size", self.batch_size as f64),
            ("heads", self.heads as f64),
            ("embed", self.embed as f64),
            ("layers", self.layers as f64),
            ("units", self.units as f64),
            ("diffusion_steps", self.diffusion_steps as f64),
            ("lookback", self.lookback as f64),
            ("horizon", self.horizon as f64),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0,1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            k_in: 2,
            k_out: 1,
            layers: self.layers,
            units: self.units,
            heads: self.heads,
            embed: self.embed,
            diffusion_steps: self.diffusion_steps,
            share_attention: self.share_attention,
            stop_attention_grad: self.stop_attention_grad,
        }
    }
}

/// Learning rate at an epoch: the base rate decays by `lr_decay_factor` at
/// the start epoch and every `lr_decay_every` epochs after it.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = if epoch < cfg.lr_decay_start_epoch {
        0
    } else {
        (epoch - cfg.lr_decay_start_epoch) / cfg.lr_decay_every + 1
    };
    cfg.learning_rate * cfg.lr_decay_factor.powi(decays as i32)
}

/// Fresh parameter set and model wiring for a configuration.
pub fn build_model(cfg: &TrainConfig, seed: u64) -> (ParamSet, Seq2SeqParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let model = Seq2SeqParams::init(&mut params, &cfg.model_config(), &mut rng);
    (params, model)
}

/// splitmix64-style mixer deriving the per-sequence sampling seed from the
/// run seed, the optimizer iteration, and the window start.
fn sequence_seed(seed: u64, iteration: u64, window_start: usize) -> u64 {
    let mut z = seed
        ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (window_start as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ElementResult {
    grads: Vec<Tensor>,
    abs_sum: f64,
    count: usize,
}

fn run_element(
    params: &ParamSet,
    model: &Seq2SeqParams,
    supports: &GraphSupports,
    table: &SeriesTable,
    stats: &NormStats,
    cfg: &TrainConfig,
    start: usize,
    truth_prob: f64,
    iteration: u64,
) -> Result<ElementResult> {
    let window = materialize_window(table, stats, start, cfg.lookback, cfg.horizon);
    let mut draw_rng = ChaCha8Rng::seed_from_u64(sequence_seed(cfg.seed, iteration, start));
    let mut tape = Tape::new();
    let preds = forward(
        &mut tape,
        params,
        model,
        supports,
        &window.inputs,
        &DecodeOptions {
            horizon: cfg.horizon,
            targets: Some(&window.targets),
            known_future: &window.future_aux,
            use_truth_prob: truth_prob,
        },
        &mut draw_rng,
    )?;
    let mut total = None;
    let mut count = 0usize;
    for ((&pred, truth), mask) in preds
        .iter()
        .zip(window.targets.iter())
        .zip(window.target_mask.iter())
    {
        let (sum, c) = taped_masked_abs_sum(&mut tape, pred, truth, mask)?;
        count += c;
        total = Some(match total {
            None => sum,
            Some(acc) => tape.add(acc, sum)?,
        });
    }
    let total = total.ok_or(Error::DegenerateBatch)?;
    let abs_sum = tape.value(total)[0];
    tape.backward(total)?;
    Ok(ElementResult {
        grads: tape.param_grads(params),
        abs_sum,
        count,
    })
}

/// Run a closure over work indices on up to `threads` workers, preserving
/// index order in the output.
fn run_parallel<T, F>(items: &[usize], threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(|&i| f(i)).collect();
    }
    let workers = threads.min(items.len());
    let chunk = items.len().div_ceil(workers);
    let mut out: Vec<Option<Result<T>>> = Vec::new();
    out.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        let f = &f;
        let mut slots: &mut [Option<Result<T>>] = &mut out;
        let mut offset = 0;
        for _ in 0..workers {
            let take = chunk.min(slots.len());
            if take == 0 {
                break;
            }
            let (mine, rest) = slots.split_at_mut(take);
            slots = rest;
            let range = &items[offset..offset + take];
            offset += take;
            scope.spawn(move || {
                for (slot, &idx) in mine.iter_mut().zip(range.iter()) {
                    *slot = Some(f(idx));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

/// Autoregressive forecasts for every window of a split, denormalized,
/// arranged as per-horizon-step slices aligned with the raw truth and mask.
pub fn forecast_split(
    params: &ParamSet,
    model: &Seq2SeqParams,
    supports: &GraphSupports,
    table: &SeriesTable,
    stats: &NormStats,
    lookback: usize,
    horizon: usize,
    threads: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)> {
    let windows = window_count(table.t_len(), lookback, horizon);
    if windows == 0 {
        return Err(Error::Config(format!(
            "split of {} rows has no {lookback}+{horizon} windows",
            table.t_len()
        )));
    }
    let n = table.n();
    let indices: Vec<usize> = (0..windows).collect();
    let per_window = run_parallel(&indices, threads, |start| {
        let window = materialize_window(table, stats, start, lookback, horizon);
        let mut rng = ChaCha8Rng::seed_from_u64(0); // no draws at prob 0
        let mut tape = Tape::new();
        let preds = forward(
            &mut tape,
            params,
            model,
            supports,
            &window.inputs,
            &DecodeOptions {
                horizon,
                targets: None,
                known_future: &window.future_aux,
                use_truth_prob: 0.0,
            },
            &mut rng,
        )?;
        Ok(preds
            .iter()
            .map(|&p| tape.value(p).to_vec())
            .collect::<Vec<_>>())
    })?;

    let mut preds = vec![Vec::with_capacity(windows * n); horizon];
    let mut truth = vec![Vec::with_capacity(windows * n); horizon];
    let mut mask = vec![Vec::with_capacity(windows * n); horizon];
    for (w, storage) in per_window.iter().enumerate() {
        for p in 0..horizon {
            let row = w + lookback + p;
            for i in 0..n {
                preds[p].push(stats.denormalize(storage[p][i]));
                truth[p].push(table.speed(row, i));
                mask[p].push(if table.is_valid(row, i) { 1.0 } else { 0.0 });
            }
        }
    }
    let wrap = |v: Vec<Vec<f64>>| {
        v.into_iter()
            .map(|d| {
                let len = d.len();
                Tensor::new(vec![len], d)
            })
            .collect()
    };
    Ok((wrap(preds), wrap(truth), wrap(mask)))
}

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation MAE.
    pub best: Checkpoint,
    /// Checkpoint at the final epoch.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss or gradient; the
    /// checkpoints hold the last good parameters.
    pub aborted: Option<String>,
}

/// The mini-batch training loop: forward with scheduled sampling, masked
/// MAE on the normalized scale, backward, global-norm clip, Adam with the
/// stepped learning-rate schedule; autoregressive validation after every
/// epoch; early stop on `patience` epochs without improvement.
pub fn train(
    cfg: &TrainConfig,
    train_table: &SeriesTable,
    val_table: &SeriesTable,
    graph: &SensorGraph,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graph.n() != train_table.n() || graph.n() != val_table.n() {
        return Err(Error::Config(format!(
            "graph has {} vertices, tables have {}/{} sensors",
            graph.n(),
            train_table.n(),
            val_table.n()
        )));
    }
    let train_windows = window_count(train_table.t_len(), cfg.lookback, cfg.horizon);
    let val_windows = window_count(val_table.t_len(), cfg.lookback, cfg.horizon);
    if train_windows == 0 || val_windows == 0 {
        return Err(Error::Config(format!(
            "need at least one {}+{} window per split (train {}, val {})",
            cfg.lookback,
            cfg.horizon,
            train_table.t_len(),
            val_table.t_len()
        )));
    }

    let stats = NormStats::from_table(train_table);
    let supports = GraphSupports::new(graph);
    let (mut params, model) = build_model(cfg, cfg.seed);
    let mut optimizer = OptimizerState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5AFE_5EED));

    let snapshot = |params: &ParamSet,
                    optimizer: &OptimizerState,
                    epoch: usize,
                    history: &[EpochRecord]| {
        Checkpoint::snapshot(
            cfg,
            stats,
            graph.vertex_ids(),
            epoch,
            params,
            optimizer,
            history,
        )
    };

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut epochs_since_best = 0usize;
    let mut aborted = None;
    let mut iteration: u64 = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        let mut order: Vec<usize> = (0..train_windows).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_abs = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let truth_prob = sampling_probability(iteration, cfg.tau);
            let results = run_parallel(batch, cfg.threads, |start| {
                run_element(
                    &params, &model, &supports, train_table, &stats, cfg, start, truth_prob,
                    iteration,
                )
            })?;

            let batch_count: usize = results.iter().map(|r| r.count).sum();
            if batch_count == 0 {
                return Err(Error::DegenerateBatch);
            }
            let batch_abs: f64 = results.iter().map(|r| r.abs_sum).sum();
            let batch_loss = batch_abs / batch_count as f64;
            if !batch_loss.is_finite() {
                aborted = Some(format!(
                    "non-finite training loss at epoch {epoch}, iteration {iteration}"
                ));
                break 'epochs;
            }
            epoch_abs += batch_abs;
            epoch_count += batch_count;

            // sum per-element gradients in batch order, then normalize by
            // the total valid count so the update matches the batch loss
            let mut grads: Vec<Tensor> = params
                .ids()
                .map(|id| Tensor::zeros(params.value(id).shape().to_vec()))
                .collect();
            for r in &results {
                for (g, e) in grads.iter_mut().zip(r.grads.iter()) {
                    for (gv, ev) in g.data_mut().iter_mut().zip(e.data().iter()) {
                        *gv += ev;
                    }
                }
            }
            let inv = 1.0 / batch_count as f64;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            if let Err(e) = adam_step(&mut params, &grads, &mut optimizer, lr) {
                aborted = Some(e.to_string());
                break 'epochs;
            }
            if cfg.debug_checks {
                for (_, name, value) in params.iter() {
                    if let Err(e) = value.validate_finite(name) {
                        aborted = Some(e.to_string());
                        break 'epochs;
                    }
                }
            }
            iteration += 1;
        }

        let train_loss = epoch_abs / epoch_count.max(1) as f64;
        let (preds, truth, mask) = forecast_split(
            &params,
            &model,
            &supports,
            val_table,
            &stats,
            cfg.lookback,
            cfg.horizon,
            cfg.threads,
        )?;
        let report = compute_metrics(&preds, &truth, &mask)?;
        let avg = report
            .average
            .ok_or_else(|| Error::Config("validation split has no valid entries".into()))?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_mae: avg.mae,
            val_rmse: avg.rmse,
            val_mape: avg.mape,
        };
        history.push(record);
        on_epoch(&record);

        let improved = best.as_ref().map_or(true, |(mae, _)| avg.mae < *mae);
        if improved {
            best = Some((avg.mae, snapshot(&params, &optimizer, epoch, &history)));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    let last = snapshot(&params, &optimizer, history.len(), &history);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome {
        best,
        last,
        history,
        aborted,
    })
}
