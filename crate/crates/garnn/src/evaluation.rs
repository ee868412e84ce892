//! Horizon-sliced MAE/RMSE/MAPE and the historical-average baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SeriesTable;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Errors of one horizon slice, in denormalized speed units (MAPE in
/// percent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Valid entries behind the MAE/RMSE figures.
    pub count: usize,
}

/// Per-horizon and averaged metrics. A slice with no valid entries is
/// reported absent rather than as zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_step: Vec<Option<StepMetrics>>,
    pub average: Option<StepMetrics>,
}

impl MetricsReport {
    pub fn horizon(&self) -> usize {
        self.per_step.len()
    }

    pub fn step(&self, p: usize) -> Option<&StepMetrics> {
        self.per_step.get(p - 1).and_then(|s| s.as_ref())
    }
}

/// Metrics per horizon step: `preds[p]`, `truth[p]`, and `mask[p]` hold all
/// entries (across windows and vertices) for step p+1, denormalized. MAPE
/// excludes truth = 0 even where the mask is set.
pub fn compute_metrics(
    preds: &[Tensor],
    truth: &[Tensor],
    mask: &[Tensor],
) -> Result<MetricsReport> {
    if preds.len() != truth.len() || preds.len() != mask.len() {
        return Err(Error::Contract(format!(
            "compute_metrics: {} pred steps, {} truth steps, {} mask steps",
            preds.len(),
            truth.len(),
            mask.len()
        )));
    }
    let mut per_step = Vec::with_capacity(preds.len());
    for ((p, t), m) in preds.iter().zip(truth.iter()).zip(mask.iter()) {
        if p.len() != t.len() || p.len() != m.len() {
            return Err(Error::Dimension {
                op: "compute_metrics",
                left: p.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let mut count = 0usize;
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        let mut ape_sum = 0.0;
        let mut ape_count = 0usize;
        for ((&pv, &tv), &mv) in p.data().iter().zip(t.data().iter()).zip(m.data().iter()) {
            if mv == 0.0 {
                continue;
            }
            let e = pv - tv;
            abs_sum += e.abs();
            sq_sum += e * e;
            count += 1;
            if tv != 0.0 {
                ape_sum += (e / tv).abs();
                ape_count += 1;
            }
        }
        per_step.push(if count == 0 {
            None
        } else {
            Some(StepMetrics {
                mae: abs_sum / count as f64,
                rmse: (sq_sum / count as f64).sqrt(),
                mape: if ape_count == 0 {
                    0.0
                } else {
                    ape_sum / ape_count as f64 * 100.0
                },
                count,
            })
        });
    }
    let present: Vec<&StepMetrics> = per_step.iter().flatten().collect();
    let average = if present.is_empty() {
        None
    } else {
        let k = present.len() as f64;
        Some(StepMetrics {
            mae: present.iter().map(|s| s.mae).sum::<f64>() / k,
            rmse: present.iter().map(|s| s.rmse).sum::<f64>() / k,
            mape: present.iter().map(|s| s.mape).sum::<f64>() / k,
            count: present.iter().map(|s| s.count).sum(),
        })
    };
    Ok(MetricsReport { per_step, average })
}

/// Seasonal baseline: the prediction for a (sensor, time-slot) pair is the
/// unweighted mean of the training values seen at that slot, independent of
/// the forecast horizon. Slots wrap every `season_period` grid steps
/// (default one week at 5-minute resolution).
#[derive(Debug, Clone)]
pub struct HistoricalAverage {
    season_period: usize,
    period_secs: i64,
    /// season_period × N slot means; NaN marks a never-observed slot.
    slot_means: Vec<f64>,
    /// Per-sensor global training mean, the fallback for unseen slots.
    sensor_means: Vec<f64>,
    n: usize,
}

/// One week of 5-minute steps.
pub const WEEK_OF_5MIN_STEPS: usize = 7 * 24 * 12;

impl HistoricalAverage {
    pub fn fit(train: &SeriesTable, season_period: usize) -> Result<Self> {
        if season_period == 0 {
            return Err(Error::Config("season_period must be positive".into()));
        }
        let n = train.n();
        let period_secs = train.period().num_seconds();
        if period_secs <= 0 {
            return Err(Error::Config("table period must be positive".into()));
        }
        let mut sums = vec![0.0; season_period * n];
        let mut counts = vec![0usize; season_period * n];
        let mut sensor_sums = vec![0.0; n];
        let mut sensor_counts = vec![0usize; n];
        for t in 0..train.t_len() {
            let slot = Self::slot_of(train.timestamp(t), period_secs, season_period);
            for i in 0..n {
                if train.is_valid(t, i) {
                    sums[slot * n + i] += train.speed(t, i);
                    counts[slot * n + i] += 1;
                    sensor_sums[i] += train.speed(t, i);
                    sensor_counts[i] += 1;
                }
            }
        }
        let mut global_sum = 0.0;
        let mut global_count = 0usize;
        for i in 0..n {
            global_sum += sensor_sums[i];
            global_count += sensor_counts[i];
        }
        let global_mean = if global_count > 0 {
            global_sum / global_count as f64
        } else {
            0.0
        };
        let sensor_means = (0..n)
            .map(|i| {
                if sensor_counts[i] > 0 {
                    sensor_sums[i] / sensor_counts[i] as f64
                } else {
                    global_mean
                }
            })
            .collect();
        let slot_means = sums
            .iter()
            .zip(counts.iter())
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect();
        Ok(HistoricalAverage {
            season_period,
            period_secs,
            slot_means,
            sensor_means,
            n,
        })
    }

    fn slot_of(ts: chrono::NaiveDateTime, period_secs: i64, season: usize) -> usize {
        let steps = ts.and_utc().timestamp().div_euclid(period_secs);
        steps.rem_euclid(season as i64) as usize
    }

    /// Prediction for one sensor at one timestamp.
    pub fn predict(&self, ts: chrono::NaiveDateTime, sensor: usize) -> f64 {
        let slot = Self::slot_of(ts, self.period_secs, self.season_period);
        let v = self.slot_means[slot * self.n + sensor];
        if v.is_nan() {
            self.sensor_means[sensor]
        } else {
            v
        }
    }

    /// Predictions for a whole row.
    pub fn predict_row(&self, ts: chrono::NaiveDateTime) -> Tensor {
        Tensor::new(
            vec![self.n, 1],
            (0..self.n).map(|i| self.predict(ts, i)).collect(),
        )
    }
}

/// Assemble per-horizon-step slices of (pred, truth, mask) for a split,
/// evaluated over the same sliding windows the model sees.
pub fn ha_forecast_slices(
    ha: &HistoricalAverage,
    table: &SeriesTable,
    lookback: usize,
    horizon: usize,
) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
    let windows = crate::data::window_count(table.t_len(), lookback, horizon);
    let n = table.n();
    let mut preds = vec![Vec::with_capacity(windows * n); horizon];
    let mut truth = vec![Vec::with_capacity(windows * n); horizon];
    let mut mask = vec![Vec::with_capacity(windows * n); horizon];
    for w in 0..windows {
        for p in 0..horizon {
            let row = w + lookback + p;
            let ts = table.timestamp(row);
            for i in 0..n {
                preds[p].push(ha.predict(ts, i));
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
    (wrap(preds), wrap(truth), wrap(mask))
}

/// Human-readable report table. `minutes_per_step` labels the horizon rows.
pub fn format_report_text(report: &MetricsReport, minutes_per_step: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "step", "minutes", "MAE", "RMSE", "MAPE%", "count"
    );
    let fmt_row = |out: &mut String, label: String, minutes: String, m: &Option<StepMetrics>| {
        match m {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "{label:>8} {minutes:>8} {:>10.4} {:>10.4} {:>10.4} {:>10}",
                    s.mae, s.rmse, s.mape, s.count
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "{label:>8} {minutes:>8} {:>10} {:>10} {:>10} {:>10}",
                    "-", "-", "-", 0
                );
            }
        }
    };
    for (idx, m) in report.per_step.iter().enumerate() {
        let step = idx + 1;
        fmt_row(
            &mut out,
            step.to_string(),
            format!("{:.0}", step as f64 * minutes_per_step),
            m,
        );
    }
    fmt_row(&mut out, "avg".into(), "-".into(), &report.average);
    out
}

/// Machine-readable report: one `horizon,metric,value` line per figure,
/// with `avg` for the averaged row.
pub fn format_report_kv(report: &MetricsReport) -> String {
    let mut out = String::new();
    let mut emit = |label: &str, m: &Option<StepMetrics>| {
        if let Some(s) = m {
            let _ = writeln!(out, "{label},mae,{}", s.mae);
            let _ = writeln!(out, "{label},rmse,{}", s.rmse);
            let _ = writeln!(out, "{label},mape,{}", s.mape);
            let _ = writeln!(out, "{label},count,{}", s.count);
        }
    };
    for (idx, m) in report.per_step.iter().enumerate() {
        emit(&(idx + 1).to_string(), m);
    }
    emit("avg", &report.average);
    out
}

/// Write both report forms next to each other.
pub fn write_reports(
    dir: &Path,
    stem: &str,
    report: &MetricsReport,
    minutes_per_step: f64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(format!("{stem}.txt")),
        format_report_text(report, minutes_per_step),
    )?;
    fs::write(dir.join(format!("{stem}.csv")), format_report_kv(report))?;
    Ok(())
}
