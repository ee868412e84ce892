//! Dataset ingestion, windowing, normalization, splits, and synthetic
//! generation.

mod series;
mod synth;

pub use series::{load_series, write_series, NormStats, SeriesTable};
pub use synth::{ring_records, synth_generate, synth_generate_with, SynthOptions};

use crate::numerics::Tensor;

/// One training sample: L input graph signals, P normalized speed targets
/// with a validity mask, and the known auxiliary features for the target
/// steps.
#[derive(Debug, Clone)]
pub struct ForecastInstance {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub target_mask: Vec<Tensor>,
    pub future_aux: Vec<Tensor>,
    /// Row index of the first input within its table.
    pub start: usize,
}

/// Number of stride-1 windows of L inputs + P targets in a table of `t_len`
/// rows: T − L − P + 1, clamped at 0.
pub fn window_count(t_len: usize, lookback: usize, horizon: usize) -> usize {
    (t_len + 1).saturating_sub(lookback + horizon)
}

/// Materialize the window starting at `start`.
pub fn materialize_window(
    table: &SeriesTable,
    stats: &NormStats,
    start: usize,
    lookback: usize,
    horizon: usize,
) -> ForecastInstance {
    assert!(start + lookback + horizon <= table.t_len());
    let inputs = (start..start + lookback)
        .map(|t| table.input_signal(stats, t))
        .collect();
    let target_rows = start + lookback..start + lookback + horizon;
    ForecastInstance {
        inputs,
        targets: target_rows.clone().map(|t| table.target_signal(stats, t)).collect(),
        target_mask: target_rows.clone().map(|t| table.mask_signal(t)).collect(),
        future_aux: target_rows.map(|t| table.aux_signal(t)).collect(),
        start,
    }
}

/// All windows of a table. Training and evaluation loops materialize
/// windows on demand instead; this is the convenience form.
pub fn make_windows(
    table: &SeriesTable,
    stats: &NormStats,
    lookback: usize,
    horizon: usize,
) -> Vec<ForecastInstance> {
    (0..window_count(table.t_len(), lookback, horizon))
        .map(|start| materialize_window(table, stats, start, lookback, horizon))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    fn table(t_len: usize) -> SeriesTable {
        let g = build_graph(&ring_records(3), 2.0);
        synth_generate(&g, t_len, 1, 0.0, 0)
    }

    #[test]
    fn window_count_formula() {
        assert_eq!(window_count(24, 12, 12), 1);
        assert_eq!(window_count(25, 12, 12), 2);
        assert_eq!(window_count(23, 12, 12), 0);
    }

    #[test]
    fn make_windows_shapes() {
        let table = table(30);
        let stats = NormStats::from_table(&table);
        let windows = make_windows(&table, &stats, 12, 12);
        assert_eq!(windows.len(), 7);
        let w = &windows[3];
        assert_eq!(w.start, 3);
        assert_eq!(w.inputs.len(), 12);
        assert_eq!(w.targets.len(), 12);
        assert_eq!(w.inputs[0].shape(), &[3, 2]);
        assert_eq!(w.targets[0].shape(), &[3, 1]);
        assert_eq!(w.target_mask[0].shape(), &[3, 1]);
        assert_eq!(w.future_aux[0].shape(), &[3, 1]);
    }

    #[test]
    fn windows_are_contiguous_and_aligned() {
        let table = table(30);
        let stats = NormStats::from_table(&table);
        let w = materialize_window(&table, &stats, 5, 4, 3);
        // input t matches table row 5+t; target p matches row 5+4+p
        for t in 0..4 {
            let want = stats.normalize(table.speed(5 + t, 1));
            assert_eq!(w.inputs[t].at(1, 0), want);
        }
        for p in 0..3 {
            let want = stats.normalize(table.speed(9 + p, 2));
            assert_eq!(w.targets[p].at(2, 0), want);
        }
    }

    #[test]
    fn windowing_never_crosses_split_boundaries() {
        let table = table(100);
        let (train, val, test) = table.split_70_10_20().unwrap();
        let stats = NormStats::from_table(&train);
        for (split, offset) in [(&train, 0usize), (&val, 70), (&test, 80)] {
            let windows = make_windows(split, &stats, 4, 2);
            assert_eq!(windows.len(), window_count(split.t_len(), 4, 2));
            for w in &windows {
                // every referenced row stays inside the split
                assert!(w.start + 6 <= split.t_len());
                // and the values really come from the original table rows
                let global = offset + w.start;
                let want = stats.normalize(table.speed(global, 0));
                assert_eq!(w.inputs[0].at(0, 0), want);
            }
        }
    }
}
