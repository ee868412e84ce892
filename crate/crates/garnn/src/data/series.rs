//! Speed series tables: ingestion, normalization, splits.

use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDateTime, Timelike};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const TS_FORMATS: [&str; 2] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"];

/// A uniformly sampled multivariate speed series. Rows are timestamps,
/// columns are sensors; `mask` is false where a measurement is missing
/// (by convention, a recorded speed of exactly 0).
#[derive(Debug, Clone)]
pub struct SeriesTable {
    start: NaiveDateTime,
    period: Duration,
    sensor_ids: Vec<String>,
    values: Vec<f64>,
    mask: Vec<bool>,
    t_len: usize,
}

impl SeriesTable {
    /// Assemble a table from parts; timestamps are `start + t·period`, which
    /// keeps the uniform-spacing invariant true by construction.
    pub fn from_parts(
        start: NaiveDateTime,
        period: Duration,
        sensor_ids: Vec<String>,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Self {
        let n = sensor_ids.len();
        assert!(n > 0 && period > Duration::zero());
        assert_eq!(values.len() % n, 0);
        assert_eq!(values.len(), mask.len());
        SeriesTable {
            start,
            period,
            sensor_ids,
            t_len: values.len() / n,
            values,
            mask,
        }
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn n(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + self.period * (t as i32)
    }

    pub fn speed(&self, t: usize, sensor: usize) -> f64 {
        self.values[t * self.n() + sensor]
    }

    pub fn is_valid(&self, t: usize, sensor: usize) -> bool {
        self.mask[t * self.n() + sensor]
    }

    /// Fraction of the day elapsed at row t, in [0, 1).
    pub fn time_of_day(&self, t: usize) -> f64 {
        let ts = self.timestamp(t);
        ts.time().num_seconds_from_midnight() as f64 / 86_400.0
    }

    /// Chronological 70/10/20 split at floor(0.7·T) and floor(0.8·T).
    pub fn split_70_10_20(&self) -> Result<(SeriesTable, SeriesTable, SeriesTable)> {
        let t = self.t_len;
        let t1 = (0.7 * t as f64).floor() as usize;
        let t2 = (0.8 * t as f64).floor() as usize;
        if t1 == 0 || t2 <= t1 || t <= t2 {
            return Err(Error::Config(format!(
                "table with {t} rows is too short for a 70/10/20 split"
            )));
        }
        Ok((self.slice(0, t1), self.slice(t1, t2), self.slice(t2, t)))
    }

    fn slice(&self, begin: usize, end: usize) -> SeriesTable {
        let n = self.n();
        SeriesTable {
            start: self.timestamp(begin),
            period: self.period,
            sensor_ids: self.sensor_ids.clone(),
            values: self.values[begin * n..end * n].to_vec(),
            mask: self.mask[begin * n..end * n].to_vec(),
            t_len: end - begin,
        }
    }

    /// Input graph signal for one row: column 0 is the normalized speed,
    /// column 1 the time-of-day fraction. Missing speeds pass through the
    /// normalization unchanged; the mask only gates losses and metrics.
    pub fn input_signal(&self, stats: &NormStats, t: usize) -> Tensor {
        let n = self.n();
        let mut data = Vec::with_capacity(n * 2);
        let tod = self.time_of_day(t);
        for i in 0..n {
            data.push(stats.normalize(self.speed(t, i)));
            data.push(tod);
        }
        Tensor::new(vec![n, 2], data)
    }

    /// Normalized speed column for one row.
    pub fn target_signal(&self, stats: &NormStats, t: usize) -> Tensor {
        let n = self.n();
        let data = (0..n).map(|i| stats.normalize(self.speed(t, i))).collect();
        Tensor::new(vec![n, 1], data)
    }

    /// Validity of one row's speeds as a 0/1 column.
    pub fn mask_signal(&self, t: usize) -> Tensor {
        let n = self.n();
        let data = (0..n)
            .map(|i| if self.is_valid(t, i) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![n, 1], data)
    }

    /// Auxiliary (known-future) channels for one row: time of day.
    pub fn aux_signal(&self, t: usize) -> Tensor {
        let n = self.n();
        Tensor::new(vec![n, 1], vec![self.time_of_day(t); n])
    }
}

/// Speed-channel z-score statistics, computed on the training split only.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Mean and standard deviation over the valid entries of a table. A
    /// degenerate (constant) table gets an epsilon-guarded std.
    pub fn from_table(table: &SeriesTable) -> Self {
        let mut count = 0usize;
        let mut sum = 0.0;
        for t in 0..table.t_len() {
            for i in 0..table.n() {
                if table.is_valid(t, i) {
                    sum += table.speed(t, i);
                    count += 1;
                }
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        let mut var = 0.0;
        for t in 0..table.t_len() {
            for i in 0..table.n() {
                if table.is_valid(t, i) {
                    let d = table.speed(t, i) - mean;
                    var += d * d;
                }
            }
        }
        let std = if count > 0 { (var / count as f64).sqrt() } else { 1.0 };
        NormStats {
            mean,
            std: std.max(1e-8),
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TS_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s.trim(), fmt).ok())
}

/// Parse a series file: header `timestamp,<sensor ids...>`, then one row per
/// timestamp. Zero speeds are flagged missing when `zero_is_missing` is set.
pub fn load_series(path: &Path, zero_is_missing: bool) -> Result<SeriesTable> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let ingest = |line: usize, msg: String| Error::Ingestion {
        path: display.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| ingest(1, "empty series file".into()))?;
    let sensor_ids: Vec<String> = header
        .split(',')
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    if sensor_ids.is_empty() {
        return Err(ingest(1, "header names no sensors".into()));
    }
    let n = sensor_ids.len();

    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let mut cells = line.split(',');
        let ts_cell = cells.next().unwrap();
        let ts = parse_timestamp(ts_cell)
            .ok_or_else(|| ingest(lineno, format!("bad timestamp {ts_cell:?}")))?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(ingest(
                    lineno,
                    format!("non-monotone timestamp {ts} after {prev}"),
                ));
            }
        }
        timestamps.push(ts);
        let mut row = 0usize;
        for cell in cells {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| ingest(lineno, format!("bad value {cell:?}")))?;
            values.push(v);
            mask.push(!(zero_is_missing && v == 0.0));
            row += 1;
        }
        if row != n {
            return Err(ingest(
                lineno,
                format!("ragged row: {row} values for {n} sensors"),
            ));
        }
    }
    if timestamps.is_empty() {
        return Err(ingest(2, "no data rows".into()));
    }
    let period = if timestamps.len() > 1 {
        timestamps[1] - timestamps[0]
    } else {
        Duration::minutes(5)
    };
    for (idx, pair) in timestamps.windows(2).enumerate() {
        if pair[1] - pair[0] != period {
            return Err(ingest(
                idx + 3,
                format!(
                    "non-uniform spacing: expected {period}, got {}",
                    pair[1] - pair[0]
                ),
            ));
        }
    }
    Ok(SeriesTable::from_parts(
        timestamps[0],
        period,
        sensor_ids,
        values,
        mask,
    ))
}

/// Write a table in the series file format (ISO-8601 timestamps).
pub fn write_series(path: &Path, table: &SeriesTable) -> Result<()> {
    let mut out = String::from("timestamp");
    for id in table.sensor_ids() {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for t in 0..table.t_len() {
        out.push_str(&table.timestamp(t).format("%Y-%m-%dT%H:%M:%S").to_string());
        for i in 0..table.n() {
            out.push(',');
            out.push_str(&format_value(table.speed(t, i)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn format_value(v: f64) -> String {
    // shortest representation that round-trips the double exactly
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn dt(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").unwrap()
    }

    fn small_table() -> SeriesTable {
        SeriesTable::from_parts(
            dt("2012-03-01T00:00:00"),
            Duration::minutes(5),
            vec!["a".into(), "b".into()],
            vec![60.0, 55.0, 0.0, 52.0, 61.0, 50.0],
            vec![true, true, false, true, true, true],
        )
    }

    #[test]
    fn accessors_and_time_of_day() {
        let t = small_table();
        assert_eq!(t.t_len(), 3);
        assert_eq!(t.n(), 2);
        assert_eq!(t.speed(1, 1), 52.0);
        assert!(!t.is_valid(1, 0));
        assert!((t.time_of_day(0) - 0.0).abs() < 1e-12);
        assert!((t.time_of_day(1) - 5.0 / (24.0 * 60.0)).abs() < 1e-12);
    }

    #[test]
    fn load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        write_series(&path, &small_table()).unwrap();
        let loaded = load_series(&path, true).unwrap();
        assert_eq!(loaded.t_len(), 3);
        assert_eq!(loaded.sensor_ids(), &["a", "b"]);
        assert_eq!(loaded.speed(2, 0), 61.0);
        assert!(!loaded.is_valid(1, 0), "zero speed must be flagged missing");
        assert_eq!(loaded.timestamp(2), dt("2012-03-01T00:10:00"));
    }

    #[test]
    fn zero_flag_is_overridable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        write_series(&path, &small_table()).unwrap();
        let loaded = load_series(&path, false).unwrap();
        assert!(loaded.is_valid(1, 0));
    }

    #[test]
    fn ragged_row_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(
            &path,
            "timestamp,a,b\n2012-03-01T00:00:00,1.0,2.0\n2012-03-01T00:05:00,1.0\n",
        )
        .unwrap();
        let err = load_series(&path, true).unwrap_err();
        assert!(err.to_string().contains(":3"), "{err}");
        assert!(err.to_string().contains("ragged"), "{err}");
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(
            &path,
            "timestamp,a\n2012-03-01T00:05:00,1.0\n2012-03-01T00:00:00,2.0\n",
        )
        .unwrap();
        let err = load_series(&path, true).unwrap_err();
        assert!(err.to_string().contains("non-monotone"), "{err}");
    }

    #[test]
    fn non_uniform_spacing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(
            &path,
            "timestamp,a\n2012-03-01T00:00:00,1.0\n2012-03-01T00:05:00,2.0\n2012-03-01T00:20:00,3.0\n",
        )
        .unwrap();
        let err = load_series(&path, true).unwrap_err();
        assert!(err.to_string().contains("non-uniform"), "{err}");
    }

    #[test]
    fn space_separated_timestamps_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        fs::write(
            &path,
            "timestamp,a\n2012-03-01 00:00:00,1.0\n2012-03-01 00:05:00,2.0\n",
        )
        .unwrap();
        let loaded = load_series(&path, true).unwrap();
        assert_eq!(loaded.t_len(), 2);
    }

    fn table_of_len(t_len: usize) -> SeriesTable {
        SeriesTable::from_parts(
            NaiveDate::from_ymd_opt(2012, 3, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            Duration::minutes(5),
            vec!["a".into()],
            (0..t_len).map(|i| i as f64 + 1.0).collect(),
            vec![true; t_len],
        )
    }

    #[test]
    fn split_exact_percentages() {
        let (train, val, test) = table_of_len(100).split_70_10_20().unwrap();
        assert_eq!(
            (train.t_len(), val.t_len(), test.t_len()),
            (70, 10, 20)
        );
    }

    #[test]
    fn split_floor_rule() {
        let (train, val, test) = table_of_len(101).split_70_10_20().unwrap();
        assert_eq!(
            (train.t_len(), val.t_len(), test.t_len()),
            (70, 10, 21)
        );
    }

    #[test]
    fn splits_partition_the_rows() {
        let table = table_of_len(53);
        let (train, val, test) = table.split_70_10_20().unwrap();
        assert_eq!(train.t_len() + val.t_len() + test.t_len(), 53);
        // boundary continuity: timestamps resume where the previous split ended
        assert_eq!(val.timestamp(0), table.timestamp(train.t_len()));
        assert_eq!(
            test.timestamp(0),
            table.timestamp(train.t_len() + val.t_len())
        );
        assert_eq!(train.speed(0, 0), 1.0);
        assert_eq!(test.speed(test.t_len() - 1, 0), 53.0);
    }

    #[test]
    fn too_short_table_is_config_error() {
        let err = table_of_len(3).split_70_10_20().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn norm_stats_skip_missing_and_round_trip() {
        let t = small_table();
        let stats = NormStats::from_table(&t);
        // valid speeds: 60, 55, 52, 61, 50
        let mean = (60.0 + 55.0 + 52.0 + 61.0 + 50.0) / 5.0;
        assert!((stats.mean - mean).abs() < 1e-12);
        for x in [0.0, 13.7, -4.2, 60.0] {
            assert!((stats.denormalize(stats.normalize(x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_table_gets_guarded_std() {
        let t = SeriesTable::from_parts(
            dt("2012-03-01T00:00:00"),
            Duration::minutes(5),
            vec!["a".into()],
            vec![7.0; 10],
            vec![true; 10],
        );
        let stats = NormStats::from_table(&t);
        assert!(stats.std > 0.0);
        assert!(stats.normalize(7.0).abs() < 1e-9);
    }
}
