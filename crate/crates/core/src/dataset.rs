//! CSV loading, chronological splits, standardization, and window extraction.
//!
//! Multivariate series arrive as numeric CSV, one row per time step, one
//! column per channel, optionally with a header row and a leading timestamp
//! column. Parsing is hand-rolled: the format is strictly numeric and errors
//! must name the offending row and column.

use std::path::Path;

use crate::error::{Error, Result};

/// A multivariate series, row-major [time_steps x channels].
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    pub values: Vec<f32>,
    pub time_steps: usize,
    pub channels: usize,
    pub channel_names: Vec<String>,
}

impl TimeSeriesDataset {
    pub fn new(values: Vec<f32>, channels: usize) -> Self {
        assert!(channels > 0, "dataset needs at least one channel");
        assert_eq!(values.len() % channels, 0, "values not divisible by channel count");
        let time_steps = values.len() / channels;
        TimeSeriesDataset {
            values,
            time_steps,
            channels,
            channel_names: (0..channels).map(|c| format!("c{c}")).collect(),
        }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.channels..][..self.channels]
    }

    fn carved(&self, start: usize, len: usize) -> TimeSeriesDataset {
        TimeSeriesDataset {
            values: self.values[start * self.channels..(start + len) * self.channels].to_vec(),
            time_steps: len,
            channels: self.channels,
            channel_names: self.channel_names.clone(),
        }
    }
}

/// Per-channel z-score statistics, always computed from a training split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Means and standard deviations per channel. A channel whose std falls
    /// at or below 1e-8 cannot be standardized and is reported by name.
    pub fn compute(ds: &TimeSeriesDataset) -> Result<NormStats> {
        let c = ds.channels;
        let n = ds.time_steps as f64;
        if ds.time_steps == 0 {
            return Err(Error::Data("cannot compute statistics of an empty split".into()));
        }
        let mut mean = vec![0.0f64; c];
        for t in 0..ds.time_steps {
            for (m, &v) in mean.iter_mut().zip(ds.row(t)) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0f64; c];
        for t in 0..ds.time_steps {
            for (ch, &v) in ds.row(t).iter().enumerate() {
                let d = v as f64 - mean[ch];
                var[ch] += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        for (ch, &s) in std.iter().enumerate() {
            if s <= 1e-8 {
                return Err(Error::DegenerateChannel { channel: ch, std: s });
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, ds: &TimeSeriesDataset) -> TimeSeriesDataset {
        assert_eq!(self.mean.len(), ds.channels, "stats channel count mismatch");
        let mut out = ds.clone();
        for t in 0..out.time_steps {
            let row = &mut out.values[t * out.channels..][..out.channels];
            for (ch, v) in row.iter_mut().enumerate() {
                *v = ((*v as f64 - self.mean[ch]) / self.std[ch]) as f32;
            }
        }
        out
    }
}

/// Supervised windows, row-major [count x window_len x channels] where
/// window_len = lookback + horizon. For classification sets, horizon is 0 and
/// each window carries a label.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub windows: Vec<f32>,
    pub count: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub labels: Option<Vec<u32>>,
}

impl WindowSet {
    pub fn window_len(&self) -> usize {
        self.lookback + self.horizon
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let len = self.window_len() * self.channels;
        &self.windows[i * len..][..len]
    }

    /// Flat [indices.len() x window_len x channels] batch buffer.
    pub fn batch_values(&self, indices: &[usize]) -> Vec<f32> {
        let len = self.window_len() * self.channels;
        let mut out = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            out.extend_from_slice(self.window(i));
        }
        out
    }

    /// New set holding a's windows followed by b's. The two sets must agree
    /// on geometry and on whether they carry labels.
    pub fn concat(&self, other: &WindowSet) -> Result<WindowSet> {
        if self.lookback != other.lookback
            || self.horizon != other.horizon
            || self.channels != other.channels
        {
            return Err(Error::Data(format!(
                "window geometry mismatch: {}+{}x{} vs {}+{}x{}",
                self.lookback, self.horizon, self.channels, other.lookback, other.horizon, other.channels
            )));
        }
        let labels = match (&self.labels, &other.labels) {
            (None, None) => None,
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => return Err(Error::Data("cannot concatenate labeled with unlabeled windows".into())),
        };
        let mut windows = self.windows.clone();
        windows.extend_from_slice(&other.windows);
        Ok(WindowSet {
            windows,
            count: self.count + other.count,
            lookback: self.lookback,
            horizon: self.horizon,
            channels: self.channels,
            labels,
        })
    }

    /// New set holding only the given windows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            windows: self.batch_values(indices),
            count: indices.len(),
            lookback: self.lookback,
            horizon: self.horizon,
            channels: self.channels,
            labels: self
                .labels
                .as_ref()
                .map(|ls| indices.iter().map(|&i| ls[i]).collect()),
        }
    }
}

fn parse_ratio_triple(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    for (name, r) in [("train", a), ("val", b), ("test", c)] {
        if !(r > 0.0) {
            return Err(Error::Config(format!("{name} ratio must be positive, got {r}")));
        }
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {}", a + b + c)));
    }
    Ok(())
}

/// Chronological split: floor allocation for train and val, remainder to
/// test, preserving order and leaving no gaps.
pub fn split_chronological(
    ds: &TimeSeriesDataset,
    ratios: (f64, f64, f64),
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset)> {
    parse_ratio_triple(ratios)?;
    let t = ds.time_steps;
    let n_train = (ratios.0 * t as f64).floor() as usize;
    let n_val = (ratios.1 * t as f64).floor() as usize;
    let n_test = t - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "split of {t} steps at {ratios:?} leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    Ok((
        ds.carved(0, n_train),
        ds.carved(n_train, n_val),
        ds.carved(n_train + n_val, n_test),
    ))
}

/// Two-way chronological split with floor allocation to the head.
pub fn split_fraction(ds: &TimeSeriesDataset, frac: f64) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1), got {frac}")));
    }
    let head = (frac * ds.time_steps as f64).floor() as usize;
    let tail = ds.time_steps - head;
    if head == 0 || tail == 0 {
        return Err(Error::Data(format!(
            "fraction {frac} of {} steps leaves an empty part",
            ds.time_steps
        )));
    }
    Ok((ds.carved(0, head), ds.carved(head, tail)))
}

/// Sliding supervised windows: window w covers steps [w*stride,
/// w*stride + lookback + horizon), all channels. Count is
/// floor((T - lookback - horizon) / stride) + 1.
pub fn make_windows(ds: &TimeSeriesDataset, lookback: usize, horizon: usize, stride: usize) -> Result<WindowSet> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "lookback, horizon and stride must be positive, got {lookback}/{horizon}/{stride}"
        )));
    }
    let need = lookback + horizon;
    if ds.time_steps < need {
        return Err(Error::Data(format!(
            "series has {} steps but one window needs {need}",
            ds.time_steps
        )));
    }
    let count = (ds.time_steps - need) / stride + 1;
    let len = need * ds.channels;
    let mut windows = Vec::with_capacity(count * len);
    for w in 0..count {
        let start = w * stride;
        windows.extend_from_slice(&ds.values[start * ds.channels..(start + need) * ds.channels]);
    }
    Ok(WindowSet {
        windows,
        count,
        lookback,
        horizon,
        channels: ds.channels,
        labels: None,
    })
}

fn split_line(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

/// Load a numeric CSV: one row per time step, one column per channel.
/// `skip_first_col` drops a leading timestamp column; `has_header` takes
/// channel names from the first row.
pub fn load_csv(path: &Path, has_header: bool, skip_first_col: bool) -> Result<TimeSeriesDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<&str> = text.lines().collect();
    while rows.last().is_some_and(|l| l.trim().is_empty()) {
        rows.pop();
    }
    let mut names: Option<Vec<String>> = None;
    let mut data_rows = rows.as_slice();
    if has_header {
        let Some((first, rest)) = rows.split_first() else {
            return Err(Error::Data(format!("{}: file is empty", path.display())));
        };
        let mut cols = split_line(first);
        if skip_first_col && !cols.is_empty() {
            cols.remove(0);
        }
        names = Some(cols.into_iter().map(String::from).collect());
        data_rows = rest;
    }
    if data_rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let skip = usize::from(skip_first_col);
    let width = split_line(data_rows[0]).len();
    if width <= skip {
        return Err(Error::Data(format!("{}: rows have no value columns", path.display())));
    }
    let channels = width - skip;
    let mut values = Vec::with_capacity(data_rows.len() * channels);
    for (r, line) in data_rows.iter().enumerate() {
        let row_no = r + 1 + usize::from(has_header);
        let cells = split_line(line);
        if cells.len() != width {
            return Err(Error::Csv {
                row: row_no,
                col: cells.len(),
                msg: format!("expected {width} columns, found {}", cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate().skip(skip) {
            let v: f32 = cell.parse().map_err(|_| Error::Csv {
                row: row_no,
                col: c + 1,
                msg: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row: row_no,
                    col: c + 1,
                    msg: format!("non-finite value: {cell:?}"),
                });
            }
            values.push(v);
        }
    }
    let mut ds = TimeSeriesDataset::new(values, channels);
    if let Some(n) = names {
        if n.len() == channels {
            ds.channel_names = n;
        }
    }
    Ok(ds)
}

/// Load a classification CSV: each row is one univariate series sample plus
/// an integer class label in `label_col` (0-based). Labels must be
/// non-negative class indices.
pub fn load_classification_csv(path: &Path, has_header: bool, label_col: usize) -> Result<WindowSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<&str> = text.lines().collect();
    while rows.last().is_some_and(|l| l.trim().is_empty()) {
        rows.pop();
    }
    let data_rows = if has_header { &rows[1.min(rows.len())..] } else { &rows[..] };
    if data_rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let width = split_line(data_rows[0]).len();
    if width < 2 {
        return Err(Error::Data(format!("{}: need at least one value column plus the label", path.display())));
    }
    if label_col >= width {
        return Err(Error::Config(format!("label column {label_col} out of {width} columns")));
    }
    let series_len = width - 1;
    let mut windows = Vec::with_capacity(data_rows.len() * series_len);
    let mut labels = Vec::with_capacity(data_rows.len());
    for (r, line) in data_rows.iter().enumerate() {
        let row_no = r + 1 + usize::from(has_header);
        let cells = split_line(line);
        if cells.len() != width {
            return Err(Error::Csv {
                row: row_no,
                col: cells.len(),
                msg: format!("expected {width} columns, found {}", cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            if c == label_col {
                let l: i64 = cell.parse().map_err(|_| Error::Csv {
                    row: row_no,
                    col: c + 1,
                    msg: format!("label is not an integer: {cell:?}"),
                })?;
                if l < 0 {
                    return Err(Error::Csv {
                        row: row_no,
                        col: c + 1,
                        msg: format!("label must be a non-negative class index, got {l}"),
                    });
                }
                labels.push(l as u32);
            } else {
                let v: f32 = cell.parse().map_err(|_| Error::Csv {
                    row: row_no,
                    col: c + 1,
                    msg: format!("not a number: {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv {
                        row: row_no,
                        col: c + 1,
                        msg: format!("non-finite value: {cell:?}"),
                    });
                }
                windows.push(v);
            }
        }
    }
    Ok(WindowSet {
        windows,
        count: data_rows.len(),
        lookback: series_len,
        horizon: 0,
        channels: 1,
        labels: Some(labels),
    })
}
