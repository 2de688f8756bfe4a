//! Dataset pipeline: CSV ingestion, per-series normalization, chronological
//! splitting, rolling-window construction, missing-data simulation, and a
//! planted-structure synthetic generator for desk-scale experiments.
//!
//! Values and observation masks travel together everywhere. Missingness is
//! mask-only: simulators never touch the underlying values, and zero-filling
//! happens once, at window export.

use std::path::Path;

use rand::Rng;
use rand_distr::Distribution;
use thiserror::Error;

use crate::structure::{IncidenceMatrix, IncidenceMode};
use crate::tensor::Tensor;

/// Mean run length (steps) for block-missing and sensor-failure spans.
pub const BLOCK_RUN_MEAN: f64 = 10.0;
/// Smallest denominator a fitted [`Normalizer`] will divide by.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Errors from loading, transforming, or generating datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        /// 1-based file row (the header is row 1).
        row: usize,
        /// 1-based column.
        col: usize,
        message: String,
    },
    #[error("ragged rows: row {row} has {got} cells, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("table too short: {0}")]
    TooShort(String),
    #[error("data configuration error: {0}")]
    Config(String),
}

/// A multivariate panel: `t_len` steps of `n` series with `c` channels each,
/// stored row-major as `[t][series][channel]`, plus a matching binary
/// observation mask (1 = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Option<Vec<f64>>,
    pub names: Vec<String>,
    values: Vec<f64>,
    mask: Vec<f64>,
    t_len: usize,
    n: usize,
    c: usize,
}

impl SeriesTable {
    /// Build a table, validating lengths, finiteness, mask binarity, and
    /// timestamp monotonicity.
    pub fn new(
        timestamps: Option<Vec<f64>>,
        names: Vec<String>,
        values: Vec<f64>,
        mask: Vec<f64>,
        t_len: usize,
        c: usize,
    ) -> Result<Self, DataError> {
        let n = names.len();
        if n == 0 || c == 0 || t_len == 0 {
            return Err(DataError::Config(format!(
                "table dimensions must be positive, got T={t_len}, n={n}, c={c}"
            )));
        }
        let expect = t_len * n * c;
        if values.len() != expect || mask.len() != expect {
            return Err(DataError::Config(format!(
                "expected {expect} values and mask entries (T={t_len}, n={n}, c={c}), got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Config(format!("non-finite value {bad} in table")));
        }
        if mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
            return Err(DataError::Config("mask entries must be 0 or 1".into()));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != t_len {
                return Err(DataError::Config(format!(
                    "expected {t_len} timestamps, got {}",
                    ts.len()
                )));
            }
            if let Some(w) = ts.windows(2).position(|w| w[1] <= w[0]) {
                return Err(DataError::Config(format!(
                    "timestamps must be strictly increasing; violated between rows {} and {}",
                    w + 1,
                    w + 2
                )));
            }
        }
        Ok(Self {
            timestamps,
            names,
            values,
            mask,
            t_len,
            n,
            c,
        })
    }

    /// Fully observed table from raw values.
    pub fn fully_observed(
        names: Vec<String>,
        values: Vec<f64>,
        t_len: usize,
        c: usize,
    ) -> Result<Self, DataError> {
        let mask = vec![1.0; values.len()];
        Self::new(None, names, values, mask, t_len, c)
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn series_count(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    fn index(&self, t: usize, series: usize, channel: usize) -> usize {
        (t * self.n + series) * self.c + channel
    }

    pub fn value(&self, t: usize, series: usize, channel: usize) -> f64 {
        self.values[self.index(t, series, channel)]
    }

    pub fn observed(&self, t: usize, series: usize, channel: usize) -> bool {
        self.mask[self.index(t, series, channel)] == 1.0
    }

    /// Number of observed (mask = 1) entries.
    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|m| **m == 1.0).count()
    }

    /// Contiguous row slice `[start, end)` as a new table.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<SeriesTable, DataError> {
        if start >= end || end > self.t_len {
            return Err(DataError::Config(format!(
                "invalid row slice [{start}, {end}) of a {}-row table",
                self.t_len
            )));
        }
        let row = self.n * self.c;
        SeriesTable::new(
            self.timestamps.as_ref().map(|ts| ts[start..end].to_vec()),
            self.names.clone(),
            self.values[start * row..end * row].to_vec(),
            self.mask[start * row..end * row].to_vec(),
            end - start,
            self.c,
        )
    }

    fn set_missing(&mut self, t: usize, series: usize, channel: usize) {
        let idx = self.index(t, series, channel);
        self.mask[idx] = 0.0;
    }
}

/// Parse a wide-format CSV: a header row of series names, one row per
/// timestep, numeric cells, empty cells meaning "missing". Multi-channel
/// series use repeated column groups named `name.ch0,name.ch1,…`. A leading
/// column named `time` or `timestamp` is parsed as a strictly increasing
/// numeric timestamp sequence.
pub fn load_csv(path: &Path) -> Result<SeriesTable, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if header.is_empty() {
        return Err(DataError::Config("empty header row".into()));
    }
    let has_time = matches!(header[0].to_ascii_lowercase().as_str(), "time" | "timestamp");
    let data_start = usize::from(has_time);
    let columns = &header[data_start..];
    if columns.is_empty() {
        return Err(DataError::Config("no series columns in header".into()));
    }

    // Group columns into (series, channel) pairs. Either every column is a
    // plain name (c = 1) or every column is `base.ch<k>` with the channels of
    // one series adjacent and in order.
    let parsed: Vec<Option<(String, usize)>> = columns
        .iter()
        .map(|name| {
            name.rsplit_once(".ch").and_then(|(base, idx)| {
                idx.parse::<usize>().ok().map(|k| (base.to_string(), k))
            })
        })
        .collect();
    let (names, channels) = if parsed.iter().all(|p| p.is_none()) {
        (columns.to_vec(), 1)
    } else if parsed.iter().all(|p| p.is_some()) {
        let mut names: Vec<String> = Vec::new();
        let mut c = 0usize;
        let mut expected_ch = 0usize;
        for pair in parsed.iter().map(|p| p.as_ref().unwrap()) {
            let (base, k) = pair;
            if *k == 0 {
                if !names.is_empty() && c == 0 {
                    c = expected_ch;
                }
                if c != 0 && expected_ch != c {
                    return Err(DataError::Config(format!(
                        "series `{}` has {} channels, expected {c}",
                        names.last().unwrap(),
                        expected_ch
                    )));
                }
                names.push(base.clone());
                expected_ch = 0;
            } else if names.last().map(String::as_str) != Some(base) || *k != expected_ch {
                return Err(DataError::Config(format!(
                    "channel columns must be grouped and ordered; unexpected `{base}.ch{k}`"
                )));
            }
            expected_ch += 1;
        }
        if c == 0 {
            c = expected_ch;
        } else if expected_ch != c {
            return Err(DataError::Config(format!(
                "series `{}` has {expected_ch} channels, expected {c}",
                names.last().unwrap()
            )));
        }
        (names, c)
    } else {
        return Err(DataError::Config(
            "either all columns or none must use the `name.ch<k>` channel convention".into(),
        ));
    };

    let n = names.len();
    let expected_cells = header.len();
    let mut values: Vec<f64> = Vec::new();
    let mut mask: Vec<f64> = Vec::new();
    let mut timestamps: Vec<f64> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let file_row = row_idx + 2; // header occupies row 1
        if record.len() != expected_cells {
            return Err(DataError::RaggedRows {
                row: file_row,
                expected: expected_cells,
                got: record.len(),
            });
        }
        if has_time {
            let cell = &record[0];
            let ts: f64 = cell.parse().map_err(|_| DataError::Parse {
                row: file_row,
                col: 1,
                message: format!("invalid timestamp `{cell}`"),
            })?;
            if let Some(prev) = timestamps.last() {
                if ts <= *prev {
                    return Err(DataError::Parse {
                        row: file_row,
                        col: 1,
                        message: format!("timestamps must be strictly increasing, got {ts} after {prev}"),
                    });
                }
            }
            timestamps.push(ts);
        }
        for (cell_idx, cell) in record.iter().enumerate().skip(data_start) {
            if cell.is_empty() {
                values.push(0.0);
                mask.push(0.0);
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                    row: file_row,
                    col: cell_idx + 1,
                    message: format!("invalid number `{cell}`"),
                })?;
                if !v.is_finite() {
                    return Err(DataError::Parse {
                        row: file_row,
                        col: cell_idx + 1,
                        message: format!("non-finite number `{cell}`"),
                    });
                }
                values.push(v);
                mask.push(1.0);
            }
        }
    }
    let t_len = values.len() / (n * channels);
    if t_len == 0 {
        return Err(DataError::TooShort("csv has a header but no data rows".into()));
    }
    SeriesTable::new(
        has_time.then_some(timestamps),
        names,
        values,
        mask,
        t_len,
        channels,
    )
}

/// Normalization family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Zero mean, unit variance per (series, channel).
    Zscore,
    /// Map the observed range to `[0, 1]` per (series, channel).
    Minmax,
}

impl std::str::FromStr for NormKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "zscore" => Ok(NormKind::Zscore),
            "minmax" => Ok(NormKind::Minmax),
            other => Err(DataError::Config(format!(
                "unknown normalization `{other}` (expected zscore or minmax)"
            ))),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Zscore => "zscore",
            NormKind::Minmax => "minmax",
        })
    }
}

/// Per-(series, channel) affine normalizer, fitted on observed entries of
/// the training split only. Normalization is `(x - shift) / scale`; the
/// scale is floored at [`SCALE_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub kind: NormKind,
    /// Mean (zscore) or minimum (minmax), length `n * c`.
    pub shift: Vec<f64>,
    /// Standard deviation (zscore) or range (minmax), floored, length `n * c`.
    pub scale: Vec<f64>,
    /// Fitting-scope tag: number of rows in the table this was fitted on.
    pub fitted_rows: usize,
    n: usize,
    c: usize,
}

impl Normalizer {
    /// Fit statistics on the observed entries of `table` (intended to be the
    /// training split). A (series, channel) with no observed entries gets
    /// the identity transform.
    pub fn fit(kind: NormKind, table: &SeriesTable) -> Self {
        let (n, c) = (table.series_count(), table.channels());
        let mut shift = vec![0.0; n * c];
        let mut scale = vec![1.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let observed: Vec<f64> = (0..table.t_len())
                    .filter(|t| table.observed(*t, i, ch))
                    .map(|t| table.value(t, i, ch))
                    .collect();
                if observed.is_empty() {
                    continue;
                }
                let slot = i * c + ch;
                match kind {
                    NormKind::Zscore => {
                        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
                        let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                            / observed.len() as f64;
                        shift[slot] = mean;
                        scale[slot] = var.sqrt().max(SCALE_FLOOR);
                    }
                    NormKind::Minmax => {
                        let lo = observed.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        shift[slot] = lo;
                        scale[slot] = (hi - lo).max(SCALE_FLOOR);
                    }
                }
            }
        }
        Self {
            kind,
            shift,
            scale,
            fitted_rows: table.t_len(),
            n,
            c,
        }
    }

    fn check_table(&self, table: &SeriesTable) -> Result<(), DataError> {
        if table.series_count() != self.n || table.channels() != self.c {
            return Err(DataError::Config(format!(
                "normalizer fitted for n={}, c={} cannot transform a table with n={}, c={}",
                self.n,
                self.c,
                table.series_count(),
                table.channels()
            )));
        }
        Ok(())
    }

    /// Normalize every entry (masked entries included; they are zero-filled
    /// later at export and never read).
    pub fn normalize(&self, table: &SeriesTable) -> Result<SeriesTable, DataError> {
        self.check_table(table)?;
        let mut out = table.clone();
        for t in 0..out.t_len {
            for slot in 0..self.n * self.c {
                let idx = t * self.n * self.c + slot;
                out.values[idx] = (out.values[idx] - self.shift[slot]) / self.scale[slot];
            }
        }
        Ok(out)
    }

    /// Invert [`Normalizer::normalize`].
    pub fn denormalize(&self, table: &SeriesTable) -> Result<SeriesTable, DataError> {
        self.check_table(table)?;
        let mut out = table.clone();
        for t in 0..out.t_len {
            for slot in 0..self.n * self.c {
                let idx = t * self.n * self.c + slot;
                out.values[idx] = out.values[idx] * self.scale[slot] + self.shift[slot];
            }
        }
        Ok(out)
    }

    /// Invert a single normalized value for (series, channel).
    pub fn denormalize_value(&self, series: usize, channel: usize, v: f64) -> f64 {
        let slot = series * self.c + channel;
        v * self.scale[slot] + self.shift[slot]
    }

    /// Scale (std or range) for a single (series, channel).
    pub fn scale_for(&self, series: usize, channel: usize) -> f64 {
        self.scale[series * self.c + channel]
    }
}

/// Chronological split into train/val/test with sizes `floor(T * r_k / sum)`
/// and the integer remainder assigned to train.
pub fn split_chronological(
    table: &SeriesTable,
    ratio: (usize, usize, usize),
) -> Result<(SeriesTable, SeriesTable, SeriesTable), DataError> {
    let (r_train, r_val, r_test) = ratio;
    if r_train == 0 || r_val == 0 || r_test == 0 {
        return Err(DataError::Config(format!(
            "split ratios must be positive, got {r_train}:{r_val}:{r_test}"
        )));
    }
    let total = r_train + r_val + r_test;
    let t = table.t_len();
    let val_len = t * r_val / total;
    let test_len = t * r_test / total;
    let train_len = t - val_len - test_len; // floor share plus remainder
    if train_len == 0 || val_len == 0 || test_len == 0 {
        return Err(DataError::TooShort(format!(
            "T={t} is too short for a {r_train}:{r_val}:{r_test} split"
        )));
    }
    let train = table.slice_rows(0, train_len)?;
    let val = table.slice_rows(train_len, train_len + val_len)?;
    let test = table.slice_rows(train_len + val_len, t)?;
    Ok((train, val, test))
}

/// One rolling window: zero-filled input/target tensors plus their masks.
#[derive(Debug, Clone)]
pub struct Window {
    /// `[n, tau, c]`, masked entries zero-filled.
    pub input: Tensor,
    /// `[n, upsilon, c]`, masked entries zero-filled.
    pub target: Tensor,
    /// `[n, tau, c]` binary.
    pub input_mask: Tensor,
    /// `[n, upsilon, c]` binary.
    pub target_mask: Tensor,
}

/// A batch of rolling windows, stored stacked (`[b, n, len, c]`).
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub input_mask: Tensor,
    pub target_mask: Tensor,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slice(t: &Tensor, i: usize) -> Tensor {
        let per = t.shape()[1..].iter().product::<usize>();
        Tensor::new(&t.shape()[1..], t.values()[i * per..(i + 1) * per].to_vec())
            .expect("window slice of a valid batch")
    }

    /// Extract window `i` as standalone tensors.
    pub fn window(&self, i: usize) -> Window {
        Window {
            input: Self::slice(&self.inputs, i),
            target: Self::slice(&self.targets, i),
            input_mask: Self::slice(&self.input_mask, i),
            target_mask: Self::slice(&self.target_mask, i),
        }
    }

    /// Keep only windows with at least one observed target entry.
    pub fn retain_observed_targets(&self) -> WindowBatch {
        let keep: Vec<usize> = (0..self.len())
            .filter(|i| {
                let per = self.target_mask.shape()[1..].iter().product::<usize>();
                self.target_mask.values()[i * per..(i + 1) * per]
                    .iter()
                    .any(|m| *m == 1.0)
            })
            .collect();
        let gather = |t: &Tensor| {
            let per = t.shape()[1..].iter().product::<usize>();
            let mut values = Vec::with_capacity(keep.len() * per);
            for i in &keep {
                values.extend_from_slice(&t.values()[i * per..(i + 1) * per]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = keep.len();
            Tensor::new(&shape, values).expect("filtered batch")
        };
        WindowBatch {
            inputs: gather(&self.inputs),
            targets: gather(&self.targets),
            input_mask: gather(&self.input_mask),
            target_mask: gather(&self.target_mask),
        }
    }
}

/// Build rolling windows: inputs cover `[k, k+tau)`, targets
/// `[k+tau, k+tau+upsilon)`, start offsets `k = 0, stride, 2*stride, …`.
/// Window count is `floor((T - tau - upsilon) / stride) + 1`. Masked entries
/// are zero-filled in the exported tensors.
pub fn make_windows(
    part: &SeriesTable,
    tau: usize,
    upsilon: usize,
    stride: usize,
) -> Result<WindowBatch, DataError> {
    if tau == 0 || upsilon == 0 || stride == 0 {
        return Err(DataError::Config(format!(
            "tau, upsilon and stride must be positive, got {tau}, {upsilon}, {stride}"
        )));
    }
    let t = part.t_len();
    if t < tau + upsilon {
        return Err(DataError::TooShort(format!(
            "need at least tau + upsilon = {} rows, got {t}",
            tau + upsilon
        )));
    }
    let count = (t - tau - upsilon) / stride + 1;
    let (n, c) = (part.series_count(), part.channels());

    // Gather [start, start+len) rows transposed to [n, len, c], zero-filling
    // masked values.
    let gather = |start: usize, len: usize, fill: bool, source: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * len * c);
        for i in 0..n {
            for t_off in 0..len {
                for ch in 0..c {
                    let idx = ((start + t_off) * n + i) * c + ch;
                    let keep = if fill { part.mask()[idx] } else { 1.0 };
                    out.push(source[idx] * keep);
                }
            }
        }
        out
    };

    let mut inputs = Vec::with_capacity(count * n * tau * c);
    let mut targets = Vec::with_capacity(count * n * upsilon * c);
    let mut input_mask = Vec::with_capacity(count * n * tau * c);
    let mut target_mask = Vec::with_capacity(count * n * upsilon * c);
    for w in 0..count {
        let start = w * stride;
        inputs.extend(gather(start, tau, true, part.values()));
        targets.extend(gather(start + tau, upsilon, true, part.values()));
        input_mask.extend(gather(start, tau, false, part.mask()));
        target_mask.extend(gather(start + tau, upsilon, false, part.mask()));
    }
    Ok(WindowBatch {
        inputs: Tensor::new(&[count, n, tau, c], inputs).expect("finite window values"),
        targets: Tensor::new(&[count, n, upsilon, c], targets).expect("finite window values"),
        input_mask: Tensor::new(&[count, n, tau, c], input_mask).expect("binary mask"),
        target_mask: Tensor::new(&[count, n, upsilon, c], target_mask).expect("binary mask"),
    })
}

/// Missingness pattern family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingPattern {
    /// Independent entries, exact count `floor(ratio * observed)`.
    Point,
    /// Contiguous per-series runs (geometric lengths, mean
    /// [`BLOCK_RUN_MEAN`]) until the per-series ratio is met.
    Block,
}

impl std::str::FromStr for MissingPattern {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "point" => Ok(MissingPattern::Point),
            "block" => Ok(MissingPattern::Block),
            other => Err(DataError::Config(format!(
                "unknown missingness pattern `{other}` (expected point or block)"
            ))),
        }
    }
}

impl std::fmt::Display for MissingPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MissingPattern::Point => "point",
            MissingPattern::Block => "block",
        })
    }
}

/// Geometric run length with the given mean (support 1, 2, …).
fn run_length<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let p = 1.0 / mean;
    let u: f64 = rng.gen_range(0.0..1.0);
    let len = ((1.0 - u).ln() / (1.0 - p).ln()).ceil();
    (len as usize).max(1)
}

/// Simulate missing data on top of whatever is already missing. `pattern`
/// masking removes `ratio` of the observed entries (exactly, for point;
/// stopping within one run past the per-series target, for block), then each
/// (series, step) independently starts a whole-series failure run with
/// probability `sensor_fail_prob`. Mask-only: values are never modified, and
/// already-missing entries are never unmasked.
pub fn apply_missingness<R: Rng>(
    table: &SeriesTable,
    pattern: MissingPattern,
    ratio: f64,
    sensor_fail_prob: f64,
    rng: &mut R,
) -> Result<SeriesTable, DataError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(DataError::Config(format!(
            "missing ratio must lie in [0, 1), got {ratio}"
        )));
    }
    if !(0.0..1.0).contains(&sensor_fail_prob) {
        return Err(DataError::Config(format!(
            "sensor failure probability must lie in [0, 1), got {sensor_fail_prob}"
        )));
    }
    let mut out = table.clone();
    let (t_len, n, c) = (table.t_len(), table.series_count(), table.channels());

    if ratio > 0.0 {
        match pattern {
            MissingPattern::Point => {
                let observed: Vec<usize> = (0..out.mask.len())
                    .filter(|i| out.mask[*i] == 1.0)
                    .collect();
                let remove = (ratio * observed.len() as f64).floor() as usize;
                for pick in rand::seq::index::sample(rng, observed.len(), remove) {
                    out.mask[observed[pick]] = 0.0;
                }
            }
            MissingPattern::Block => {
                for i in 0..n {
                    let observed_i = (0..t_len)
                        .flat_map(|t| (0..c).map(move |ch| (t, ch)))
                        .filter(|(t, ch)| table.observed(*t, i, *ch))
                        .count();
                    let target = (ratio * observed_i as f64).floor() as usize;
                    let mut removed = 0usize;
                    let mut guard = 0usize;
                    while removed < target && guard < 100 * t_len {
                        guard += 1;
                        let start = rng.gen_range(0..t_len);
                        let len = run_length(rng, BLOCK_RUN_MEAN);
                        for t in start..(start + len).min(t_len) {
                            for ch in 0..c {
                                let idx = out.index(t, i, ch);
                                if out.mask[idx] == 1.0 {
                                    out.mask[idx] = 0.0;
                                    removed += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if sensor_fail_prob > 0.0 {
        for i in 0..n {
            let mut t = 0usize;
            while t < t_len {
                if rng.gen_range(0.0..1.0) < sensor_fail_prob {
                    let len = run_length(rng, BLOCK_RUN_MEAN);
                    for tt in t..(t + len).min(t_len) {
                        for ch in 0..c {
                            out.set_missing(tt, i, ch);
                        }
                    }
                    t += len.max(1);
                } else {
                    t += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Generate a panel with planted hypergraph structure: `m_true` latent
/// seasonal drivers with distinct periods; series `i` follows the driver of
/// its block (blocks are contiguous, size `n / m_true`) under an integer
/// phase shift of at most a ⅛ period, plus `N(0, noise_std²)` noise.
/// Returns the table (fully observed, c = 1) and the planted incidence
/// (`[n, m_true]`, one 1 per row, `n / m_true` per column).
pub fn generate_synthetic<R: Rng>(
    n: usize,
    t_len: usize,
    m_true: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<(SeriesTable, IncidenceMatrix), DataError> {
    if n == 0 || t_len == 0 || m_true == 0 {
        return Err(DataError::Config(
            "n, T and m_true must all be positive".into(),
        ));
    }
    if n % m_true != 0 {
        return Err(DataError::Config(format!(
            "n = {n} must be divisible by m_true = {m_true}"
        )));
    }
    if !noise_std.is_finite() || noise_std < 0.0 {
        return Err(DataError::Config(format!(
            "noise_std must be finite and non-negative, got {noise_std}"
        )));
    }
    let block = n / m_true;
    let periods: Vec<f64> = (0..m_true).map(|j| 16.0 * (j + 1) as f64).collect();
    let amplitudes: Vec<f64> = (0..m_true)
        .map(|j| {
            if m_true == 1 {
                2.0
            } else {
                1.5 + j as f64 / (m_true - 1) as f64
            }
        })
        .collect();
    let shifts: Vec<usize> = (0..n)
        .map(|i| {
            let p = periods[i / block];
            rng.gen_range(0..=((p / 8.0).floor() as usize))
        })
        .collect();
    let noise = if noise_std > 0.0 {
        Some(rand_distr::Normal::new(0.0, noise_std).expect("valid std"))
    } else {
        None
    };

    let mut values = Vec::with_capacity(t_len * n);
    for t in 0..t_len {
        for i in 0..n {
            let j = i / block;
            let phase = 2.0 * std::f64::consts::PI * (t + shifts[i]) as f64 / periods[j];
            let mut v = amplitudes[j] * phase.sin();
            if let Some(dist) = &noise {
                v += dist.sample(rng);
            }
            values.push(v);
        }
    }
    let names = (0..n).map(|i| format!("s{i}")).collect();
    let table = SeriesTable::fully_observed(names, values, t_len, 1)?;

    let mut incidence = vec![0.0; n * m_true];
    for i in 0..n {
        incidence[i * m_true + i / block] = 1.0;
    }
    let weights = Tensor::new(&[n, m_true], incidence).expect("binary incidence");
    Ok((
        table,
        IncidenceMatrix {
            weights,
            mode: IncidenceMode::Hard,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(content.as_bytes()).unwrap();
        file.flush().unwrap();
        file
    }

    fn ramp_table(t_len: usize, n: usize) -> SeriesTable {
        let values: Vec<f64> = (0..t_len * n).map(|i| i as f64).collect();
        let names = (0..n).map(|i| format!("s{i}")).collect();
        SeriesTable::fully_observed(names, values, t_len, 1).unwrap()
    }

    #[test]
    fn load_csv_reads_a_clean_wide_file() {
        let mut content = String::from("a,b,c\n");
        for t in 0..10 {
            content.push_str(&format!("{},{},{}\n", t, t * 10, t * 100));
        }
        let file = write_csv(&content);
        let table = load_csv(file.path()).unwrap();
        assert_eq!(table.t_len(), 10);
        assert_eq!(table.series_count(), 3);
        assert_eq!(table.channels(), 1);
        assert_eq!(table.names, vec!["a", "b", "c"]);
        assert_eq!(table.observed_count(), 30);
        assert_eq!(table.value(3, 1, 0), 30.0);
        assert!(table.timestamps.is_none());
    }

    #[test]
    fn load_csv_marks_blank_cells_missing_and_zero_filled() {
        let file = write_csv("a,b\n1,2\n,4\n5,6\n");
        let table = load_csv(file.path()).unwrap();
        assert!(!table.observed(1, 0, 0));
        assert_eq!(table.value(1, 0, 0), 0.0);
        assert!(table.observed(1, 1, 0));
        assert_eq!(table.observed_count(), 5);
    }

    #[test]
    fn load_csv_rejects_ragged_rows() {
        let file = write_csv("a,b,c\n1,2,3\n4,5\n");
        match load_csv(file.path()) {
            Err(DataError::RaggedRows { row, expected, got }) => {
                assert_eq!(row, 3);
                assert_eq!(expected, 3);
                assert_eq!(got, 2);
            }
            other => panic!("expected RaggedRows, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_locates_parse_errors() {
        let file = write_csv("a,b\n1,2\n3,oops\n");
        match load_csv(file.path()) {
            Err(DataError::Parse { row, col, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(col, 2);
            }
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_groups_channel_columns() {
        let file = write_csv("a.ch0,a.ch1,b.ch0,b.ch1\n1,2,3,4\n5,6,7,8\n");
        let table = load_csv(file.path()).unwrap();
        assert_eq!(table.series_count(), 2);
        assert_eq!(table.channels(), 2);
        assert_eq!(table.names, vec!["a", "b"]);
        assert_eq!(table.value(0, 1, 0), 3.0);
        assert_eq!(table.value(1, 0, 1), 6.0);
    }

    #[test]
    fn load_csv_parses_and_validates_timestamps() {
        let file = write_csv("time,a\n0.5,1\n1.5,2\n2.5,3\n");
        let table = load_csv(file.path()).unwrap();
        assert_eq!(table.timestamps.as_deref(), Some(&[0.5, 1.5, 2.5][..]));
        assert_eq!(table.series_count(), 1);

        let bad = write_csv("time,a\n2,1\n1,2\n");
        assert!(matches!(
            load_csv(bad.path()),
            Err(DataError::Parse { row: 3, col: 1, .. })
        ));
    }

    #[test]
    fn zscore_normalization_round_trips_and_standardizes() {
        let mut rng = seeded(1);
        let values: Vec<f64> = (0..200).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let table =
            SeriesTable::fully_observed(vec!["a".into(), "b".into()], values, 100, 1).unwrap();
        let norm = Normalizer::fit(NormKind::Zscore, &table);
        assert_eq!(norm.fitted_rows, 100);
        let scaled = norm.normalize(&table).unwrap();
        for i in 0..2 {
            let col: Vec<f64> = (0..100).map(|t| scaled.value(t, i, 0)).collect();
            let mean = col.iter().sum::<f64>() / 100.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "var {var}");
        }
        let back = norm.denormalize(&scaled).unwrap();
        for (a, b) in back.values().iter().zip(table.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn minmax_normalization_hits_unit_interval_and_round_trips() {
        let values = vec![2.0, 4.0, 6.0, 8.0];
        let table = SeriesTable::fully_observed(vec!["a".into()], values, 4, 1).unwrap();
        let norm = Normalizer::fit(NormKind::Minmax, &table);
        let scaled = norm.normalize(&table).unwrap();
        assert_eq!(scaled.value(0, 0, 0), 0.0);
        assert_eq!(scaled.value(3, 0, 0), 1.0);
        let back = norm.denormalize(&scaled).unwrap();
        for (a, b) in back.values().iter().zip(table.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_series_uses_the_scale_floor_and_still_round_trips() {
        let table =
            SeriesTable::fully_observed(vec!["a".into()], vec![3.0; 5], 5, 1).unwrap();
        let norm = Normalizer::fit(NormKind::Zscore, &table);
        assert_eq!(norm.scale[0], SCALE_FLOOR);
        let scaled = norm.normalize(&table).unwrap();
        assert!(scaled.values().iter().all(|v| *v == 0.0));
        let back = norm.denormalize(&scaled).unwrap();
        assert_eq!(back.values(), table.values());
    }

    #[test]
    fn normalizer_ignores_masked_entries() {
        // Observed entries are 1, 2, 3; the masked slot holds a huge value
        // that must not leak into the statistics.
        let table = SeriesTable::new(
            None,
            vec!["a".into()],
            vec![1.0, 2.0, 3.0, 1e9],
            vec![1.0, 1.0, 1.0, 0.0],
            4,
            1,
        )
        .unwrap();
        let norm = Normalizer::fit(NormKind::Zscore, &table);
        assert!((norm.shift[0] - 2.0).abs() < 1e-12);
        let minmax = Normalizer::fit(NormKind::Minmax, &table);
        assert!((minmax.shift[0] - 1.0).abs() < 1e-12);
        assert!((minmax.scale[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn split_sizes_follow_the_floor_rule() {
        let table = ramp_table(100, 1);
        let (train, val, test) = split_chronological(&table, (7, 1, 2)).unwrap();
        assert_eq!(
            (train.t_len(), val.t_len(), test.t_len()),
            (70, 10, 20)
        );

        let table = ramp_table(10, 1);
        let (train, val, test) = split_chronological(&table, (6, 2, 2)).unwrap();
        assert_eq!((train.t_len(), val.t_len(), test.t_len()), (6, 2, 2));

        // Remainder goes to train.
        let table = ramp_table(101, 1);
        let (train, val, test) = split_chronological(&table, (7, 1, 2)).unwrap();
        assert_eq!(
            (train.t_len(), val.t_len(), test.t_len()),
            (71, 10, 20)
        );
    }

    #[test]
    fn split_is_contiguous_and_order_preserving() {
        let table = ramp_table(23, 2);
        let (train, val, test) = split_chronological(&table, (7, 1, 2)).unwrap();
        let mut rebuilt = train.values().to_vec();
        rebuilt.extend_from_slice(val.values());
        rebuilt.extend_from_slice(test.values());
        assert_eq!(rebuilt, table.values());
    }

    #[test]
    fn split_rejects_bad_ratios_and_short_tables() {
        let table = ramp_table(10, 1);
        assert!(matches!(
            split_chronological(&table, (7, 0, 2)),
            Err(DataError::Config(_))
        ));
        let tiny = ramp_table(3, 1);
        assert!(matches!(
            split_chronological(&tiny, (7, 1, 2)),
            Err(DataError::TooShort(_))
        ));
    }

    #[test]
    fn window_counts_match_the_formula() {
        let table = ramp_table(10, 1);
        assert_eq!(make_windows(&table, 3, 2, 1).unwrap().len(), 6);
        assert_eq!(make_windows(&table, 3, 2, 2).unwrap().len(), 3);
        let exact = ramp_table(5, 1);
        assert_eq!(make_windows(&exact, 3, 2, 1).unwrap().len(), 1);
        let short = ramp_table(4, 1);
        assert!(matches!(
            make_windows(&short, 3, 2, 1),
            Err(DataError::TooShort(_))
        ));
    }

    #[test]
    fn windows_never_leak_target_time_into_inputs() {
        // Ramp series: value at step t is exactly t, so boundaries are
        // directly readable.
        let table = ramp_table(10, 1);
        let batch = make_windows(&table, 3, 2, 1).unwrap();
        for w in 0..batch.len() {
            let window = batch.window(w);
            assert_eq!(window.input.shape(), &[1, 3, 1]);
            assert_eq!(window.target.shape(), &[1, 2, 1]);
            let last_input = window.input.values()[2];
            let first_target = window.target.values()[0];
            assert_eq!(last_input, (w + 2) as f64);
            assert_eq!(first_target, (w + 3) as f64);
            assert!(last_input < first_target);
        }
    }

    #[test]
    fn windows_zero_fill_masked_entries() {
        let mut mask = vec![1.0; 12];
        mask[4] = 0.0; // t=4 of the single series
        let values: Vec<f64> = (0..12).map(|i| (i + 1) as f64).collect();
        let table = SeriesTable::new(None, vec!["a".into()], values, mask, 12, 1).unwrap();
        let batch = make_windows(&table, 6, 2, 1).unwrap();
        let w0 = batch.window(0);
        assert_eq!(w0.input.values()[4], 0.0);
        assert_eq!(w0.input_mask.values()[4], 0.0);
        assert_eq!(w0.input.values()[3], 4.0);
    }

    #[test]
    fn retain_observed_targets_drops_fully_masked_windows() {
        let mut mask = vec![1.0; 8];
        // Steps 6 and 7 fully missing: the last window's target (t=6..8)
        // has no observations.
        mask[6] = 0.0;
        mask[7] = 0.0;
        let values: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let table = SeriesTable::new(None, vec!["a".into()], values, mask, 8, 1).unwrap();
        let batch = make_windows(&table, 4, 2, 1).unwrap();
        assert_eq!(batch.len(), 3);
        let kept = batch.retain_observed_targets();
        assert_eq!(kept.len(), 2);
        for i in 0..kept.len() {
            assert!(kept
                .window(i)
                .target_mask
                .values()
                .iter()
                .any(|m| *m == 1.0));
        }
    }

    #[test]
    fn missingness_identity_when_ratio_and_hazard_are_zero() {
        let table = ramp_table(50, 3);
        let mut rng = seeded(2);
        let out =
            apply_missingness(&table, MissingPattern::Point, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(out, table);
    }

    #[test]
    fn point_missingness_masks_an_exact_count_and_keeps_values() {
        let table = ramp_table(100, 1);
        let mut rng = seeded(3);
        let out =
            apply_missingness(&table, MissingPattern::Point, 0.5, 0.0, &mut rng).unwrap();
        assert_eq!(out.observed_count(), 50);
        assert_eq!(out.values(), table.values());
    }

    #[test]
    fn point_missingness_never_unmasks() {
        let mut mask = vec![1.0; 100];
        for i in 0..20 {
            mask[i * 5] = 0.0;
        }
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let table =
            SeriesTable::new(None, vec!["a".into()], values, mask.clone(), 100, 1).unwrap();
        let mut rng = seeded(4);
        let out =
            apply_missingness(&table, MissingPattern::Point, 0.25, 0.0, &mut rng).unwrap();
        // 80 observed, 25% of those masked -> 60 remain.
        assert_eq!(out.observed_count(), 60);
        for i in 0..100 {
            if mask[i] == 0.0 {
                assert_eq!(out.mask()[i], 0.0);
            }
        }
    }

    #[test]
    fn block_missingness_lands_near_the_requested_ratio() {
        let table = ramp_table(1000, 1);
        let mut rng = seeded(0);
        let out =
            apply_missingness(&table, MissingPattern::Block, 0.3, 0.0, &mut rng).unwrap();
        let masked = 1000 - out.observed_count();
        let fraction = masked as f64 / 1000.0;
        assert!(
            (0.29..=0.31).contains(&fraction),
            "masked fraction {fraction}"
        );
        // Contiguity: masked steps form runs, so transitions 1->0 are far
        // rarer than masked entries.
        let transitions = out
            .mask()
            .windows(2)
            .filter(|w| w[0] == 1.0 && w[1] == 0.0)
            .count();
        assert!(transitions * 3 < masked, "{transitions} runs, {masked} masked");
    }

    #[test]
    fn sensor_failures_mask_whole_series_runs() {
        let table = ramp_table(1000, 5);
        let mut rng = seeded(6);
        let out = apply_missingness(
            &table,
            MissingPattern::Point,
            0.0,
            0.0015,
            &mut rng,
        )
        .unwrap();
        let masked = 5000 - out.observed_count();
        assert!(masked > 0, "hazard of 0.15% over 5000 slots should fire");
        let fraction = masked as f64 / 5000.0;
        assert!(fraction < 0.2, "fraction {fraction} implausibly high");
        assert_eq!(out.values(), table.values());
    }

    #[test]
    fn certain_sensor_failure_masks_everything() {
        let table = ramp_table(30, 2);
        let mut rng = seeded(7);
        let out = apply_missingness(
            &table,
            MissingPattern::Point,
            0.0,
            0.999999,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.observed_count(), 0);
    }

    #[test]
    fn missingness_rejects_out_of_range_parameters() {
        let table = ramp_table(10, 1);
        let mut rng = seeded(8);
        assert!(matches!(
            apply_missingness(&table, MissingPattern::Point, 1.0, 0.0, &mut rng),
            Err(DataError::Config(_))
        ));
        assert!(matches!(
            apply_missingness(&table, MissingPattern::Point, 0.1, -0.2, &mut rng),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn synthetic_blocks_are_phase_shifted_copies_when_noiseless() {
        let mut rng = seeded(9);
        // T = 128 is a whole number of periods for both drivers (16 and 32),
        // so each series visits exactly the same multiset of driver values.
        let (table, _) = generate_synthetic(6, 128, 2, 0.0, &mut rng).unwrap();
        for block in 0..2 {
            let reference: Vec<f64> = (0..128).map(|t| table.value(t, block * 3, 0)).collect();
            let mut sorted_ref = reference.clone();
            sorted_ref.sort_by(f64::total_cmp);
            for i in 1..3 {
                let series = block * 3 + i;
                let mut sorted: Vec<f64> =
                    (0..128).map(|t| table.value(t, series, 0)).collect();
                sorted.sort_by(f64::total_cmp);
                for (a, b) in sorted.iter().zip(&sorted_ref) {
                    assert!((a - b).abs() < 1e-9, "series {series}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn planted_incidence_has_equal_blocks() {
        let mut rng = seeded(10);
        let (_, incidence) = generate_synthetic(8, 64, 4, 0.1, &mut rng).unwrap();
        assert_eq!(incidence.weights.shape(), &[8, 4]);
        assert_eq!(incidence.mode, IncidenceMode::Hard);
        for j in 0..4 {
            let col: f64 = (0..8)
                .map(|i| incidence.weights.values()[i * 4 + j])
                .sum();
            assert_eq!(col, 2.0, "column {j}");
        }
        for i in 0..8 {
            let row: f64 = incidence.weights.values()[i * 4..(i + 1) * 4].iter().sum();
            assert_eq!(row, 1.0, "row {i}");
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va.sqrt() * vb.sqrt()).max(1e-12)
    }

    #[test]
    fn within_block_correlation_exceeds_cross_block() {
        let mut rng = seeded(11);
        let (table, _) = generate_synthetic(6, 256, 2, 0.1, &mut rng).unwrap();
        let series: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..256).map(|t| table.value(t, i, 0)).collect())
            .collect();
        let mut within = Vec::new();
        let mut cross = Vec::new();
        for i in 0..6 {
            for j in (i + 1)..6 {
                let r = pearson(&series[i], &series[j]);
                if i / 3 == j / 3 {
                    within.push(r);
                } else {
                    cross.push(r);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&within) > mean(&cross) + 0.2,
            "within {} vs cross {}",
            mean(&within),
            mean(&cross)
        );
    }

    #[test]
    fn synthetic_rejects_indivisible_blocks() {
        let mut rng = seeded(12);
        assert!(matches!(
            generate_synthetic(7, 64, 2, 0.1, &mut rng),
            Err(DataError::Config(_))
        ));
    }
}
