//! CSV ingestion, train/val/test splitting, standardization and
//! channel-independent window batching.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const STD_FLOOR: f64 = 1e-8;

/// Reference sizes of the public benchmark files.
pub struct BenchmarkInfo {
    pub name: &'static str,
    pub variables: usize,
    pub timesteps: usize,
    pub frequency: &'static str,
}

pub const BENCHMARKS: &[BenchmarkInfo] = &[
    BenchmarkInfo { name: "weather", variables: 21, timesteps: 52696, frequency: "10 Minutes" },
    BenchmarkInfo { name: "traffic", variables: 862, timesteps: 17544, frequency: "1 Hour" },
    BenchmarkInfo { name: "electricity", variables: 321, timesteps: 26304, frequency: "1 Hour" },
    BenchmarkInfo { name: "etth1", variables: 7, timesteps: 17420, frequency: "1 Hour" },
    BenchmarkInfo { name: "etth2", variables: 7, timesteps: 17420, frequency: "1 Hour" },
    BenchmarkInfo { name: "ettm1", variables: 7, timesteps: 69680, frequency: "15 Minutes" },
    BenchmarkInfo { name: "ettm2", variables: 7, timesteps: 69680, frequency: "15 Minutes" },
];

pub fn benchmark_info(path: &Path) -> Option<&'static BenchmarkInfo> {
    let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
    BENCHMARKS.iter().find(|b| b.name == stem)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitProfile {
    /// 12/4/4 months of hourly data.
    Etth,
    /// 12/4/4 months of 15-minute data.
    Ettm,
    Generic { train: f64, val: f64, test: f64 },
}

impl SplitProfile {
    pub const GENERIC: SplitProfile = SplitProfile::Generic {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    pub fn borders(&self, total: usize) -> Result<Borders> {
        let month_blocks = |steps_per_month: usize| -> Result<Borders> {
            let (a, b, c) = (12 * steps_per_month, 16 * steps_per_month, 20 * steps_per_month);
            if total < c {
                return Err(Error::SplitTooShort {
                    split: "test",
                    len: total.saturating_sub(b),
                    needed: c - b,
                });
            }
            Ok(Borders {
                train: 0..a,
                val: a..b,
                test: b..c,
            })
        };
        match *self {
            SplitProfile::Etth => month_blocks(30 * 24),
            SplitProfile::Ettm => month_blocks(30 * 24 * 4),
            SplitProfile::Generic { train, val, test } => {
                if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
                    || ((train + val + test) - 1.0).abs() > 1e-9
                {
                    return Err(Error::config(
                        "profile",
                        format!("split ratios {train}/{val}/{test} must be in [0,1] and sum to 1"),
                    ));
                }
                let n_train = (total as f64 * train).floor() as usize;
                let n_test = (total as f64 * test).floor() as usize;
                Ok(Borders {
                    train: 0..n_train,
                    val: n_train..total - n_test,
                    test: total - n_test..total,
                })
            }
        }
    }
}

impl FromStr for SplitProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "etth" => Ok(SplitProfile::Etth),
            "ettm" => Ok(SplitProfile::Ettm),
            "generic" => Ok(SplitProfile::GENERIC),
            other => {
                // generic(0.6/0.2/0.2)
                let inner = other
                    .strip_prefix("generic(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::config("profile", format!("unknown profile `{other}`")))?;
                let parts: Vec<f64> = inner
                    .split('/')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::config("profile", e.to_string()))?;
                let [train, val, test] = parts[..] else {
                    return Err(Error::config("profile", "generic needs three ratios"));
                };
                Ok(SplitProfile::Generic { train, val, test })
            }
        }
    }
}

impl fmt::Display for SplitProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitProfile::Etth => f.write_str("etth"),
            SplitProfile::Ettm => f.write_str("ettm"),
            p if *p == SplitProfile::GENERIC => f.write_str("generic"),
            SplitProfile::Generic { train, val, test } => write!(f, "generic({train}/{val}/{test})"),
        }
    }
}

/// Half-open target ranges of the three splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Borders {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Borders {
    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    fn validate(&self, total: usize) -> Result<()> {
        let ok = self.train.start <= self.train.end
            && self.train.end <= self.val.start
            && self.val.start <= self.val.end
            && self.val.end <= self.test.start
            && self.test.start <= self.test.end
            && self.test.end <= total
            && !self.train.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "profile",
                format!("borders {self:?} are not ordered within {total} steps"),
            ))
        }
    }
}

/// Per-variable z-score statistics fit on the train range.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(values: &Tensor<f64>, range: Range<usize>) -> Self {
        let steps = values.shape()[1];
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for row in values.data().chunks_exact(steps) {
            let slice = &row[range.clone()];
            let n = slice.len() as f64;
            let m = slice.iter().sum::<f64>() / n;
            let var = slice.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Scaler { mean, std }
    }

    pub fn transform(&self, var: usize, v: f64) -> f64 {
        (v - self.mean[var]) / self.std[var]
    }

    pub fn inverse(&self, var: usize, v: f64) -> f64 {
        v * self.std[var] + self.mean[var]
    }
}

#[derive(Clone, Debug)]
struct Prepared {
    borders: Borders,
    scaler: Scaler,
    standardized: Tensor<f64>,
}

/// Multivariate series `[M, steps]` with optional split metadata.
#[derive(Clone, Debug)]
pub struct SeriesDataset {
    names: Vec<String>,
    timestamps: Vec<String>,
    values: Tensor<f64>,
    frequency: String,
    prepared: Option<Prepared>,
}

impl SeriesDataset {
    /// Builds a dataset from one row per variable.
    pub fn from_rows(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || names.len() != rows.len() {
            return Err(Error::InvalidTensor(format!(
                "{} names for {} variables",
                names.len(),
                rows.len()
            )));
        }
        let steps = rows[0].len();
        if rows.iter().any(|r| r.len() != steps) {
            return Err(Error::InvalidTensor("variables differ in length".into()));
        }
        let values = Tensor::new(vec![rows.len(), steps], rows.concat())?;
        Ok(SeriesDataset {
            names,
            timestamps: (0..steps).map(|i| i.to_string()).collect(),
            values,
            frequency: String::new(),
            prepared: None,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn total_steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn frequency(&self) -> &str {
        &self.frequency
    }

    pub fn set_frequency(&mut self, f: impl Into<String>) {
        self.frequency = f.into();
    }

    /// Raw values `[M, steps]`.
    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn raw_row(&self, var: usize) -> &[f64] {
        self.values.row(var)
    }

    pub fn borders(&self) -> Option<&Borders> {
        self.prepared.as_ref().map(|p| &p.borders)
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        self.prepared.as_ref().map(|p| &p.scaler)
    }

    /// Standardized row if splits are set, raw row otherwise.
    pub fn row(&self, var: usize) -> &[f64] {
        match &self.prepared {
            Some(p) => p.standardized.row(var),
            None => self.values.row(var),
        }
    }

    /// Keeps the first `steps` time steps.
    pub fn truncate(mut self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.total_steps() {
            return Err(Error::config(
                "truncate",
                format!("cannot keep {steps} of {} steps", self.total_steps()),
            ));
        }
        let old = self.total_steps();
        let data: Vec<f64> = self
            .values
            .data()
            .chunks_exact(old)
            .flat_map(|r| r[..steps].iter().copied())
            .collect();
        self.values = Tensor::new(vec![self.num_vars(), steps], data)?;
        self.timestamps.truncate(steps);
        self.prepared = None;
        Ok(self)
    }

    /// Sets borders from `profile`, fits the scaler on the train range and
    /// checks that every split can host at least one `lookback + horizon`
    /// window.
    pub fn make_splits(self, profile: SplitProfile, lookback: usize, horizon: usize) -> Result<Self> {
        let borders = profile.borders(self.total_steps())?;
        self.with_borders(borders, lookback, horizon)
    }

    pub fn with_borders(mut self, borders: Borders, lookback: usize, horizon: usize) -> Result<Self> {
        borders.validate(self.total_steps())?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let len = window_slice(&borders, split, lookback).len();
            if len < lookback + horizon {
                return Err(Error::SplitTooShort {
                    split: split.name(),
                    len,
                    needed: lookback + horizon,
                });
            }
        }
        let scaler = Scaler::fit(&self.values, borders.train.clone());
        let steps = self.total_steps();
        let mut standardized = self.values.clone();
        for (var, row) in standardized.data_mut().chunks_exact_mut(steps).enumerate() {
            for v in row {
                *v = scaler.transform(var, *v);
            }
        }
        self.prepared = Some(Prepared {
            borders,
            scaler,
            standardized,
        });
        Ok(self)
    }

    /// Time range whose windows belong to `split`. Validation and test
    /// inputs reach `lookback` steps back across the preceding border.
    pub fn split_slice(&self, split: Split, lookback: usize) -> Result<Range<usize>> {
        let p = self
            .prepared
            .as_ref()
            .ok_or_else(|| Error::config("profile", "dataset has no splits; call make_splits"))?;
        Ok(window_slice(&p.borders, split, lookback))
    }

    pub fn window_count(&self, split: Split, lookback: usize, horizon: usize) -> Result<usize> {
        let r = self.split_slice(split, lookback)?;
        Ok((r.len() + 1).saturating_sub(lookback + horizon) * self.num_vars())
    }

    /// One standardized window starting at absolute index `start`.
    pub fn window<F: Scalar>(
        &self,
        var: usize,
        start: usize,
        lookback: usize,
        horizon: usize,
    ) -> WindowSample<F> {
        let row = self.row(var);
        let conv = |s: &[f64]| s.iter().map(|&v| F::c(v)).collect::<Vec<F>>();
        WindowSample {
            input: Tensor::new(vec![1, lookback], conv(&row[start..start + lookback]))
                .expect("window shape"),
            target: Tensor::new(vec![1, horizon], conv(&row[start + lookback..start + lookback + horizon]))
                .expect("window shape"),
            variable_index: var,
            start_index: start,
        }
    }
}

fn window_slice(borders: &Borders, split: Split, lookback: usize) -> Range<usize> {
    let r = borders.get(split);
    match split {
        Split::Train => r,
        Split::Val | Split::Test => r.start.saturating_sub(lookback)..r.end,
    }
}

/// Loads a CSV whose first column is a timestamp and whose remaining
/// columns are numeric variables.
/// Writes `date,<names...>` rows of the raw values. Values use the shortest
/// representation that parses back exactly.
pub fn write_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut header = vec!["date".to_string()];
    header.extend(ds.names().iter().cloned());
    w.write_record(&header).map_err(io)?;
    for t in 0..ds.total_steps() {
        let mut rec = vec![ds.timestamps()[t].clone()];
        rec.extend((0..ds.num_vars()).map(|v| ds.raw_row(v)[t].to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Noiseless sines, one per variable, with per-variable phase and amplitude.
pub fn sine_dataset(vars: usize, steps: usize, period: f64) -> SeriesDataset {
    let rows = (0..vars)
        .map(|v| {
            let (amp, phase) = (1.0 + 0.5 * v as f64, v as f64 * 0.7);
            (0..steps)
                .map(|t| amp * (std::f64::consts::TAU * t as f64 / period + phase).sin())
                .collect()
        })
        .collect();
    let names = (0..vars).map(|v| format!("sine{v}")).collect();
    SeriesDataset::from_rows(names, rows).expect("rectangular rows")
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let (header, timestamps, columns) = read_numeric_csv::<f64>(path)?;
    let mut ds = SeriesDataset::from_rows(header, columns)?;
    ds.timestamps = timestamps;
    if let Some(info) = benchmark_info(path) {
        ds.frequency = info.frequency.to_string();
        if info.variables != ds.num_vars() {
            log::warn!(
                "{}: expected {} variables for {}, found {}",
                path.display(),
                info.variables,
                info.name,
                ds.num_vars()
            );
        }
    }
    Ok(ds)
}

/// Reads a CSV window for inference, parsing cells directly as `F`.
/// Returns `(names, values [M, rows])`.
pub fn read_window_csv<F: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<String>, Tensor<F>)> {
    let path = path.as_ref();
    let (names, _, columns) = read_numeric_csv::<F>(path)?;
    let rows = columns[0].len();
    let m = columns.len();
    Ok((names, Tensor::new(vec![m, rows], columns.concat())?))
}

#[allow(clippy::type_complexity)]
fn read_numeric_csv<F: FromStr + Clone>(
    path: &Path,
) -> Result<(Vec<String>, Vec<String>, Vec<Vec<F>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let structure = |msg: String| Error::Structure {
        path: path.to_path_buf(),
        msg,
    };
    let header = rdr.headers().map_err(|e| structure(e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(structure(format!(
            "need a timestamp column and at least one variable, found {} columns",
            header.len()
        )));
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut columns: Vec<Vec<F>> = vec![Vec::new(); names.len()];
    let mut timestamps = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // data rows are numbered from 2; row 1 is the header
        let row = i + 2;
        let rec = rec.map_err(|e| structure(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(structure(format!(
                "row {row} has {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        timestamps.push(rec[0].to_string());
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let v = cell.trim().parse::<F>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                col: c + 2,
                msg: format!("`{cell}` is not a number"),
            })?;
            columns[c].push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(structure("no data rows".into()));
    }
    Ok((names, timestamps, columns))
}

/// One variable's look-back window and its forecast target.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample<F> {
    pub input: Tensor<F>,
    pub target: Tensor<F>,
    pub variable_index: usize,
    pub start_index: usize,
}

/// Windows stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch<F> {
    pub inputs: Tensor<F>,
    pub targets: Tensor<F>,
    /// `(variable_index, start_index)` per row.
    pub origins: Vec<(usize, usize)>,
}

impl<F: Scalar> WindowBatch<F> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Epoch over every `(variable, start)` pair of a split.
pub struct WindowIter<'a, F> {
    ds: &'a SeriesDataset,
    order: Vec<(usize, usize)>,
    cursor: usize,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    _marker: std::marker::PhantomData<F>,
}

pub fn iter_windows<F: Scalar>(
    ds: &SeriesDataset,
    split: Split,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<WindowIter<'_, F>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    let range = ds.split_slice(split, lookback)?;
    if range.len() < lookback + horizon {
        return Err(Error::SplitTooShort {
            split: split.name(),
            len: range.len(),
            needed: lookback + horizon,
        });
    }
    let last_start = range.end - lookback - horizon;
    let mut order: Vec<(usize, usize)> = (0..ds.num_vars())
        .flat_map(|v| (range.start..=last_start).map(move |s| (v, s)))
        .collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(WindowIter {
        ds,
        order,
        cursor: 0,
        lookback,
        horizon,
        batch_size,
        _marker: std::marker::PhantomData,
    })
}

impl<'a, F: Scalar> WindowIter<'a, F> {
    pub fn num_samples(&self) -> usize {
        self.order.len()
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Produces batches on a worker thread; delivery order is unchanged.
    pub fn prefetch<'scope>(
        self,
        scope: &'scope thread::Scope<'scope, '_>,
        depth: usize,
    ) -> mpsc::Receiver<WindowBatch<F>>
    where
        'a: 'scope,
    {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        scope.spawn(move || {
            for batch in self {
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        rx
    }
}

impl<F: Scalar> Iterator for WindowIter<'_, F> {
    type Item = WindowBatch<F>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let origins = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let (l, t) = (self.lookback, self.horizon);
        let mut inputs = Vec::with_capacity(origins.len() * l);
        let mut targets = Vec::with_capacity(origins.len() * t);
        for &(var, start) in &origins {
            let row = self.ds.row(var);
            inputs.extend(row[start..start + l].iter().map(|&v| F::c(v)));
            targets.extend(row[start + l..start + l + t].iter().map(|&v| F::c(v)));
        }
        let b = origins.len();
        Some(WindowBatch {
            inputs: Tensor::new(vec![b, l], inputs).expect("batch shape"),
            targets: Tensor::new(vec![b, t], targets).expect("batch shape"),
            origins,
        })
    }
}
