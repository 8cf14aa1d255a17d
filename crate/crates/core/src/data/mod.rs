//! Series ingestion, normalization, chronological splitting and windowing.

mod csv;
mod synth;

pub use self::csv::{load_csv, parse_csv, write_csv};
pub use synth::{synth_generate, synth_generate_full, SynthOutput, SynthParams};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A multivariate series with one feature per variable, stored `(time, vars)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    values: Tensor,
    variable_names: Vec<String>,
    pub frequency: String,
}

impl RawSeries {
    pub fn new(values: Tensor, variable_names: Vec<String>, frequency: impl Into<String>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::config(format!(
                "series must be (time, vars), got {:?}",
                values.shape()
            )));
        }
        let n = values.shape()[1];
        if n < 2 {
            return Err(Error::config("a series needs at least two variables"));
        }
        if variable_names.len() != n {
            return Err(Error::config(format!(
                "{} variable names for {n} columns",
                variable_names.len()
            )));
        }
        Ok(Self {
            values,
            variable_names,
            frequency: frequency.into(),
        })
    }

    pub fn with_default_names(values: Tensor) -> Result<Self> {
        let n = values.shape().get(1).copied().unwrap_or(0);
        Self::new(values, default_names(n), "")
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_vars(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn value(&self, t: usize, var: usize) -> f64 {
        self.values.data()[t * self.n_vars() + var]
    }

    pub fn column(&self, var: usize) -> Vec<f64> {
        (0..self.n_steps()).map(|t| self.value(t, var)).collect()
    }
}

pub(crate) fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i}")).collect()
}

/// Multiplies every observation by `factor`, e.g. to lift series stored at
/// the 1e-3 scale.
pub fn scale_dataset(raw: &RawSeries, factor: f64) -> Result<RawSeries> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::config(format!("scale factor must be > 0, got {factor}")));
    }
    Ok(RawSeries {
        values: raw.values.map(|x| x * factor),
        variable_names: raw.variable_names.clone(),
        frequency: raw.frequency.clone(),
    })
}

/// Half-open range of time steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: usize,
    pub end: usize,
}

impl TimeRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: TimeRange,
    pub valid: TimeRange,
    pub test: TimeRange,
}

impl DatasetSplits {
    /// Disjoint chronological ranges whose window-start counts follow
    /// `fractions` (train, valid, test).
    ///
    /// Each range keeps `lookback + horizon - 1` trailing steps that only
    /// serve as context for its last windows, so no window crosses a
    /// boundary and every range yields `len - lookback - horizon + 1` windows.
    pub fn chronological(total_steps: usize, lookback: usize, horizon: usize, fractions: [f64; 3]) -> Result<Self> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions {fractions:?} must be >= 0 and sum to 1"
            )));
        }
        let span = lookback + horizon - 1;
        let windows = total_steps.checked_sub(3 * span).filter(|w| *w > 0).ok_or_else(|| {
            Error::config(format!(
                "{total_steps} steps cannot hold three splits of L + Q = {} windows",
                lookback + horizon
            ))
        })?;
        let n_train = (fractions[0] * windows as f64).floor() as usize;
        let n_valid = (fractions[1] * windows as f64).floor() as usize;
        let n_test = windows - n_train - n_valid;
        let train = TimeRange {
            start: 0,
            end: n_train + span,
        };
        let valid = TimeRange {
            start: train.end,
            end: train.end + n_valid + span,
        };
        let test = TimeRange {
            start: valid.end,
            end: valid.end + n_test + span,
        };
        Ok(Self { train, valid, test })
    }
}

/// Per-variable z-score statistics fitted on the training range only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Normalizer {
    /// Population mean and standard deviation over `range`. A variable with
    /// zero spread gets std 1 and a recorded warning.
    pub fn fit(raw: &RawSeries, range: TimeRange) -> Result<Self> {
        if range.is_empty() || range.end > raw.n_steps() {
            return Err(Error::config(format!("bad normalizer range {range:?}")));
        }
        let n = raw.n_vars();
        let count = range.len() as f64;
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        let mut warnings = Vec::new();
        for (i, (m, s)) in mean.iter_mut().zip(std.iter_mut()).enumerate() {
            let col = (range.start..range.end).map(|t| raw.value(t, i));
            *m = col.clone().sum::<f64>() / count;
            let var = col.map(|x| (x - *m) * (x - *m)).sum::<f64>() / count;
            *s = var.sqrt();
            if !(*s > 0.0) {
                let msg = format!(
                    "variable {} is constant on the training range; std clamped to 1",
                    raw.variable_names[i]
                );
                warn!("{msg}");
                warnings.push(msg);
                *s = 1.0;
            }
        }
        Ok(Self { mean, std, warnings })
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_value(&self, var: usize, x: f64) -> f64 {
        (x - self.mean[var]) / self.std[var]
    }

    pub fn invert_value(&self, var: usize, z: f64) -> f64 {
        z * self.std[var] + self.mean[var]
    }

    /// Normalizes a `(time, vars)` tensor.
    pub fn apply(&self, values: &Tensor) -> Tensor {
        self.map_rows(values, |v, x| self.apply_value(v, x))
    }

    pub fn invert(&self, values: &Tensor) -> Tensor {
        self.map_rows(values, |v, x| self.invert_value(v, x))
    }

    fn map_rows(&self, values: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let n = self.n_vars();
        let mut out = values.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = f(i % n, *x);
        }
        out
    }

    /// Denormalizes a `(batch, vars, steps)` tensor.
    pub fn invert_batch(&self, batch: &Tensor) -> Tensor {
        let n = self.n_vars();
        let steps = batch.shape()[2];
        let mut out = batch.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = self.invert_value((i / steps) % n, *x);
        }
        out
    }
}

/// Window start positions of each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowIndex {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

fn range_windows(
    range: TimeRange,
    lookback: usize,
    horizon: usize,
    stride: usize,
    name: &str,
    warnings: &mut Vec<String>,
) -> Vec<usize> {
    if range.len() < lookback + horizon {
        let msg = format!(
            "{name} split has {} steps, fewer than L + Q = {}; no windows",
            range.len(),
            lookback + horizon
        );
        warn!("{msg}");
        warnings.push(msg);
        return Vec::new();
    }
    (range.start..=range.end - lookback - horizon).step_by(stride).collect()
}

/// Enumerates `(lookback, horizon)` windows fully inside each split.
pub fn make_windows(
    splits: &DatasetSplits,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<(WindowIndex, Vec<String>)> {
    if lookback < 1 || horizon < 1 || stride < 1 {
        return Err(Error::config("lookback, horizon and stride must be >= 1"));
    }
    let mut warnings = Vec::new();
    let idx = WindowIndex {
        train: range_windows(splits.train, lookback, horizon, stride, "train", &mut warnings),
        valid: range_windows(splits.valid, lookback, horizon, stride, "valid", &mut warnings),
        test: range_windows(splits.test, lookback, horizon, stride, "test", &mut warnings),
    };
    Ok((idx, warnings))
}

/// A batch of windows, laid out `(batch, vars, steps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub lookback: Tensor,
    pub horizon: Tensor,
    pub start_times: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.start_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_times.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.lookback.shape()[1]
    }
}

/// Cuts windows starting at `starts` out of a `(time, vars)` tensor.
pub fn gather_windows(series: &Tensor, starts: &[usize], lookback: usize, horizon: usize) -> Result<WindowBatch> {
    let (steps, n) = (series.shape()[0], series.shape()[1]);
    if starts.is_empty() {
        return Err(Error::config("empty window batch"));
    }
    let b = starts.len();
    let mut lb = Vec::with_capacity(b * n * lookback);
    let mut hz = Vec::with_capacity(b * n * horizon);
    let data = series.data();
    for &s in starts {
        if s + lookback + horizon > steps {
            return Err(Error::config(format!("window at {s} runs past the series end {steps}")));
        }
        for v in 0..n {
            lb.extend((s..s + lookback).map(|t| data[t * n + v]));
            hz.extend((s + lookback..s + lookback + horizon).map(|t| data[t * n + v]));
        }
    }
    Ok(WindowBatch {
        lookback: Tensor::new(&[b, n, lookback], lb)?,
        horizon: Tensor::new(&[b, n, horizon], hz)?,
        start_times: starts.to_vec(),
    })
}

/// A dataset ready for training: normalized values, splits, and windows.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub raw: RawSeries,
    pub normalized: Tensor,
    pub normalizer: Normalizer,
    pub splits: DatasetSplits,
    pub windows: WindowIndex,
    pub lookback: usize,
    pub horizon: usize,
    pub warnings: Vec<String>,
}

impl PreparedData {
    pub fn new(raw: RawSeries, lookback: usize, horizon: usize, fractions: [f64; 3]) -> Result<Self> {
        if raw.n_steps() < lookback + horizon {
            return Err(Error::config(format!(
                "series has {} steps, fewer than L + Q = {}",
                raw.n_steps(),
                lookback + horizon
            )));
        }
        let splits = DatasetSplits::chronological(raw.n_steps(), lookback, horizon, fractions)?;
        let normalizer = Normalizer::fit(&raw, splits.train)?;
        let normalized = normalizer.apply(raw.values());
        let (windows, mut warnings) = make_windows(&splits, lookback, horizon, 1)?;
        warnings.extend(normalizer.warnings.iter().cloned());
        Ok(Self {
            raw,
            normalized,
            normalizer,
            splits,
            windows,
            lookback,
            horizon,
            warnings,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.raw.n_vars()
    }

    /// Normalized windows at the given starts.
    pub fn batch(&self, starts: &[usize]) -> Result<WindowBatch> {
        gather_windows(&self.normalized, starts, self.lookback, self.horizon)
    }
}

/// Pearson correlation of two equally long slices; 0 when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(rows: &[&[f64]]) -> RawSeries {
        let n = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        RawSeries::with_default_names(Tensor::new(&[rows.len(), n], data).unwrap()).unwrap()
    }

    #[test]
    fn scaling() {
        let raw = series(&[&[1.0, 2.0], &[0.004, 0.5]]);
        assert_eq!(scale_dataset(&raw, 1.0).unwrap(), raw);
        let s = scale_dataset(&raw, 10.0).unwrap();
        assert_eq!(&s.values().data()[..2], &[10.0, 20.0]);
        let s = scale_dataset(&raw, 1e3).unwrap();
        assert!((s.value(1, 0) - 4.0).abs() < 1e-12);
        assert!(scale_dataset(&raw, 0.0).is_err());
        assert!(scale_dataset(&raw, -1.0).is_err());
    }

    #[test]
    fn normalizer_cases() {
        let raw = series(&[&[0.0, 5.0], &[2.0, 5.0], &[100.0, -3.0]]);
        let norm = Normalizer::fit(&raw, TimeRange { start: 0, end: 2 }).unwrap();
        assert_eq!(norm.mean, vec![1.0, 5.0]);
        assert_eq!(norm.std, vec![1.0, 1.0]);
        assert_eq!(norm.apply_value(0, 2.0), 1.0);
        // the constant variable is clamped, normalizes to zero, and is reported
        assert_eq!(norm.apply_value(1, 5.0), 0.0);
        assert_eq!(norm.warnings.len(), 1);
        // statistics never look at the held-out row
        assert_eq!(norm.mean[0], 1.0);
    }

    #[test]
    fn window_counts() {
        let one = |total: usize| {
            let splits = DatasetSplits {
                train: TimeRange { start: 0, end: total },
                valid: TimeRange {
                    start: total,
                    end: total,
                },
                test: TimeRange {
                    start: total,
                    end: total,
                },
            };
            make_windows(&splits, 12, 12, 1).unwrap()
        };
        let (w, warnings) = one(25);
        assert_eq!(w.train, vec![0, 1]);
        assert_eq!(warnings.len(), 2);
        assert_eq!(one(24).0.train, vec![0]);
        assert!(one(23).0.train.is_empty());
    }

    #[test]
    fn horizon_follows_lookback() {
        let data: Vec<f64> = (0..60).map(f64::from).collect();
        let t = Tensor::new(&[30, 2], data).unwrap();
        let b = gather_windows(&t, &[3, 5], 12, 12).unwrap();
        // variable 1 at time start + L
        assert_eq!(b.horizon.at(&[0, 1, 0]), t.at(&[3 + 12, 1]));
        assert_eq!(b.lookback.at(&[1, 0, 11]), t.at(&[5 + 11, 0]));
        assert_eq!(b.lookback.at(&[1, 0, 11]) + 2.0, b.horizon.at(&[1, 0, 0]));
    }

    #[test]
    fn splits_are_disjoint_and_proportional() {
        let s = DatasetSplits::chronological(3000, 12, 12, [0.7, 0.1, 0.2]).unwrap();
        assert_eq!(s.train.start, 0);
        assert_eq!(s.train.end, s.valid.start);
        assert_eq!(s.valid.end, s.test.start);
        assert_eq!(s.test.end, 3000);
        let (w, warnings) = make_windows(&s, 12, 12, 1).unwrap();
        assert!(warnings.is_empty());
        for (ws, r) in [(&w.train, s.train), (&w.valid, s.valid), (&w.test, s.test)] {
            assert_eq!(ws.len(), r.len() - 12 - 12 + 1);
            assert!(ws.iter().all(|&st| st >= r.start && st + 24 <= r.end));
        }
        let total = (w.train.len() + w.valid.len() + w.test.len()) as f64;
        assert!((w.train.len() as f64 / total - 0.7).abs() < 0.01);
        assert!((w.test.len() as f64 / total - 0.2).abs() < 0.01);
        assert!(DatasetSplits::chronological(60, 12, 12, [0.7, 0.1, 0.2]).is_err());
    }

    #[test]
    fn prepared_normalizer_ignores_later_splits() {
        let mut out = synth_generate_full(&SynthParams {
            n_vars: 3,
            n_latents: 1,
            length: 300,
            noise_std: 0.1,
            neg_fraction: 0.0,
            seed: 1,
        })
        .unwrap();
        let prepared = PreparedData::new(out.series.clone(), 12, 12, [0.7, 0.1, 0.2]).unwrap();
        // corrupt everything after the train range; statistics must not move
        let end = prepared.splits.train.end;
        let n = out.series.n_vars();
        let mut values = out.series.values().clone();
        for x in &mut values.data_mut()[end * n..] {
            *x += 1e6;
        }
        out.series = RawSeries::with_default_names(values).unwrap();
        let again = PreparedData::new(out.series, 12, 12, [0.7, 0.1, 0.2]).unwrap();
        assert_eq!(prepared.normalizer, again.normalizer);
    }

    proptest! {
        #[test]
        fn normalizer_round_trip(data in proptest::collection::vec(-1e3f64..1e3, 40)) {
            let raw = RawSeries::with_default_names(Tensor::new(&[10, 4], data).unwrap()).unwrap();
            let norm = Normalizer::fit(&raw, TimeRange { start: 0, end: 7 }).unwrap();
            let back = norm.invert(&norm.apply(raw.values()));
            for (a, b) in back.data().iter().zip(raw.values().data()) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }
}
