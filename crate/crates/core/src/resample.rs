//! Fixed-length resampling of asynchronous multivariate flights.
//!
//! A flight's local range `[t_min, t_max]` (envelope of its selected
//! features) is split into `n` equal-width bins. Bin `b` starts at
//! `t_min + b·w`; bins are half-open except the last, which also holds
//! `t_max`. Fixed-window sampling keeps the samples of bin `b` no later than
//! `lo(b) + window`. Cells with no samples are zero and flagged unobserved.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::RawSeries;
use crate::ulog::VehicleType;

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("every selected series is empty")]
    AllEmpty,
    #[error("flight spans a single instant")]
    DegenerateRange,
    #[error("invalid sampling configuration: {0}")]
    InvalidConfig(String),
    #[error("standardization needs a non-empty training split")]
    EmptySplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    /// Mean of every sample in each interval.
    Average,
    /// Mean over a fixed-duration window at the start of each interval.
    FixedWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub method: SamplingMethod,
    pub n_intervals: usize,
    /// Window length in seconds; read only by `FixedWindow`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_s: Option<f64>,
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig::average(50)
    }
}

impl SamplingConfig {
    pub fn average(n_intervals: usize) -> Self {
        SamplingConfig {
            method: SamplingMethod::Average,
            n_intervals,
            window_s: None,
            standardize: true,
        }
    }

    pub fn fixed_window(n_intervals: usize, window_s: f64) -> Self {
        SamplingConfig {
            method: SamplingMethod::FixedWindow,
            n_intervals,
            window_s: Some(window_s),
            standardize: true,
        }
    }

    pub fn validate(&self) -> Result<(), ResampleError> {
        if self.n_intervals == 0 {
            return Err(ResampleError::InvalidConfig("n_intervals must be at least 1".into()));
        }
        if self.method == SamplingMethod::FixedWindow {
            match self.window_s {
                Some(w) if w > 0.0 && w.is_finite() => {}
                _ => {
                    return Err(ResampleError::InvalidConfig(
                        "fixed-window sampling needs window_s > 0".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Short label used in reports, e.g. `50` or `200, 5`.
    pub fn parameter_label(&self) -> String {
        match (self.method, self.window_s) {
            (SamplingMethod::FixedWindow, Some(w)) => format!("{}, {}", self.n_intervals, w),
            _ => self.n_intervals.to_string(),
        }
    }
}

/// Resampled matrix plus per-cell sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Binned {
    /// `[n_intervals × n_features]` cell means (0 where empty).
    pub values: Array2<f64>,
    pub counts: Array2<u32>,
}

impl Binned {
    pub fn observed(&self) -> Array2<bool> {
        self.counts.mapv(|c| c > 0)
    }
}

/// One fixed-length labelled instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledInstance {
    pub values: Array2<f64>,
    /// False for zero-padded cells.
    pub observed: Array2<bool>,
    pub label: VehicleType,
    pub source_id: String,
    /// Created by a rebalancing method rather than read from a flight.
    pub synthetic: bool,
}

impl SampledInstance {
    pub fn from_binned(binned: Binned, label: VehicleType, source_id: impl Into<String>) -> Self {
        let observed = binned.observed();
        SampledInstance {
            values: binned.values,
            observed,
            label,
            source_id: source_id.into(),
            synthetic: false,
        }
    }

    pub fn n_intervals(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }
}

/// Envelope of the selected series' first and last timestamps.
pub fn global_time_range(series: &[RawSeries]) -> Result<(u64, u64), ResampleError> {
    let mut range: Option<(u64, u64)> = None;
    for s in series {
        if let (Some(&a), Some(&b)) = (s.timestamps.first(), s.timestamps.last()) {
            range = Some(match range {
                None => (a, b),
                Some((lo, hi)) => (lo.min(a), hi.max(b)),
            });
        }
    }
    range.ok_or(ResampleError::AllEmpty)
}

/// Equal-width bin edges over a flight's local range, in microseconds.
#[derive(Debug, Clone, Copy)]
pub struct Bins {
    pub t_min: f64,
    pub t_max: f64,
    pub width: f64,
    pub n: usize,
}

impl Bins {
    pub fn new(t_min: u64, t_max: u64, n: usize) -> Result<Self, ResampleError> {
        if n == 0 {
            return Err(ResampleError::InvalidConfig("n_intervals must be at least 1".into()));
        }
        if t_min >= t_max {
            return Err(ResampleError::DegenerateRange);
        }
        let (t_min, t_max) = (t_min as f64, t_max as f64);
        Ok(Bins {
            t_min,
            t_max,
            width: (t_max - t_min) / n as f64,
            n,
        })
    }

    /// Start of bin `b`.
    #[inline]
    pub fn lo(&self, b: usize) -> f64 {
        self.t_min + b as f64 * self.width
    }

    /// Bin holding `t`, using exactly the `lo(b) <= t < lo(b+1)` predicate
    /// (last bin closed at `t_max`).
    pub fn bin_of(&self, t: f64) -> Option<usize> {
        if t < self.t_min || t > self.t_max {
            return None;
        }
        let guess = ((t - self.t_min) / self.width).floor();
        let mut b = if guess.is_finite() && guess > 0.0 {
            (guess as usize).min(self.n - 1)
        } else {
            0
        };
        while b > 0 && t < self.lo(b) {
            b -= 1;
        }
        while b + 1 < self.n && t >= self.lo(b + 1) {
            b += 1;
        }
        Some(b)
    }
}

fn accumulate<F>(series: &[RawSeries], n: usize, mut cell_of: F) -> Binned
where
    F: FnMut(f64) -> Option<usize>,
{
    let mut sums = Array2::<f64>::zeros((n, series.len()));
    let mut counts = Array2::<u32>::zeros((n, series.len()));
    for (f, s) in series.iter().enumerate() {
        for (&t, &v) in s.timestamps.iter().zip(&s.values) {
            if let Some(b) = cell_of(t as f64) {
                sums[[b, f]] += v;
                counts[[b, f]] += 1;
            }
        }
    }
    let mut values = sums;
    for ((b, f), v) in values.indexed_iter_mut() {
        let c = counts[[b, f]];
        if c > 0 {
            *v /= c as f64;
        }
    }
    Binned { values, counts }
}

/// Mean of every sample per interval.
pub fn average_sample(series: &[RawSeries], n_intervals: usize) -> Result<Binned, ResampleError> {
    let (t_min, t_max) = global_time_range(series)?;
    let bins = Bins::new(t_min, t_max, n_intervals)?;
    Ok(accumulate(series, n_intervals, |t| bins.bin_of(t)))
}

/// Mean over the samples of interval `b` that also satisfy
/// `t <= lo(b) + window`. A window at least as wide as the interval
/// reproduces [`average_sample`].
pub fn fixed_window_sample(
    series: &[RawSeries],
    n_intervals: usize,
    window_s: f64,
) -> Result<Binned, ResampleError> {
    if !(window_s > 0.0 && window_s.is_finite()) {
        return Err(ResampleError::InvalidConfig("window_s must be > 0".into()));
    }
    let (t_min, t_max) = global_time_range(series)?;
    let bins = Bins::new(t_min, t_max, n_intervals)?;
    let window_us = window_s * 1e6;
    if window_us >= bins.width {
        return Ok(accumulate(series, n_intervals, |t| bins.bin_of(t)));
    }
    Ok(accumulate(series, n_intervals, |t| {
        let b = bins.bin_of(t)?;
        (t <= bins.lo(b) + window_us).then_some(b)
    }))
}

/// Dispatches on the configured method.
pub fn resample(series: &[RawSeries], config: &SamplingConfig) -> Result<Binned, ResampleError> {
    config.validate()?;
    match config.method {
        SamplingMethod::Average => average_sample(series, config.n_intervals),
        SamplingMethod::FixedWindow => {
            fixed_window_sample(series, config.n_intervals, config.window_s.unwrap_or_default())
        }
    }
}

/// Per-feature mean and standard deviation over observed training cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Features whose spread is below this are left untouched.
pub const MIN_STD: f64 = 1e-12;

impl Standardizer {
    pub fn fit(train: &[SampledInstance]) -> Result<Self, ResampleError> {
        let first = train.first().ok_or(ResampleError::EmptySplit)?;
        let n_features = first.n_features();
        let mut count = vec![0usize; n_features];
        let mut sum = vec![0.0; n_features];
        for inst in train {
            for (((_, f), &v), &seen) in inst.values.indexed_iter().zip(inst.observed.iter()) {
                if seen {
                    count[f] += 1;
                    sum[f] += v;
                }
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; n_features];
        for inst in train {
            for (((_, f), &v), &seen) in inst.values.indexed_iter().zip(inst.observed.iter()) {
                if seen {
                    let d = v - mean[f];
                    sq[f] += d * d;
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c > 0 { (s / c as f64).sqrt() } else { 0.0 })
            .collect();
        Ok(Standardizer { mean, std })
    }

    /// Rescales observed cells; padded cells stay zero.
    pub fn apply(&self, inst: &mut SampledInstance) {
        for (((_, f), v), &seen) in inst.values.indexed_iter_mut().zip(inst.observed.iter()) {
            if seen && self.std[f] >= MIN_STD {
                *v = (*v - self.mean[f]) / self.std[f];
            }
        }
    }
}

/// Fits on `train` and applies the same transform to `train` and `held_out`.
pub fn standardize(
    train: &mut [SampledInstance],
    held_out: &mut [SampledInstance],
) -> Result<Standardizer, ResampleError> {
    let scaler = Standardizer::fit(train)?;
    for inst in train.iter_mut().chain(held_out.iter_mut()) {
        scaler.apply(inst);
    }
    Ok(scaler)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(seconds: std::ops::RangeInclusive<u64>) -> RawSeries {
        let ts: Vec<u64> = seconds.clone().map(|s| s * 1_000_000).collect();
        let vs: Vec<f64> = seconds.map(|s| s as f64).collect();
        RawSeries::new(ts, vs)
    }

    #[test]
    fn time_range_envelope() {
        assert_eq!(global_time_range(&[ramp(3..=9)]).unwrap(), (3_000_000, 9_000_000));
        assert_eq!(
            global_time_range(&[ramp(2..=8), ramp(0..=10)]).unwrap(),
            (0, 10_000_000)
        );
        let empty = RawSeries::new(vec![], vec![]);
        assert_eq!(global_time_range(&[empty]), Err(ResampleError::AllEmpty));
    }

    #[test]
    fn degenerate_range_rejected() {
        let s = RawSeries::new(vec![5, 5], vec![1.0, 2.0]);
        assert_eq!(average_sample(std::slice::from_ref(&s), 4), Err(ResampleError::DegenerateRange));
        assert_eq!(fixed_window_sample(&[s], 4, 1.0), Err(ResampleError::DegenerateRange));
    }

    #[test]
    fn constant_signal_everywhere() {
        let s = RawSeries::new((0..40).map(|i| i * 250_000).collect(), vec![7.0; 40]);
        for n in [1, 3, 7, 20] {
            let b = average_sample(std::slice::from_ref(&s), n).unwrap();
            assert!(b.values.iter().all(|&v| v == 7.0));
            let w = fixed_window_sample(std::slice::from_ref(&s), n, 0.6).unwrap();
            assert!(w
                .values
                .iter()
                .zip(w.counts.iter())
                .all(|(&v, &c)| c == 0 || v == 7.0));
        }
    }

    #[test]
    fn two_bin_ramp() {
        let b = average_sample(&[ramp(0..=10)], 2).unwrap();
        assert_eq!(b.values.column(0).to_vec(), vec![2.0, 7.5]);
    }

    #[test]
    fn short_feature_is_zero_padded() {
        let long = ramp(0..=10);
        let short = RawSeries::new(vec![4_000_000, 5_000_000, 5_500_000], vec![1.0, 2.0, 6.0]);
        let b = average_sample(&[long, short], 5).unwrap();
        assert_eq!(b.values.column(1).to_vec(), vec![0.0, 0.0, 3.0, 0.0, 0.0]);
        assert_eq!(b.counts.column(1).to_vec(), vec![0, 0, 3, 0, 0]);
    }

    #[test]
    fn fixed_window_ramp() {
        let b = fixed_window_sample(&[ramp(0..=20)], 2, 2.0).unwrap();
        assert_eq!(b.values.column(0).to_vec(), vec![1.0, 11.0]);
        assert_eq!(b.counts.column(0).to_vec(), vec![3, 3]);
    }

    #[test]
    fn wide_window_matches_average() {
        let s = ramp(0..=33);
        let a = average_sample(std::slice::from_ref(&s), 5).unwrap();
        let w = fixed_window_sample(&[s], 5, 100.0).unwrap();
        assert_eq!(a, w);
    }

    #[test]
    fn standardize_uses_training_statistics() {
        let mk = |vals: &[f64]| SampledInstance {
            values: Array2::from_shape_vec((vals.len(), 1), vals.to_vec()).unwrap(),
            observed: Array2::from_elem((vals.len(), 1), true),
            label: VehicleType::Quadrotor,
            source_id: String::new(),
            synthetic: false,
        };
        let mut train = vec![mk(&[1.0, 2.0]), mk(&[3.0, 4.0])];
        let mut test = vec![mk(&[10.0, 2.5])];
        let s = standardize(&mut train, &mut test).unwrap();
        assert_eq!(s.mean, vec![2.5]);
        let sd = (1.25f64).sqrt();
        assert!((test[0].values[[0, 0]] - (10.0 - 2.5) / sd).abs() < 1e-12);
        assert_eq!(test[0].values[[1, 0]], 0.0);
        assert_eq!(
            standardize(&mut [], &mut test),
            Err(ResampleError::EmptySplit)
        );
    }

    #[test]
    fn standardize_skips_constant_and_padded() {
        let mut inst = SampledInstance {
            values: Array2::from_shape_vec((3, 2), vec![5.0, 1.0, 5.0, 0.0, 5.0, 3.0]).unwrap(),
            observed: Array2::from_shape_vec((3, 2), vec![true, true, true, false, true, true]).unwrap(),
            label: VehicleType::Quadrotor,
            source_id: String::new(),
            synthetic: false,
        };
        let mut train = vec![inst.clone()];
        standardize(&mut train, &mut []).unwrap();
        assert_eq!(train[0].values.column(0).to_vec(), vec![5.0; 3]);
        assert_eq!(train[0].values[[1, 1]], 0.0);
        assert_eq!(train[0].values[[0, 1]], -1.0);
        inst.values[[0, 0]] = 0.0;
    }
}
