//! Divergent windows: stretches of `L` samples where the baseline model's
//! summed absolute error exceeds a threshold.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obd::ObdDataset;
use crate::scalar::Scalar;
use crate::series::Series;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceConfig {
    /// Window length in seconds.
    pub window_len_s: f64,
    /// ppm; a window diverges when its error sum is strictly above this.
    pub summation_threshold: f64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig {
            window_len_s: 3.0,
            summation_threshold: 30.0,
        }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_len_s > 0.0 && self.window_len_s.is_finite()) {
            return Err(Error::Config(format!(
                "window_len_s must be > 0, got {}",
                self.window_len_s
            )));
        }
        if !(self.summation_threshold > 0.0 && self.summation_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "summation_threshold must be > 0, got {}",
                self.summation_threshold
            )));
        }
        Ok(())
    }

    /// Window length in samples, `round(L / sample_period)`.
    pub fn window_samples(&self, sample_period: f64) -> Result<usize> {
        self.validate()?;
        let l = (self.window_len_s / sample_period).round();
        if l < 1.0 {
            return Err(Error::Config(format!(
                "window of {} s is shorter than one sample period ({sample_period} s)",
                self.window_len_s
            )));
        }
        Ok(l as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergentWindow<T = f64> {
    pub run_id: String,
    /// Run index within the series.
    pub run: usize,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub error_sum: T,
}

impl<T> DivergentWindow<T> {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `|obs − pred|` where both are defined.
pub fn per_step_errors<T: Scalar>(pred: &Series<T>, obs: &Series<T>) -> Series<T> {
    pred.iter()
        .zip(obs)
        .map(|(p, o)| {
            p.iter()
                .zip(o)
                .map(|(p, o)| match (p, o) {
                    (Some(p), Some(o)) => Some((*o - *p).abs()),
                    _ => None,
                })
                .collect()
        })
        .collect()
}

/// Every stride-1 window of `window_len` samples, within each run, whose
/// errors are all defined and sum to more than `threshold`. Sorted by
/// (run, start).
pub fn find_divergent_windows<T: Scalar>(
    errors: &Series<T>,
    run_ids: &[String],
    window_len: usize,
    threshold: T,
) -> Vec<DivergentWindow<T>> {
    let mut out = Vec::new();
    if window_len == 0 {
        return out;
    }
    for (run, errs) in errors.iter().enumerate() {
        if errs.len() < window_len {
            continue;
        }
        // defined[k] counts defined errors in the window ending at k
        let mut defined = 0usize;
        for k in 0..errs.len() {
            defined += usize::from(errs[k].is_some());
            if k >= window_len {
                defined -= usize::from(errs[k - window_len].is_some());
            }
            if k + 1 < window_len || defined < window_len {
                continue;
            }
            let start = k + 1 - window_len;
            let sum: T = errs[start..=k].iter().map(|e| e.expect("all defined")).sum();
            if sum > threshold {
                out.push(DivergentWindow {
                    run_id: run_ids.get(run).cloned().unwrap_or_default(),
                    run,
                    start,
                    end: k,
                    error_sum: sum,
                });
            }
        }
    }
    out
}

/// [`find_divergent_windows`] with `L` and run ids taken from the dataset.
pub fn detect_divergent_windows<T: Scalar>(
    errors: &Series<T>,
    dataset: &ObdDataset,
    config: &DivergenceConfig,
) -> Result<Vec<DivergentWindow<T>>> {
    let l = config.window_samples(dataset.sample_period)?;
    let ids: Vec<String> = dataset.runs.iter().map(|r| r.run_id.clone()).collect();
    Ok(find_divergent_windows(
        errors,
        &ids,
        l,
        T::of(config.summation_threshold),
    ))
}

/// Union of overlapping or touching windows, for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span<T = f64> {
    pub run_id: String,
    pub run: usize,
    pub start: usize,
    pub end: usize,
    pub windows: usize,
    pub max_error_sum: T,
}

pub fn merged_spans<T: Scalar>(windows: &[DivergentWindow<T>]) -> Vec<Span<T>> {
    let mut spans: Vec<Span<T>> = Vec::new();
    for w in windows {
        match spans.last_mut() {
            Some(s) if s.run == w.run && w.start <= s.end + 1 => {
                s.end = s.end.max(w.end);
                s.windows += 1;
                s.max_error_sum = s.max_error_sum.max(w.error_sum);
            }
            _ => spans.push(Span {
                run_id: w.run_id.clone(),
                run: w.run,
                start: w.start,
                end: w.end,
                windows: 1,
                max_error_sum: w.error_sum,
            }),
        }
    }
    spans
}

/// CSV columns: run_id, start_t_s, end_t_s, error_sum_ppm.
pub fn write_windows_csv<T: Scalar, W: Write>(
    dataset: &ObdDataset,
    windows: &[DivergentWindow<T>],
    sink: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["run_id", "start_t_s", "end_t_s", "error_sum_ppm"])?;
    for win in windows {
        let run = &dataset.runs[win.run];
        w.write_record([
            win.run_id.clone(),
            run.records[win.start].t.to_string(),
            run.records[win.end].t.to_string(),
            win.error_sum.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<windows sink>", e))?;
    Ok(())
}
