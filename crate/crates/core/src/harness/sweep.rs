use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, mine_stage, prepare, run_experiment, ExperimentConfig, ExperimentReport, Method, Mined, Split};
use crate::error::{Error, Result};
use crate::regression::Metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NPatterns,
    SummationThreshold,
    /// Window length in seconds.
    WindowLen,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::NPatterns => "n_patterns",
            SweepAxis::SummationThreshold => "summation_threshold",
            SweepAxis::WindowLen => "window_len",
        }
    }

    /// `base` with only this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        match self {
            SweepAxis::NPatterns => {
                if !(value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(Error::Config(format!(
                        "n_patterns must be a non-negative integer, got {value}"
                    )));
                }
                c.n_patterns = value as usize;
            }
            SweepAxis::SummationThreshold => {
                c.divergence.summation_threshold = value;
                c.divergence.validate()?;
            }
            SweepAxis::WindowLen => {
                c.divergence.window_len_s = value;
                c.divergence.validate()?;
            }
        }
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_patterns" | "n" => Ok(SweepAxis::NPatterns),
            "summation_threshold" | "threshold" => Ok(SweepAxis::SummationThreshold),
            "window_len" | "L" => Ok(SweepAxis::WindowLen),
            _ => Err(Error::Config(format!(
                "unknown sweep axis `{s}` (n_patterns, summation_threshold, window_len)"
            ))),
        }
    }
}

/// One (value, split, method) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub split: Split,
    pub method: Method,
    /// Absent when the point failed.
    pub metrics: Option<Metrics<f64>>,
    pub divergent_windows: Option<usize>,
    /// Patterns used by the partitioned model at this point.
    pub patterns: Option<usize>,
    pub error: Option<String>,
}

fn rows_for(axis: SweepAxis, value: f64, outcome: Result<ExperimentReport>) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(6);
    match outcome {
        Ok(report) => {
            for m in &report.metrics {
                rows.push(SweepRow {
                    axis,
                    value,
                    split: m.split,
                    method: m.method,
                    metrics: Some(m.metrics.clone()),
                    divergent_windows: Some(report.divergent_windows),
                    patterns: Some(report.patterns.len()),
                    error: None,
                });
            }
        }
        Err(e) => {
            warn!("sweep point {axis}={value} failed: {e}");
            for split in Split::ALL {
                for method in Method::ALL {
                    rows.push(SweepRow {
                        axis,
                        value,
                        split,
                        method,
                        metrics: None,
                        divergent_windows: None,
                        patterns: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    rows
}

fn checked_configs(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<ExperimentConfig>> {
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    base.validate()?;
    values.iter().map(|&v| axis.apply(base, v)).collect()
}

/// Runs the experiment once per value with only `axis` changed.
///
/// Ingest, features, LOP and the global fit are shared by every point; the
/// mining stage is shared too when sweeping the pattern count. Points run
/// in parallel; a failing point yields rows carrying its error. Rows come
/// out in value order, then method and split order.
pub fn sensitivity_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let configs = checked_configs(base, axis, values)?;
    let prepared = prepare(base)?;
    let shared_mined: Option<Result<Mined>> = (axis == SweepAxis::NPatterns).then(|| mine_stage(&prepared, base));
    let rows: Vec<Vec<SweepRow>> = configs
        .par_iter()
        .zip(values)
        .map(|(config, &value)| {
            let outcome = match &shared_mined {
                Some(Ok(mined)) => evaluate(&prepared, mined, config).map(|e| e.0),
                Some(Err(e)) => Err(Error::Model(format!("shared mining stage failed: {e}"))),
                None => {
                    mine_stage(&prepared, config).and_then(|mined| evaluate(&prepared, &mined, config).map(|e| e.0))
                }
            };
            rows_for(axis, value, outcome)
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// [`sensitivity_sweep`] with every point run from scratch.
pub fn sensitivity_sweep_uncached(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let configs = checked_configs(base, axis, values)?;
    let rows: Vec<Vec<SweepRow>> = configs
        .par_iter()
        .zip(values)
        .map(|(config, &value)| rows_for(axis, value, run_experiment(config)))
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Long-format CSV: axis, value, split, method, r2, rmse, mae, n,
/// divergent_windows, patterns, error.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "axis",
        "value",
        "split",
        "method",
        "r2",
        "rmse",
        "mae",
        "n",
        "divergent_windows",
        "patterns",
        "error",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        let m = r.metrics.as_ref();
        w.write_record([
            r.axis.as_str().to_string(),
            r.value.to_string(),
            r.split.as_str().to_string(),
            r.method.as_str().to_string(),
            opt(m.map(|m| m.r2.to_string())),
            opt(m.map(|m| m.rmse.to_string())),
            opt(m.map(|m| m.mae.to_string())),
            opt(m.map(|m| m.n.to_string())),
            opt(r.divergent_windows.map(|v| v.to_string())),
            opt(r.patterns.map(|v| v.to_string())),
            opt(r.error.clone()),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<sweep sink>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_parse() {
        assert_eq!("n".parse::<SweepAxis>().unwrap(), SweepAxis::NPatterns);
        assert_eq!("window_len".parse::<SweepAxis>().unwrap(), SweepAxis::WindowLen);
        assert!("delta".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn apply_changes_only_the_axis() {
        let base = ExperimentConfig::default();
        let c = SweepAxis::SummationThreshold.apply(&base, 100.0).unwrap();
        assert_eq!(c.divergence.summation_threshold, 100.0);
        assert_eq!(
            ExperimentConfig {
                divergence: base.divergence.clone(),
                ..c
            },
            base
        );
        assert!(SweepAxis::NPatterns.apply(&base, 1.5).is_err());
        assert!(SweepAxis::WindowLen.apply(&base, 0.0).is_err());
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let err = sensitivity_sweep(&ExperimentConfig::default(), SweepAxis::NPatterns, &[]).unwrap_err();
        assert!(err.is_config_error());
    }
}
