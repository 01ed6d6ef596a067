//! Pattern-partitioned power-law model.
//!
//! Each timestep is routed to the highest-priority pattern whose levels
//! match the trailing window ending at that step, or to the default
//! partition 0 when none does. Every partition carries its own power-law
//! fit; partitions too small to fit reuse partition 0's parameters.

use std::collections::BTreeSet;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::miner::{matches_at, symbolize, CoOccurrencePattern, Discretizer, SymbolTable};
use crate::obd::ObdDataset;
use crate::physics::FeatureSeries;
use crate::regression::{
    build_samples, fit_lm, fit_power_law, log_ols_init, FitReport, LmOptions, PowerLawParams, SampleSet,
};
use crate::scalar::Scalar;
use crate::series::Series;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PstvaConfig {
    pub delta: usize,
    pub lm: LmOptions,
    pub min_partition_samples: usize,
}

impl Default for PstvaConfig {
    fn default() -> Self {
        PstvaConfig {
            delta: 1,
            lm: LmOptions::default(),
            min_partition_samples: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedModel<T = f64> {
    /// Priority order; pattern `i` owns partition `i + 1`.
    pub patterns: Vec<CoOccurrencePattern>,
    /// `patterns.len() + 1` entries, index 0 is the default partition.
    pub partition_params: Vec<PowerLawParams<T>>,
    pub discretizer: Discretizer,
    /// Pattern window length in samples.
    pub window_len: usize,
    pub delta: usize,
    /// Partitions that reuse partition 0's parameters.
    pub fallbacks: BTreeSet<usize>,
    /// Training samples per partition.
    pub partition_samples: Vec<usize>,
}

impl<T: Scalar> PartitionedModel<T> {
    pub fn n_partitions(&self) -> usize {
        self.partition_params.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.partition_params.len() != self.patterns.len() + 1 {
            return Err(Error::Model(format!(
                "{} patterns need {} partitions, model has {}",
                self.patterns.len(),
                self.patterns.len() + 1,
                self.partition_params.len()
            )));
        }
        for p in &self.partition_params {
            p.validate()?;
            if p.delta != self.delta {
                return Err(Error::Model("partitions disagree on delta".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }
}

/// Partition index per (run, timestep).
pub fn assign_partitions(
    symbols: &SymbolTable,
    patterns: &[CoOccurrencePattern],
    window_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let resolved = patterns
        .iter()
        .map(|p| {
            let items = p.resolve(symbols)?;
            if items.iter().any(|(_, s)| s.len() != window_len) {
                return Err(Error::Model(format!(
                    "pattern sequence length differs from window length {window_len}"
                )));
            }
            Ok(items)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(symbols
        .runs
        .iter()
        .map(|run| {
            (0..run.len())
                .map(|k| {
                    if window_len == 0 || k + 1 < window_len {
                        return 0;
                    }
                    resolved
                        .iter()
                        .position(|items| matches_at(run, items, k))
                        .map_or(0, |i| i + 1)
                })
                .collect()
        })
        .collect())
}

/// Output of [`fit`]: the model plus the fit behind each partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PstvaFit<T = f64> {
    pub model: PartitionedModel<T>,
    /// The single global fit over all training samples.
    pub base: FitReport<T>,
    /// Per partition; `None` for fallbacks.
    pub reports: Vec<Option<FitReport<T>>>,
}

/// Fits one power law per partition.
///
/// `base` is the global fit on the same samples; it is computed when not
/// given. Each partition is fitted twice, once from the log-space start and
/// once from the global parameters, and the lower-SSE result is kept, so the
/// partitioned training SSE never exceeds the global one unless a fallback
/// occurred.
#[allow(clippy::too_many_arguments)]
pub fn fit<T: Scalar>(
    features: &[FeatureSeries<T>],
    observed: &[Vec<T>],
    symbols: &SymbolTable,
    patterns: &[CoOccurrencePattern],
    discretizer: &Discretizer,
    window_len: usize,
    config: &PstvaConfig,
    base: Option<&FitReport<T>>,
) -> Result<PstvaFit<T>> {
    if symbols.runs.len() != features.len() {
        return Err(Error::Model(format!(
            "{} symbol runs for {} feature runs",
            symbols.runs.len(),
            features.len()
        )));
    }
    let samples = build_samples(features, observed, config.delta)?;
    let base = match base {
        Some(b) if b.params.delta == config.delta => b.clone(),
        Some(_) => return Err(Error::Model("global fit uses a different delta".into())),
        None => fit_power_law(&samples, &config.lm)?,
    };
    let partitions = assign_partitions(symbols, patterns, window_len)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); patterns.len() + 1];
    for (i, o) in samples.origin.iter().enumerate() {
        members[partitions[o.run][o.k]].push(i);
    }

    let mut reports: Vec<Option<FitReport<T>>> = Vec::with_capacity(members.len());
    let default_report = if members[0].len() == samples.len() {
        base.clone()
    } else {
        fit_partition(&samples.select(&members[0]), &base.params, &config.lm)
            .map_err(|e| Error::Model(format!("default partition cannot be fitted: {e}")))?
    };
    let mut params = vec![default_report.params.clone()];
    reports.push(Some(default_report));
    let mut fallbacks = BTreeSet::new();
    for (idx, m) in members.iter().enumerate().skip(1) {
        let fitted = if m.len() < config.min_partition_samples {
            debug!("partition {idx} has {} samples; using partition 0", m.len());
            None
        } else {
            match fit_partition(&samples.select(m), &base.params, &config.lm) {
                Ok(r) => Some(r),
                Err(e) => {
                    warn!("partition {idx} fit failed ({e}); using partition 0");
                    None
                }
            }
        };
        match fitted {
            Some(r) => {
                params.push(r.params.clone());
                reports.push(Some(r));
            }
            None => {
                fallbacks.insert(idx);
                params.push(params[0].clone());
                reports.push(None);
            }
        }
    }

    let model = PartitionedModel {
        patterns: patterns.to_vec(),
        partition_params: params,
        discretizer: discretizer.clone(),
        window_len,
        delta: config.delta,
        fallbacks,
        partition_samples: members.iter().map(Vec::len).collect(),
    };
    model.validate()?;
    Ok(PstvaFit { model, base, reports })
}

fn fit_partition<T: Scalar>(
    samples: &SampleSet<T>,
    global: &PowerLawParams<T>,
    opts: &LmOptions,
) -> Result<FitReport<T>> {
    let from_log = log_ols_init(samples, opts.min_samples).and_then(|init| fit_lm(samples, &init, opts));
    let from_global = fit_lm(samples, global, opts);
    match (from_log, from_global) {
        (Ok(a), Ok(b)) => Ok(if b.sse_final < a.sse_final { b } else { a }),
        (Ok(a), Err(_)) => Ok(a),
        (Err(_), Ok(b)) => Ok(b),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Routes each timestep through its partition's parameters; the value lands
/// at `k + delta`.
pub fn predict<T: Scalar>(
    model: &PartitionedModel<T>,
    features: &[FeatureSeries<T>],
    symbols: &SymbolTable,
) -> Result<Series<T>> {
    let partitions = assign_partitions(symbols, &model.patterns, model.window_len)?;
    if partitions.len() != features.len() {
        return Err(Error::Model(format!(
            "{} symbol runs for {} feature runs",
            partitions.len(),
            features.len()
        )));
    }
    Ok(features
        .iter()
        .zip(&partitions)
        .map(|(fs, parts)| {
            let mut out = vec![None; fs.len()];
            for (k, f) in fs.steps.iter().enumerate() {
                if f.valid && k + model.delta < fs.len() {
                    let p = &model.partition_params[parts[k]];
                    out[k + model.delta] = Some(p.eval(f.t_adiab, f.t_comb));
                }
            }
            out
        })
        .collect())
}

/// [`predict`] with symbols produced by the model's own discretizer.
pub fn predict_dataset<T: Scalar>(
    model: &PartitionedModel<T>,
    dataset: &ObdDataset,
    features: &[FeatureSeries<T>],
) -> Result<Series<T>> {
    let symbols = symbolize(dataset, &model.discretizer);
    predict(model, features, &symbols)
}

/// Timesteps per partition.
pub fn partition_counts(assignment: &[Vec<usize>], n_partitions: usize) -> Vec<usize> {
    let mut counts = vec![0; n_partitions];
    for &p in assignment.iter().flatten() {
        counts[p] += 1;
    }
    counts
}
