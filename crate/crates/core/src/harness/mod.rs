//! Experiment orchestration: trains LOP, P-Base and P-STVA on the training
//! runs, evaluates all three on both splits, and runs parameter sweeps.
//!
//! The pipeline is split into three stages so sweeps can reuse work:
//! [`prepare`] (ingest, split, features, LOP, global power law),
//! [`mine_stage`] (divergent windows, discretizer, pattern pool) and
//! [`finish`] (top-n selection, partitioned fit, evaluation).

mod output;
mod sweep;

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::divergence::{detect_divergent_windows, per_step_errors, DivergenceConfig, DivergentWindow};
use crate::error::{Error, Result, StageExt};
use crate::miner::{
    fit_discretizer, mine_patterns, select_top_n, symbolize, CoOccurrencePattern, Discretizer, MinerConfig, SymbolTable,
};
use crate::obd::{attr, parse_csv, resample_uniform, split_train_test, CsvSchema, IngestReport, ObdDataset, SplitSpec};
use crate::physics::{calibrate_lop, compute_features, lop_predict, FeatureSeries, LopParams, PhysicsConstants};
use crate::pstva::{self, PartitionedModel, PstvaConfig};
use crate::regression::{
    build_samples, compute_metrics, fit_power_law, predict, select_delta, DeltaCandidate, FitReport, LmOptions,
    Metrics, PowerLawParams,
};
use crate::series::{dense, Series};
use crate::synth::{generate, SynthConfig};

pub use output::{emit_scatter, read_metrics_table, render_table, write_metrics_csv, ScatterBounds, ScatterSummary};
pub use sweep::{sensitivity_sweep, sensitivity_sweep_uncached, write_sweep_csv, SweepAxis, SweepRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    Synth {
        #[serde(default = "SynthConfig::default_four_regime")]
        config: SynthConfig,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            config: SynthConfig::default_four_regime(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split_seed: u64,
    pub physics: PhysicsConstants<f64>,
    /// Exponents and activation temperature; the amplitude is recalibrated.
    pub lop: LopParams<f64>,
    pub lm: LmOptions,
    pub divergence: DivergenceConfig,
    pub miner: MinerConfig,
    pub n_patterns: usize,
    /// Fixed lag in samples. When absent the lag is selected from
    /// `delta_candidates` on the training runs.
    pub delta: Option<usize>,
    pub delta_candidates: Vec<usize>,
    pub min_partition_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            split_seed: 7,
            physics: PhysicsConstants::default(),
            lop: LopParams::default(),
            lm: LmOptions::default(),
            divergence: DivergenceConfig::default(),
            miner: MinerConfig::default(),
            n_patterns: 4,
            delta: None,
            delta_candidates: (0..=5).collect(),
            min_partition_samples: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Csv { path, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", path.display())));
                }
            }
            DataSource::Synth { config } => config.validate()?,
        }
        self.physics.validate()?;
        self.lop.validate()?;
        self.lm.validate()?;
        self.divergence.validate()?;
        self.miner.validate()?;
        if self.delta.is_none() && self.delta_candidates.is_empty() {
            return Err(Error::Config("either delta or delta_candidates is required".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_reader(BufReader::new(file))?;
        Ok(config)
    }

    fn pstva_config(&self, delta: usize) -> PstvaConfig {
        PstvaConfig {
            delta,
            lm: self.lm.clone(),
            min_partition_samples: self.min_partition_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lop,
    PBase,
    PStva,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Lop, Method::PBase, Method::PStva];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lop => "lop",
            Method::PBase => "p-base",
            Method::PStva => "p-stva",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Lop => "LOP",
            Method::PBase => "P-Base",
            Method::PStva => "P-STVA",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (lop, p-base, p-stva)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train, test)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub split: Split,
    pub metrics: Metrics<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub runs: usize,
    pub records: usize,
    pub sample_period: f64,
    pub train_runs: Vec<String>,
    pub test_runs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub delta: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delta_candidates: Vec<DeltaCandidate<f64>>,
    pub lop: LopParams<f64>,
    pub base: FitReport<f64>,
    pub divergent_windows: usize,
    /// Patterns that passed the miner's filters, before top-n selection.
    pub mined_patterns: usize,
    pub patterns: Vec<CoOccurrencePattern>,
    pub partition_params: Vec<PowerLawParams<f64>>,
    /// Training samples per partition.
    pub partition_samples: Vec<usize>,
    pub fallback_partitions: Vec<usize>,
    /// One entry per (method, split), methods in LOP, P-Base, P-STVA order.
    pub metrics: Vec<MethodMetrics>,
    /// Wall-clock per stage. Kept out of the JSON so reruns are identical.
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl ExperimentReport {
    pub fn metrics_for(&self, method: Method, split: Split) -> Option<&Metrics<f64>> {
        self.metrics
            .iter()
            .find(|m| m.method == method && m.split == split)
            .map(|m| &m.metrics)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One side of the split with everything needed to evaluate on it.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub dataset: ObdDataset,
    pub features: Vec<FeatureSeries<f64>>,
    pub observed: Vec<Vec<f64>>,
}

impl SplitData {
    fn new(dataset: ObdDataset, physics: &PhysicsConstants<f64>) -> Self {
        let features = compute_features(&dataset, physics);
        let observed = dataset.nox_series();
        SplitData {
            dataset,
            features,
            observed,
        }
    }

    pub fn observed_series(&self) -> Series<f64> {
        dense(&self.observed)
    }
}

/// Output of [`prepare`]; depends on the data, split, physics, LOP, LM and
/// lag settings only.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub ingest: Option<IngestReport>,
    pub split: SplitSpec,
    pub n_runs: usize,
    pub train: SplitData,
    pub test: SplitData,
    pub lop: LopParams<f64>,
    pub delta_candidates: Vec<DeltaCandidate<f64>>,
    pub base: FitReport<f64>,
    pub timings: Vec<StageTiming>,
}

/// Output of [`mine_stage`]; adds the divergence and miner settings.
#[derive(Debug, Clone)]
pub struct Mined {
    pub window_len: usize,
    pub windows: Vec<DivergentWindow<f64>>,
    pub discretizer: Discretizer,
    pub train_symbols: SymbolTable,
    pub test_symbols: SymbolTable,
    /// All patterns passing the miner's filters, in rank order.
    pub pool: Vec<CoOccurrencePattern>,
    pub timings: Vec<StageTiming>,
}

/// A finished experiment with the artifacts behind its report.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub report: ExperimentReport,
    pub model: PartitionedModel<f64>,
    pub prepared: Prepared,
    pub mined: Mined,
    /// `predictions[split][method]`, indexed like [`Split::ALL`] and [`Method::ALL`].
    pub predictions: [[Series<f64>; 3]; 2],
}

impl Experiment {
    pub fn split_data(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.prepared.train,
            Split::Test => &self.prepared.test,
        }
    }

    pub fn prediction(&self, split: Split, method: Method) -> &Series<f64> {
        &self.predictions[split as usize][method as usize]
    }
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().stage(stage);
    timings.push(StageTiming {
        stage: stage.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    out
}

/// Loads the configured data source onto a uniform 1 s grid.
pub fn load_dataset(source: &DataSource) -> Result<(ObdDataset, Option<IngestReport>)> {
    match source {
        DataSource::Csv { path, schema } => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let (raw, report) = parse_csv(BufReader::new(file), schema)?;
            let dataset = resample_uniform(&raw, raw.sample_period)?;
            Ok((dataset, Some(report)))
        }
        DataSource::Synth { config } => Ok((generate(config)?.dataset, None)),
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let mut timings = Vec::new();
    let (dataset, ingest) = timed(&mut timings, "ingest", || load_dataset(&config.data))?;
    let split = timed(&mut timings, "split", || split_train_test(&dataset, config.split_seed))?;
    let (train, test) = timed(&mut timings, "features", || {
        Ok((
            SplitData::new(dataset.subset(&split.train_run_ids), &config.physics),
            SplitData::new(dataset.subset(&split.test_run_ids), &config.physics),
        ))
    })?;
    info!(
        "{} train runs ({} records), {} test runs ({} records)",
        train.dataset.runs.len(),
        train.dataset.n_records(),
        test.dataset.runs.len(),
        test.dataset.n_records()
    );
    let lop = timed(&mut timings, "lop", || {
        calibrate_lop(&train.features, &train.observed, &config.lop)
    })?;
    let (delta, delta_candidates, base) = timed(&mut timings, "p-base", || {
        let (delta, candidates) = match config.delta {
            Some(d) => (d, Vec::new()),
            None => {
                let sel = select_delta(&train.features, &train.observed, &config.delta_candidates, &config.lm)?;
                (sel.delta, sel.candidates)
            }
        };
        let samples = build_samples(&train.features, &train.observed, delta)?;
        Ok((delta, candidates, fit_power_law(&samples, &config.lm)?))
    })?;
    info!("P-Base: {} (delta {delta})", base.params);
    Ok(Prepared {
        ingest,
        split,
        n_runs: dataset.runs.len(),
        train,
        test,
        lop,
        delta_candidates,
        base,
        timings,
    })
}

/// Mining attributes present in the training data; missing ones are
/// skipped with a warning.
fn available_attributes(train: &ObdDataset, wanted: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for a in wanted {
        // the alias and the canonical name are the same column
        let canonical = if a == attr::ENG_RPM {
            attr::ENGINE_SPEED
        } else {
            a.as_str()
        };
        if !seen.insert(canonical.to_string()) {
            continue;
        }
        if train.has_attribute(a) {
            out.push(a.clone());
        } else {
            warn!("mining attribute `{a}` is absent from the training data; skipping");
        }
    }
    out
}

pub fn mine_stage(prepared: &Prepared, config: &ExperimentConfig) -> Result<Mined> {
    config.divergence.validate()?;
    config.miner.validate()?;
    let mut timings = Vec::new();
    let train = &prepared.train;
    let (window_len, windows) = timed(&mut timings, "divergence", || {
        let base_pred = predict(&prepared.base.params, &train.features);
        let errors = per_step_errors(&base_pred, &train.observed_series());
        let window_len = config.divergence.window_samples(train.dataset.sample_period)?;
        Ok((
            window_len,
            detect_divergent_windows(&errors, &train.dataset, &config.divergence)?,
        ))
    })?;
    info!("{} divergent windows of {window_len} samples", windows.len());

    let (discretizer, train_symbols, test_symbols, pool) = timed(&mut timings, "mine", || {
        let attributes = available_attributes(&train.dataset, &config.miner.mining_attributes);
        if attributes.is_empty() {
            return Err(Error::Config(
                "none of the mining attributes is present in the data".into(),
            ));
        }
        let discretizer = fit_discretizer(&train.dataset, &attributes)?;
        let train_symbols = symbolize(&train.dataset, &discretizer);
        let test_symbols = symbolize(&prepared.test.dataset, &discretizer);
        let pool = if windows.is_empty() {
            warn!("no divergent windows; nothing to mine");
            Vec::new()
        } else {
            mine_patterns(&train_symbols, &windows, &config.miner, window_len)?
        };
        Ok((discretizer, train_symbols, test_symbols, pool))
    })?;
    info!("{} patterns mined", pool.len());
    Ok(Mined {
        window_len,
        windows,
        discretizer,
        train_symbols,
        test_symbols,
        pool,
        timings,
    })
}

pub fn finish(prepared: &Prepared, mined: &Mined, config: &ExperimentConfig) -> Result<Experiment> {
    let (report, model, predictions) = evaluate(prepared, mined, config)?;
    Ok(Experiment {
        report,
        model,
        prepared: prepared.clone(),
        mined: mined.clone(),
        predictions,
    })
}

type Evaluated = (ExperimentReport, PartitionedModel<f64>, [[Series<f64>; 3]; 2]);

fn evaluate(prepared: &Prepared, mined: &Mined, config: &ExperimentConfig) -> Result<Evaluated> {
    let mut timings: Vec<StageTiming> = prepared.timings.iter().chain(&mined.timings).cloned().collect();
    let delta = prepared.base.params.delta;
    let patterns = select_top_n(&mined.pool, config.n_patterns);
    let fit = timed(&mut timings, "p-stva", || {
        pstva::fit(
            &prepared.train.features,
            &prepared.train.observed,
            &mined.train_symbols,
            &patterns,
            &mined.discretizer,
            mined.window_len,
            &config.pstva_config(delta),
            Some(&prepared.base),
        )
    })?;
    let model = fit.model;

    let (predictions, metrics) = timed(&mut timings, "evaluate", || {
        let mut predictions: [[Series<f64>; 3]; 2] = Default::default();
        let mut metrics = Vec::with_capacity(6);
        for split in Split::ALL {
            let (data, symbols) = match split {
                Split::Train => (&prepared.train, &mined.train_symbols),
                Split::Test => (&prepared.test, &mined.test_symbols),
            };
            let obs = data.observed_series();
            let preds = [
                lop_predict(&data.features, &prepared.lop),
                predict(&prepared.base.params, &data.features),
                pstva::predict(&model, &data.features, symbols)?,
            ];
            for method in Method::ALL {
                let m = compute_metrics(&preds[method as usize], &obs)?;
                metrics.push((method, split, m));
            }
            predictions[split as usize] = preds;
        }
        metrics.sort_by_key(|(m, s, _)| (*m, *s));
        Ok((
            predictions,
            metrics
                .into_iter()
                .map(|(method, split, metrics)| MethodMetrics { method, split, metrics })
                .collect::<Vec<_>>(),
        ))
    })?;

    let report = ExperimentReport {
        config: config.clone(),
        dataset: DatasetSummary {
            runs: prepared.n_runs,
            records: prepared.train.dataset.n_records() + prepared.test.dataset.n_records(),
            sample_period: prepared.train.dataset.sample_period,
            train_runs: prepared.train.dataset.runs.iter().map(|r| r.run_id.clone()).collect(),
            test_runs: prepared.test.dataset.runs.iter().map(|r| r.run_id.clone()).collect(),
            ingest: prepared.ingest.clone(),
        },
        delta,
        delta_candidates: prepared.delta_candidates.clone(),
        lop: prepared.lop.clone(),
        base: prepared.base.clone(),
        divergent_windows: mined.windows.len(),
        mined_patterns: mined.pool.len(),
        patterns: model.patterns.clone(),
        partition_params: model.partition_params.clone(),
        partition_samples: model.partition_samples.clone(),
        fallback_partitions: model.fallbacks.iter().copied().collect(),
        metrics,
        timings,
    };
    Ok((report, model, predictions))
}

/// Runs the whole pipeline and keeps the intermediate artifacts.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<Experiment> {
    let prepared = prepare(config)?;
    let mined = mine_stage(&prepared, config)?;
    finish(&prepared, &mined, config)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(run_pipeline(config)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut synth = SynthConfig::default_four_regime();
        synth.runs = 6;
        synth.run_length = 400;
        ExperimentConfig {
            data: DataSource::Synth { config: synth },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_json_round_trip() {
        let c = small_config();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"n_patterns": 2}"#).unwrap();
        assert_eq!(c.n_patterns, 2);
        assert_eq!(c.divergence, DivergenceConfig::default());
        assert_eq!(c.data, DataSource::default());
    }

    #[test]
    fn missing_csv_is_a_config_error() {
        let c = ExperimentConfig {
            data: DataSource::Csv {
                path: "/nonexistent/data.csv".into(),
                schema: CsvSchema::default(),
            },
            ..ExperimentConfig::default()
        };
        assert!(c.validate().unwrap_err().is_config_error());
    }

    #[test]
    fn report_has_every_method_and_split_once() {
        let report = run_experiment(&small_config()).unwrap();
        assert_eq!(report.metrics.len(), 6);
        for m in Method::ALL {
            for s in Split::ALL {
                assert_eq!(
                    report.metrics.iter().filter(|x| x.method == m && x.split == s).count(),
                    1
                );
            }
        }
        assert_eq!(report.config, small_config());
        assert!(!report.timings.is_empty());
        assert!(!report.to_json().unwrap().contains("seconds"));
    }

    #[test]
    fn zero_patterns_match_base() {
        let mut c = small_config();
        c.n_patterns = 0;
        let report = run_experiment(&c).unwrap();
        for s in Split::ALL {
            assert_eq!(
                report.metrics_for(Method::PStva, s),
                report.metrics_for(Method::PBase, s)
            );
        }
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let mut c = small_config();
        c.miner.mining_attributes = vec!["NotThere".into()];
        match run_experiment(&c) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "mine"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn method_and_split_parse() {
        assert_eq!("p-stva".parse::<Method>().unwrap(), Method::PStva);
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
        assert!("nope".parse::<Method>().is_err());
    }
}
