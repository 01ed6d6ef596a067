use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use noxstva::divergence::write_windows_csv;
use noxstva::harness::{
    emit_scatter, finish, mine_stage, prepare, render_table, run_pipeline, sensitivity_sweep, write_metrics_csv,
    write_sweep_csv, DataSource, ExperimentConfig, Method, MethodMetrics, Split, SweepAxis,
};
use noxstva::miner::select_top_n;
use noxstva::obd::{write_csv, CsvSchema};
use noxstva::physics::lop_predict;
use noxstva::physics::write_features_csv;
use noxstva::regression::{compute_metrics, predict};
use noxstva::synth::{generate, write_labels_csv, SynthConfig};
use noxstva::Error;

/// Physics-guided NOx modelling from OBD telemetry
#[derive(Parser, Debug)]
#[command(name = "noxstva", version, about)]
struct Cli {
    /// JSON config: an experiment config, or a synthetic-data config for `synth`
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the split seed and, for synthetic data, the generator seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with regime labels
    Synth,
    /// Load and split the data, and export physics features
    Ingest {
        /// OBD CSV export; overrides the configured data source
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Calibrate LOP and fit the global power law
    FitBase {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detect divergent windows and mine co-occurrence patterns
    Mine {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit the pattern-partitioned model
    FitPstva {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the full experiment and write the report
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep one parameter and write long-format results
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        /// n_patterns, summation_threshold or window_len
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Write observed-vs-predicted scatter data
    Scatter {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Methods to export; all when omitted
        #[arg(long, value_delimiter = ',')]
        method: Vec<Method>,
        /// Splits to export; all when omitted
        #[arg(long, value_delimiter = ',')]
        split: Vec<Split>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Synth => synth(cli),
        Command::Ingest { data }
        | Command::FitBase { data }
        | Command::Mine { data }
        | Command::FitPstva { data }
        | Command::Evaluate { data }
        | Command::Sweep { data, .. }
        | Command::Scatter { data, .. } => {
            let config = experiment_config(cli, data.as_deref())?;
            fs::create_dir_all(&cli.out).map_err(|e| io_error(&cli.out, e))?;
            match &cli.command {
                Command::Ingest { .. } => ingest(cli, &config),
                Command::FitBase { .. } => fit_base(cli, &config),
                Command::Mine { .. } => mine(cli, &config),
                Command::FitPstva { .. } => fit_pstva(cli, &config),
                Command::Evaluate { .. } => evaluate(cli, &config),
                Command::Sweep { axis, values, .. } => sweep(cli, &config, *axis, values),
                Command::Scatter { method, split, .. } => scatter(cli, &config, method, split),
                Command::Synth => unreachable!(),
            }
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn experiment_config(cli: &Cli, data: Option<&Path>) -> Result<ExperimentConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => read_json(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = data {
        let schema = match &config.data {
            DataSource::Csv { schema, .. } => schema.clone(),
            DataSource::Synth { .. } => CsvSchema::default(),
        };
        config.data = DataSource::Csv {
            path: path.to_path_buf(),
            schema,
        };
    }
    if let Some(seed) = cli.seed {
        config.split_seed = seed;
        if let DataSource::Synth { config: synth } = &mut config.data {
            synth.seed = seed;
        }
    }
    config.validate()?;
    Ok(config)
}

fn create(cli: &Cli, name: &str) -> Result<BufWriter<File>, Error> {
    let path = cli.out.join(name);
    let file = File::create(&path).map_err(|e| io_error(&path, e))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(cli: &Cli, name: &str, value: &T) -> Result<(), Error> {
    let path = cli.out.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn synth(cli: &Cli) -> Result<(), Error> {
    let mut config = match &cli.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default_four_regime(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    fs::create_dir_all(&cli.out).map_err(|e| io_error(&cli.out, e))?;
    let out = generate(&config)?;
    write_csv(&out.dataset, create(cli, "synth.csv")?)?;
    write_labels_csv(&out, &config, create(cli, "synth_labels.csv")?)?;
    write_json(cli, "synth_config.json", &config)?;
    info!("{} runs, {} records", out.dataset.runs.len(), out.dataset.n_records());
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary<'a> {
    runs: usize,
    records: usize,
    train_runs: Vec<&'a str>,
    test_runs: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ingest: Option<&'a noxstva::obd::IngestReport>,
}

fn ingest(cli: &Cli, config: &ExperimentConfig) -> Result<(), Error> {
    let prepared = prepare(config)?;
    let summary = IngestSummary {
        runs: prepared.n_runs,
        records: prepared.train.dataset.n_records() + prepared.test.dataset.n_records(),
        train_runs: prepared.train.dataset.runs.iter().map(|r| r.run_id.as_str()).collect(),
        test_runs: prepared.test.dataset.runs.iter().map(|r| r.run_id.as_str()).collect(),
        ingest: prepared.ingest.as_ref(),
    };
    write_json(cli, "ingest.json", &summary)?;
    write_features_csv(
        &prepared.train.dataset,
        &prepared.train.features,
        create(cli, "features_train.csv")?,
    )?;
    write_features_csv(
        &prepared.test.dataset,
        &prepared.test.features,
        create(cli, "features_test.csv")?,
    )?;
    Ok(())
}

fn fit_base(cli: &Cli, config: &ExperimentConfig) -> Result<(), Error> {
    let prepared = prepare(config)?;
    let mut metrics = Vec::new();
    for (split, data) in [(Split::Train, &prepared.train), (Split::Test, &prepared.test)] {
        let obs = data.observed_series();
        for (method, pred) in [
            (Method::Lop, lop_predict(&data.features, &prepared.lop)),
            (Method::PBase, predict(&prepared.base.params, &data.features)),
        ] {
            metrics.push(MethodMetrics {
                method,
                split,
                metrics: compute_metrics(&pred, &obs)?,
            });
        }
    }
    metrics.sort_by_key(|m| (m.method, m.split));
    write_json(
        cli,
        "base.json",
        &serde_json::json!({
            "lop": prepared.lop,
            "delta_candidates": prepared.delta_candidates,
            "fit": prepared.base,
        }),
    )?;
    write_metrics_csv(&metrics, create(cli, "metrics.csv")?)?;
    Ok(())
}

fn mine(cli: &Cli, config: &ExperimentConfig) -> Result<(), Error> {
    let prepared = prepare(config)?;
    let mined = mine_stage(&prepared, config)?;
    write_windows_csv(
        &prepared.train.dataset,
        &mined.windows,
        create(cli, "divergent_windows.csv")?,
    )?;
    write_json(
        cli,
        "patterns.json",
        &serde_json::json!({
            "window_len": mined.window_len,
            "divergent_windows": mined.windows.len(),
            "selected": select_top_n(&mined.pool, config.n_patterns),
            "mined": mined.pool,
        }),
    )?;
    Ok(())
}

fn fit_pstva(cli: &Cli, config: &ExperimentConfig) -> Result<(), Error> {
    let prepared = prepare(config)?;
    let mined = mine_stage(&prepared, config)?;
    let exp = finish(&prepared, &mined, config)?;
    write_json(cli, "model.json", &exp.model)
}

fn evaluate(cli: &Cli, config: &ExperimentConfig) -> Result<(), Error> {
    let exp = run_pipeline(config)?;
    let report = &exp.report;
    write_json(cli, "report.json", report)?;
    write_json(cli, "timings.json", &report.timings)?;
    write_json(cli, "patterns.json", &report.patterns)?;
    write_json(cli, "model.json", &exp.model)?;
    write_metrics_csv(&report.metrics, create(cli, "metrics.csv")?)?;
    let tables = format!(
        "{}\n{}",
        render_table(&report.metrics, Split::Train),
        render_table(&report.metrics, Split::Test)
    );
    let path = cli.out.join("tables.md");
    fs::write(&path, &tables).map_err(|e| io_error(&path, e))?;
    println!("{tables}");
    Ok(())
}

fn sweep(cli: &Cli, config: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<(), Error> {
    let rows = sensitivity_sweep(config, axis, values)?;
    write_sweep_csv(&rows, create(cli, &format!("sweep_{axis}.csv"))?)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{} of {} sweep rows failed", failed, rows.len());
    }
    Ok(())
}

fn scatter(cli: &Cli, config: &ExperimentConfig, methods: &[Method], splits: &[Split]) -> Result<(), Error> {
    let exp = run_pipeline(config)?;
    let methods = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        methods.to_vec()
    };
    let splits = if splits.is_empty() {
        Split::ALL.to_vec()
    } else {
        splits.to_vec()
    };
    for &split in &splits {
        let data = exp.split_data(split);
        let obs = data.observed_series();
        for &method in &methods {
            let path = cli.out.join(format!("scatter_{method}_{split}.csv"));
            let summary = emit_scatter(exp.prediction(split, method), &obs, &data.dataset, &path)?;
            info!("{}: {} points", path.display(), summary.n);
        }
    }
    Ok(())
}
