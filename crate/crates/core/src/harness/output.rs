use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Method, MethodMetrics, Split};
use crate::error::{Error, Result};
use crate::obd::ObdDataset;
use crate::series::Series;

/// CSV columns: method, split, r2, rmse, mae, n.
pub fn write_metrics_csv<W: Write>(metrics: &[MethodMetrics], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["method", "split", "r2", "rmse", "mae", "n"])?;
    for m in metrics {
        w.write_record([
            m.method.as_str().to_string(),
            m.split.as_str().to_string(),
            m.metrics.r2.to_string(),
            m.metrics.rmse.to_string(),
            m.metrics.mae.to_string(),
            m.metrics.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics sink>", e))?;
    Ok(())
}

/// Reads a metrics list in the report's JSON layout, either bare or under a
/// top-level `metrics` key.
pub fn read_metrics_table<R: Read>(source: R) -> Result<Vec<MethodMetrics>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Layout {
        Bare(Vec<MethodMetrics>),
        Wrapped { metrics: Vec<MethodMetrics> },
    }
    Ok(match serde_json::from_reader(source)? {
        Layout::Bare(m) | Layout::Wrapped { metrics: m } => m,
    })
}

/// Markdown table of R², RMSE and MAE for one split, one row per method.
pub fn render_table(metrics: &[MethodMetrics], split: Split) -> String {
    let mut out = String::new();
    let title = match split {
        Split::Train => "Training",
        Split::Test => "Test",
    };
    let _ = writeln!(out, "{title} NOx accuracy");
    let _ = writeln!(out);
    let _ = writeln!(out, "| Method | R² | RMSE (ppm) | MAE (ppm) |");
    let _ = writeln!(out, "|---|---:|---:|---:|");
    for method in Method::ALL {
        if let Some(m) = metrics.iter().find(|m| m.method == method && m.split == split) {
            let r2 = if m.metrics.r2.is_finite() {
                format!("{:.4}", m.metrics.r2)
            } else {
                "n/a".to_string()
            };
            let _ = writeln!(
                out,
                "| {} | {r2} | {:.2} | {:.2} |",
                method.label(),
                m.metrics.rmse,
                m.metrics.mae
            );
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterBounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSummary {
    pub n: usize,
    /// The y = x reference line as `[slope, intercept]`.
    pub reference_line: [f64; 2],
    /// Common bounds for both axes, absent when there are no points.
    pub bounds: Option<ScatterBounds>,
    pub max_abs_residual: f64,
}

/// Writes observed/predicted pairs to `path` (CSV columns observed_ppm,
/// predicted_ppm, run_id, t_s) and a summary next to it with a `.json`
/// extension.
pub fn emit_scatter(
    pred: &Series<f64>,
    obs: &Series<f64>,
    dataset: &ObdDataset,
    path: &Path,
) -> Result<ScatterSummary> {
    if pred.len() != obs.len() || pred.len() != dataset.runs.len() {
        return Err(Error::Metrics(format!(
            "scatter needs aligned series: {} predicted runs, {} observed, {} in dataset",
            pred.len(),
            obs.len(),
            dataset.runs.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["observed_ppm", "predicted_ppm", "run_id", "t_s"])?;
    let mut n = 0;
    let mut bounds: Option<ScatterBounds> = None;
    let mut max_abs_residual = 0.0f64;
    for ((p_run, o_run), run) in pred.iter().zip(obs).zip(&dataset.runs) {
        for ((p, o), rec) in p_run.iter().zip(o_run).zip(&run.records) {
            let (Some(p), Some(o)) = (p, o) else { continue };
            w.write_record([o.to_string(), p.to_string(), run.run_id.clone(), rec.t.to_string()])?;
            n += 1;
            max_abs_residual = max_abs_residual.max((o - p).abs());
            let lo = o.min(*p);
            let hi = o.max(*p);
            bounds = Some(match bounds {
                Some(b) => ScatterBounds {
                    min: b.min.min(lo),
                    max: b.max.max(hi),
                },
                None => ScatterBounds { min: lo, max: hi },
            });
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let summary = ScatterSummary {
        n,
        reference_line: [1.0, 0.0],
        bounds,
        max_abs_residual,
    };
    let summary_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}
