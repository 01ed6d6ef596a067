//! Per-run value series aligned with dataset records.

use std::io::Write;

use crate::error::{Error, Result};
use crate::obd::ObdDataset;
use crate::scalar::Scalar;

/// One `Vec` per run, one slot per record; `None` marks an undefined value.
pub type Series<T> = Vec<Vec<Option<T>>>;

/// Wraps a dense per-run series so every slot is defined.
pub fn dense<T: Copy>(values: &[Vec<T>]) -> Series<T> {
    values
        .iter()
        .map(|run| run.iter().copied().map(Some).collect())
        .collect()
}

/// Number of slots where both series are defined.
pub fn overlap<T>(a: &Series<T>, b: &Series<T>) -> usize {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).filter(|(p, q)| p.is_some() && q.is_some()).count())
        .sum()
}

/// CSV columns: run_id, t_s, nox_pred_ppm, nox_obs_ppm. Only slots with a
/// defined prediction are written.
pub fn write_predictions_csv<T: Scalar, W: Write>(
    dataset: &ObdDataset,
    predictions: &Series<T>,
    sink: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["run_id", "t_s", "nox_pred_ppm", "nox_obs_ppm"])?;
    for (run, pred) in dataset.runs.iter().zip(predictions) {
        for (rec, p) in run.records.iter().zip(pred) {
            if let Some(p) = p {
                w.write_record([
                    run.run_id.clone(),
                    rec.t.to_string(),
                    p.to_string(),
                    rec.nox_observed.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<predictions sink>", e))?;
    Ok(())
}
