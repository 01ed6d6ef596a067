//! Power-law NOx regression `y(k+δ) = a · T_adiab(k)^b · t_comb(k)^c`.
//!
//! Samples pair the features at `k` with the observation at `k + δ` inside
//! one run. Fitting is ordinary least squares in ppm space, solved with
//! Levenberg–Marquardt from a log-space OLS starting point.

mod lm;
mod metrics;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::FeatureSeries;
use crate::scalar::Scalar;
use crate::series::Series;

pub use lm::{
    fit_lm, fit_lm_observed, log_ols_init, parameter_covariance, power_law_jacobian, FitReport, LmOptions, LmStep,
};
pub use metrics::{compute_metrics, sum_squared_error, Metrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawParams<T = f64> {
    pub a: T,
    pub b: T,
    pub c: T,
    /// Lag between features and target, in samples.
    pub delta: usize,
}

impl<T: Scalar> PowerLawParams<T> {
    pub fn new(a: T, b: T, c: T, delta: usize) -> Self {
        PowerLawParams { a, b, c, delta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > T::zero()) || !self.a.is_finite() || !self.b.is_finite() || !self.c.is_finite() {
            return Err(Error::Model(format!("invalid power-law parameters {self}")));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, t_adiab: T, t_comb: T) -> T {
        self.a * t_adiab.powf(self.b) * t_comb.powf(self.c)
    }
}

impl<T: Scalar> fmt::Display for PowerLawParams<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a={:e} b={} c={} delta={}", self.a, self.b, self.c, self.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleOrigin {
    /// Run index within the feature list.
    pub run: usize,
    /// Feature timestep; the target sits at `k + delta`.
    pub k: usize,
}

/// Regression samples with their provenance, in struct-of-arrays layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet<T = f64> {
    pub delta: usize,
    pub t_adiab: Vec<T>,
    pub t_comb: Vec<T>,
    pub y: Vec<T>,
    pub origin: Vec<SampleOrigin>,
}

impl<T: Scalar> SampleSet<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Samples at the given positions, in that order.
    pub fn select(&self, idx: &[usize]) -> SampleSet<T> {
        SampleSet {
            delta: self.delta,
            t_adiab: idx.iter().map(|&i| self.t_adiab[i]).collect(),
            t_comb: idx.iter().map(|&i| self.t_comb[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            origin: idx.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    pub fn sse(&self, params: &PowerLawParams<T>) -> T {
        self.t_adiab
            .iter()
            .zip(&self.t_comb)
            .zip(&self.y)
            .map(|((&ta, &tc), &y)| {
                let r = y - params.eval(ta, tc);
                r * r
            })
            .sum()
    }
}

/// Pairs features at `k` with the observation at `k + delta`, never across
/// a run boundary. Invalid feature steps are skipped.
pub fn build_samples<T: Scalar>(
    features: &[FeatureSeries<T>],
    observed: &[Vec<T>],
    delta: usize,
) -> Result<SampleSet<T>> {
    if features.len() != observed.len() {
        return Err(Error::Build(format!(
            "{} feature runs but {} observed runs",
            features.len(),
            observed.len()
        )));
    }
    let mut out = SampleSet {
        delta,
        ..SampleSet::default()
    };
    let (mut steps, mut valid) = (0usize, 0usize);
    for (run, (fs, obs)) in features.iter().zip(observed).enumerate() {
        if fs.len() != obs.len() {
            return Err(Error::Build(format!(
                "run `{}` has {} feature steps but {} observations",
                fs.run_id,
                fs.len(),
                obs.len()
            )));
        }
        steps += fs.len();
        for (k, f) in fs.steps.iter().enumerate() {
            if !f.valid {
                continue;
            }
            valid += 1;
            let Some(&y) = obs.get(k + delta) else { continue };
            out.t_adiab.push(f.t_adiab);
            out.t_comb.push(f.t_comb);
            out.y.push(y);
            out.origin.push(SampleOrigin { run, k });
        }
    }
    if out.is_empty() {
        return Err(Error::Build(format!(
            "no samples: {} runs, {steps} timesteps, {valid} valid, delta={delta}",
            features.len()
        )));
    }
    Ok(out)
}

/// Prediction placed at `k + delta`; undefined where features are invalid,
/// the target falls outside the run, or nothing maps onto the slot.
pub fn predict<T: Scalar>(params: &PowerLawParams<T>, features: &[FeatureSeries<T>]) -> Series<T> {
    features
        .iter()
        .map(|fs| {
            let mut out = vec![None; fs.len()];
            for (k, f) in fs.steps.iter().enumerate() {
                if f.valid && k + params.delta < fs.len() {
                    out[k + params.delta] = Some(params.eval(f.t_adiab, f.t_comb));
                }
            }
            out
        })
        .collect()
}

/// Log-OLS start followed by Levenberg–Marquardt.
pub fn fit_power_law<T: Scalar>(samples: &SampleSet<T>, opts: &LmOptions) -> Result<FitReport<T>> {
    let init = log_ols_init(samples, opts.min_samples)?;
    fit_lm(samples, &init, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCandidate<T = f64> {
    pub delta: usize,
    /// Training RMSE, absent when the fit failed.
    pub rmse: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSelection<T = f64> {
    pub delta: usize,
    pub candidates: Vec<DeltaCandidate<T>>,
}

/// Fits the power law for each candidate lag and keeps the one with the
/// smallest training RMSE; ties go to the smaller lag.
pub fn select_delta<T: Scalar>(
    features: &[FeatureSeries<T>],
    observed: &[Vec<T>],
    candidates: &[usize],
    opts: &LmOptions,
) -> Result<DeltaSelection<T>> {
    if candidates.is_empty() {
        return Err(Error::Selection("no candidate lags".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    let mut best: Option<(usize, T)> = None;
    for delta in sorted {
        let attempt = build_samples(features, observed, delta).and_then(|s| {
            let report = fit_power_law(&s, opts)?;
            Ok((report.sse_final / T::of(s.len() as f64)).sqrt())
        });
        match attempt {
            Ok(rmse) => {
                if best.is_none_or(|(_, b)| rmse < b) {
                    best = Some((delta, rmse));
                }
                rows.push(DeltaCandidate {
                    delta,
                    rmse: Some(rmse),
                    error: None,
                });
            }
            Err(e) => rows.push(DeltaCandidate {
                delta,
                rmse: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((delta, _)) => Ok(DeltaSelection {
            delta,
            candidates: rows,
        }),
        None => Err(Error::Selection(format!(
            "every candidate lag failed: {}",
            rows.iter()
                .filter_map(|r| r.error.as_deref())
                .collect::<Vec<_>>()
                .join("; ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::FeatureStep;

    fn run(id: &str, n: usize) -> FeatureSeries<f64> {
        FeatureSeries {
            run_id: id.into(),
            steps: (0..n)
                .map(|i| FeatureStep {
                    t_adiab: 2800.0 + 10.0 * i as f64,
                    t_comb: 4e-4 + 1e-5 * i as f64,
                    x_o2: 0.21,
                    valid: true,
                })
                .collect(),
        }
    }

    #[test]
    fn lag_zero_keeps_every_valid_step() {
        let mut f = vec![run("a", 10)];
        f[0].steps[3].valid = false;
        let obs = vec![vec![1.0; 10]];
        assert_eq!(build_samples(&f, &obs, 0).unwrap().len(), 9);
    }

    #[test]
    fn lag_one_drops_the_last_step() {
        let f = vec![run("a", 10)];
        let obs = vec![vec![1.0; 10]];
        assert_eq!(build_samples(&f, &obs, 1).unwrap().len(), 9);
    }

    #[test]
    fn samples_never_cross_runs() {
        let f = vec![run("a", 10), run("b", 10)];
        let obs = vec![(0..10).map(f64::from).collect(), (10..20).map(f64::from).collect()];
        let s = build_samples(&f, &obs, 1).unwrap();
        // naive concatenation would pair step 9 of `a` with step 0 of `b`
        assert_eq!(s.len(), 18);
        for (o, y) in s.origin.iter().zip(&s.y) {
            assert_eq!(*y, (o.run * 10 + o.k + 1) as f64);
        }
    }

    #[test]
    fn empty_samples_report_counts() {
        let f = vec![run("a", 2)];
        let obs = vec![vec![1.0; 2]];
        let err = build_samples(&f, &obs, 5).unwrap_err().to_string();
        assert!(err.contains("2 timesteps"), "{err}");
    }

    #[test]
    fn predict_places_values_at_lag() {
        let f = vec![run("a", 4)];
        let p = PowerLawParams::new(1.0, 1.0, 1.0, 1);
        let out = predict(&p, &f);
        assert_eq!(out[0][0], None);
        assert_eq!(out[0][1], Some(2800.0 * 4e-4));
    }

    #[test]
    fn arithmetic_identity() {
        let p = PowerLawParams::<f64>::new(1.0, 1.0, 1.0, 0);
        assert!((p.eval(1000.0, 0.002) - 2.0).abs() < 1e-15);
        let flat = PowerLawParams::new(3.5, 0.0, 0.0, 0);
        assert!(predict(&flat, &[run("a", 5)])[0].iter().all(|v| *v == Some(3.5)));
    }

    #[test]
    fn params_validate() {
        assert!(PowerLawParams::new(0.0, 1.0, 1.0, 0).validate().is_err());
        assert!(PowerLawParams::new(1.0, f64::NAN, 1.0, 0).validate().is_err());
        assert!(PowerLawParams::new(1.0, 1.0, 1.0, 0).validate().is_ok());
    }

    #[test]
    fn single_lag_candidate() {
        let f = vec![run("a", 40)];
        let obs = vec![(0..40).map(|i| 100.0 + i as f64).collect()];
        let sel = select_delta(&f, &obs, &[0], &LmOptions::default()).unwrap();
        assert_eq!(sel.delta, 0);
        assert!(select_delta(&f, &obs, &[], &LmOptions::default()).is_err());
    }
}
