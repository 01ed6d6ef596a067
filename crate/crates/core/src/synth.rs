//! Synthetic OBD runs with planted operating regimes.
//!
//! Regimes follow a Markov chain: at every step the current regime ends
//! with probability `1 / mean_dwell`, and the next one is drawn from its
//! transition row (self-transitions allowed). Attributes are drawn from
//! positive-truncated normals around the regime means, and NOx at `k + δ`
//! is the regime's power law evaluated on the features at `k`, plus noise.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obd::{attr, ObdDataset, ObdRecord, Run};
use crate::physics::{features_for_record, PhysicsConstants};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawTruth {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub name: String,
    pub params: PowerLawTruth,
    pub attribute_means: BTreeMap<String, f64>,
    #[serde(default)]
    pub attribute_stddevs: BTreeMap<String, f64>,
    /// Expected regime duration in seconds.
    pub mean_dwell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regimes: Vec<RegimeSpec>,
    /// Row-stochastic; row `i` gives the next regime when regime `i` ends.
    pub transition: Vec<Vec<f64>>,
    pub runs: usize,
    /// Samples per run.
    pub run_length: usize,
    /// ppm
    pub noise_stddev: f64,
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub delta: usize,
    #[serde(default = "one_f64")]
    pub sample_period: f64,
    #[serde(default = "three")]
    pub n_routes: usize,
    /// Percentage by which the generating physics constants deviate from
    /// `constants`; `None` generates with `constants` exactly.
    #[serde(default)]
    pub physics_mismatch: Option<f64>,
    #[serde(default)]
    pub constants: PhysicsConstants<f64>,
    /// Regime every run starts in; uniformly random when absent.
    #[serde(default)]
    pub initial_regime: Option<usize>,
}

fn one_usize() -> usize {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn three() -> usize {
    3
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.regimes.is_empty() {
            return bad("at least one regime is required".into());
        }
        if self.runs == 0 || self.run_length == 0 {
            return bad("runs and run_length must be >= 1".into());
        }
        if !(self.noise_stddev >= 0.0 && self.noise_stddev.is_finite()) {
            return bad(format!("noise_stddev must be >= 0, got {}", self.noise_stddev));
        }
        if !(self.sample_period > 0.0) || self.n_routes == 0 {
            return bad("sample_period must be > 0 and n_routes >= 1".into());
        }
        let n = self.regimes.len();
        if self.transition.len() != n || self.transition.iter().any(|row| row.len() != n) {
            return bad(format!("transition matrix must be {n}x{n}"));
        }
        for (i, row) in self.transition.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return bad(format!("transition row {i} is not a probability vector (sum {sum})"));
            }
        }
        for r in &self.regimes {
            if !(r.params.a > 0.0) || !r.params.b.is_finite() || !r.params.c.is_finite() {
                return bad(format!("regime `{}` needs a > 0 and finite exponents", r.name));
            }
            if !(r.mean_dwell >= 1.0) {
                return bad(format!("regime `{}` mean_dwell must be >= 1", r.name));
            }
            for a in attr::PHYSICS {
                match r.attribute_means.get(a) {
                    Some(m) if *m > 0.0 && m.is_finite() => {}
                    _ => return bad(format!("regime `{}` needs a positive mean for `{a}`", r.name)),
                }
            }
            if r.attribute_stddevs.values().any(|s| !(*s >= 0.0)) {
                return bad(format!("regime `{}` has a negative stddev", r.name));
            }
        }
        if let Some(r) = self.initial_regime {
            if r >= n {
                return bad(format!("initial_regime {r} is out of range for {n} regimes"));
            }
        }
        if let Some(p) = self.physics_mismatch {
            if !(p.abs() < 100.0) {
                return bad(format!("physics_mismatch must be within ±100%, got {p}"));
            }
        }
        self.constants.validate()
    }

    /// Constants used to generate NOx, including any mismatch.
    pub fn generating_constants(&self) -> PhysicsConstants<f64> {
        match self.physics_mismatch {
            Some(p) => self.constants.perturbed(p),
            None => self.constants.clone(),
        }
    }

    /// Per-step transition probabilities implied by the dwell times.
    pub fn step_transition(&self) -> Vec<Vec<f64>> {
        self.regimes
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let leave = 1.0 / r.mean_dwell;
                self.transition[i]
                    .iter()
                    .enumerate()
                    .map(|(j, p)| leave * p + if i == j { 1.0 - leave } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Four planted regimes with distinct emission laws and operating points.
    pub fn default_four_regime() -> Self {
        serde_json::from_str(DEFAULT_FOUR_REGIME).expect("bundled synthetic config parses")
    }
}

/// The bundled default, also shipped as `configs/synth_default.json`.
pub const DEFAULT_FOUR_REGIME: &str = include_str!("../../../configs/synth_default.json");

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: ObdDataset,
    /// Regime index per (run, timestep).
    pub labels: Vec<Vec<usize>>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    let dist = Normal::new(mean, sd).expect("stddev validated");
    for _ in 0..1000 {
        let v = dist.sample(rng);
        if v > 0.0 {
            return v;
        }
    }
    mean.abs().max(f64::MIN_POSITIVE)
}

fn pick(rng: &mut ChaCha8Rng, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let gen_constants = config.generating_constants();
    let mut extras: Vec<String> = config
        .regimes
        .iter()
        .flat_map(|r| r.attribute_means.keys())
        .filter(|k| !attr::PHYSICS.contains(&k.as_str()))
        .cloned()
        .collect();
    extras.sort();
    extras.dedup();

    let per_run: Vec<(Run, Vec<usize>)> = (0..config.runs)
        .into_par_iter()
        .map(|run_idx| generate_run(config, &gen_constants, &extras, run_idx))
        .collect();
    let (runs, labels) = per_run.into_iter().unzip();
    Ok(SynthOutput {
        dataset: ObdDataset {
            runs,
            sample_period: config.sample_period,
            extra_columns: extras,
        },
        labels,
    })
}

fn generate_run(
    config: &SynthConfig,
    constants: &PhysicsConstants<f64>,
    extras: &[String],
    run_idx: usize,
) -> (Run, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(run_idx as u64));
    let total = config.run_length + config.delta;
    let noise = (config.noise_stddev > 0.0).then(|| Normal::new(0.0, config.noise_stddev).expect("validated"));

    let mut regime = match config.initial_regime {
        Some(r) => r,
        None => rng.random_range(0..config.regimes.len()),
    };
    let mut regimes = Vec::with_capacity(total);
    let mut records: Vec<ObdRecord> = Vec::with_capacity(total);
    for i in 0..total {
        if i > 0 && rng.random::<f64>() < 1.0 / config.regimes[regime].mean_dwell {
            regime = pick(&mut rng, &config.transition[regime]);
        }
        let spec = &config.regimes[regime];
        let mut draw = |name: &str| -> Option<f64> {
            let mean = *spec.attribute_means.get(name)?;
            let sd = spec.attribute_stddevs.get(name).copied().unwrap_or(0.0);
            Some(truncated_normal(&mut rng, mean, sd))
        };
        let mut rec = ObdRecord {
            t: 0.0,
            intake_air_flow: draw(attr::INTAKE_AIR).expect("validated"),
            fuel_rate: draw(attr::FUEL_RATE).expect("validated"),
            rail_pressure: draw(attr::RAIL_PRESSURE).expect("validated"),
            intake_pressure: draw(attr::INTAKE_PRESSURE).expect("validated"),
            intake_temp: draw(attr::INTAKE_TEMP).expect("validated"),
            engine_speed: draw(attr::ENGINE_SPEED).expect("validated"),
            nox_observed: 0.0,
            extras: BTreeMap::new(),
        };
        for name in extras {
            if let Some(v) = draw(name) {
                rec.extras.insert(name.clone(), v);
            }
        }
        regimes.push(regime);
        records.push(rec);
    }

    let truth: Vec<f64> = records
        .iter()
        .zip(&regimes)
        .map(|(rec, &r)| {
            let f = features_for_record(rec, constants);
            let law = config.regimes[r].params;
            if f.valid {
                law.a * f.t_adiab.powf(law.b) * f.t_comb.powf(law.c)
            } else {
                0.0
            }
        })
        .collect();
    for i in config.delta..total {
        let eps = noise.map_or(0.0, |n| n.sample(&mut rng));
        records[i].nox_observed = truth[i - config.delta] + eps;
    }

    let emitted: Vec<ObdRecord> = records
        .into_iter()
        .skip(config.delta)
        .enumerate()
        .map(|(j, mut rec)| {
            rec.t = j as f64 * config.sample_period;
            rec
        })
        .collect();
    let run = Run {
        run_id: format!("run{:02}", run_idx + 1),
        route_id: format!("route{}", run_idx % config.n_routes + 1),
        records: emitted,
    };
    (run, regimes[config.delta..].to_vec())
}

/// CSV columns: t_s, run_id, regime.
pub fn write_labels_csv<W: Write>(out: &SynthOutput, config: &SynthConfig, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["t_s", "run_id", "regime"])?;
    for (run, labels) in out.dataset.runs.iter().zip(&out.labels) {
        for (rec, &r) in run.records.iter().zip(labels) {
            w.write_record([rec.t.to_string(), run.run_id.clone(), config.regimes[r].name.clone()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<labels sink>", e))?;
    Ok(())
}
