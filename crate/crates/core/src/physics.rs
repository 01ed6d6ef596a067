//! Low-order combustion features and the phenomenological LOP predictor.
//!
//! Per timestep the six engine attributes give the adiabatic flame
//! temperature, the combustion (injection) duration and the intake oxygen
//! fraction. The constants below are stand-ins for a calibrated engine
//! model and can all be overridden from JSON.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obd::{attr, ObdDataset, ObdRecord};
use crate::scalar::{lit, Scalar};
use crate::series::Series;

/// Timesteps below this engine speed carry no combustion events.
pub const MIN_ENGINE_SPEED_RPM: f64 = 100.0;

/// Reference O2 mole fraction of undiluted air.
const AIR_O2_FRACTION: f64 = 0.21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConstants<T = f64> {
    pub compression_ratio: T,
    pub gamma: T,
    /// J/kg
    pub lhv_fuel: T,
    /// J/(kg K)
    pub cp_charge: T,
    pub afr_stoich: T,
    pub n_cylinders: T,
    /// m^2, all nozzle holes of one injector
    pub nozzle_area_total: T,
    pub discharge_coeff: T,
    /// kg/m^3
    pub fuel_density: T,
    pub ambient_o2_fraction: T,
    /// Floor on rail minus intake pressure, same unit as the pressures.
    pub pressure_floor: T,
}

impl<T: Scalar> Default for PhysicsConstants<T> {
    fn default() -> Self {
        PhysicsConstants {
            compression_ratio: lit(17.0),
            gamma: lit(1.35),
            lhv_fuel: lit(42.8e6),
            cp_charge: lit(1200.0),
            afr_stoich: lit(14.5),
            n_cylinders: lit(6.0),
            nozzle_area_total: lit(1.0e-7),
            discharge_coeff: lit(0.70),
            fuel_density: lit(840.0),
            ambient_o2_fraction: lit(0.21),
            pressure_floor: lit(1.0e4),
        }
    }
}

impl<T: Scalar> PhysicsConstants<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("compression_ratio", self.compression_ratio),
            ("gamma", self.gamma),
            ("lhv_fuel", self.lhv_fuel),
            ("cp_charge", self.cp_charge),
            ("afr_stoich", self.afr_stoich),
            ("n_cylinders", self.n_cylinders),
            ("nozzle_area_total", self.nozzle_area_total),
            ("discharge_coeff", self.discharge_coeff),
            ("fuel_density", self.fuel_density),
            ("ambient_o2_fraction", self.ambient_o2_fraction),
            ("pressure_floor", self.pressure_floor),
        ];
        for (name, v) in positive {
            if !(v > T::zero() && v.is_finite()) {
                return Err(Error::Config(format!("physics constant {name} must be > 0, got {v}")));
            }
        }
        if self.gamma <= T::one() {
            return Err(Error::Config(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        if self.ambient_o2_fraction > lit(AIR_O2_FRACTION) {
            return Err(Error::Config(format!(
                "ambient_o2_fraction must be <= 0.21, got {}",
                self.ambient_o2_fraction
            )));
        }
        Ok(())
    }

    /// Copy with every model constant scaled by `1 ± pct/100`, used to
    /// emulate a mismatch between the generating and the fitted physics.
    pub fn perturbed(&self, pct: f64) -> Self {
        let up = T::one() + lit(pct / 100.0);
        let down = T::one() - lit(pct / 100.0);
        PhysicsConstants {
            compression_ratio: self.compression_ratio * up,
            lhv_fuel: self.lhv_fuel * down,
            cp_charge: self.cp_charge * up,
            nozzle_area_total: self.nozzle_area_total * down,
            discharge_coeff: self.discharge_coeff * up,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStep<T = f64> {
    /// K
    pub t_adiab: T,
    /// s
    pub t_comb: T,
    pub x_o2: T,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeries<T = f64> {
    pub run_id: String,
    pub steps: Vec<FeatureStep<T>>,
}

impl<T> FeatureSeries<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Compressed-charge temperature before combustion.
pub fn compression_temperature<T: Scalar>(intake_temp: T, c: &PhysicsConstants<T>) -> T {
    intake_temp * c.compression_ratio.powf(c.gamma - T::one())
}

/// Fuel mass delivered per injection event, kg.
pub fn fuel_per_injection<T: Scalar>(fuel_rate_kgph: T, engine_speed_rpm: T, c: &PhysicsConstants<T>) -> T {
    let cycles_per_s = engine_speed_rpm / lit(120.0);
    (fuel_rate_kgph / lit(3600.0)) / (cycles_per_s * c.n_cylinders)
}

/// Features for a single record. Intake oxygen is diluted by the `EGRkgph`
/// extra when the record carries one.
pub fn features_for_record<T: Scalar>(rec: &ObdRecord, c: &PhysicsConstants<T>) -> FeatureStep<T> {
    let air = T::of(rec.intake_air_flow);
    let fuel = T::of(rec.fuel_rate);
    let rail = T::of(rec.rail_pressure);
    let intake_p = T::of(rec.intake_pressure);
    let intake_t = T::of(rec.intake_temp);
    let rpm = T::of(rec.engine_speed);

    let m_fuel = fuel_per_injection(fuel, rpm, c);
    let dp = (rail - intake_p).max(c.pressure_floor);
    let mdot_inj = c.discharge_coeff * c.nozzle_area_total * (lit::<T>(2.0) * c.fuel_density * dp).sqrt();
    let t_comb = m_fuel / mdot_inj;

    let x_o2 = match rec.extras.get(attr::EGR_FLOW) {
        Some(&egr) => {
            let total = air + T::of(egr);
            if total > T::zero() {
                c.ambient_o2_fraction * air / total
            } else {
                c.ambient_o2_fraction
            }
        }
        None => c.ambient_o2_fraction,
    };

    let t_comp = compression_temperature(intake_t, c);
    let heat_rise = c.lhv_fuel / (c.cp_charge * (T::one() + c.afr_stoich));
    let t_adiab = t_comp + heat_rise * (x_o2 / lit(AIR_O2_FRACTION));

    let valid = rpm >= lit(MIN_ENGINE_SPEED_RPM)
        && t_adiab.is_finite()
        && t_adiab > T::zero()
        && t_comb.is_finite()
        && t_comb > T::zero()
        && x_o2 > T::zero()
        && x_o2 <= lit(AIR_O2_FRACTION);
    FeatureStep {
        t_adiab,
        t_comb,
        x_o2,
        valid,
    }
}

pub fn compute_features<T: Scalar>(dataset: &ObdDataset, constants: &PhysicsConstants<T>) -> Vec<FeatureSeries<T>> {
    dataset
        .runs
        .iter()
        .map(|run| FeatureSeries {
            run_id: run.run_id.clone(),
            steps: run.records.iter().map(|r| features_for_record(r, constants)).collect(),
        })
        .collect()
}

/// CSV columns: t_s, run_id, t_adiab_k, t_comb_s, x_o2, valid.
pub fn write_features_csv<T: Scalar, W: Write>(
    dataset: &ObdDataset,
    features: &[FeatureSeries<T>],
    sink: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["t_s", "run_id", "t_adiab_k", "t_comb_s", "x_o2", "valid"])?;
    for (run, fs) in dataset.runs.iter().zip(features) {
        for (rec, f) in run.records.iter().zip(&fs.steps) {
            w.write_record([
                rec.t.to_string(),
                run.run_id.clone(),
                f.t_adiab.to_string(),
                f.t_comb.to_string(),
                f.x_o2.to_string(),
                f.valid.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<features sink>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LopParams<T = f64> {
    /// ppm
    pub amplitude: T,
    pub o2_exponent: T,
    pub tcomb_exponent: T,
    /// K
    pub activation_temp: T,
}

impl<T: Scalar> Default for LopParams<T> {
    fn default() -> Self {
        LopParams {
            amplitude: T::one(),
            o2_exponent: T::one(),
            tcomb_exponent: lit(0.5),
            activation_temp: lit(38000.0),
        }
    }
}

impl<T: Scalar> LopParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > T::zero()) || !(self.activation_temp > T::zero()) {
            return Err(Error::Config("LOP amplitude and activation_temp must be > 0".into()));
        }
        if !self.o2_exponent.is_finite() || !self.tcomb_exponent.is_finite() {
            return Err(Error::Config("LOP exponents must be finite".into()));
        }
        Ok(())
    }

    fn shape(&self, f: &FeatureStep<T>) -> T {
        f.x_o2.powf(self.o2_exponent) * f.t_comb.powf(self.tcomb_exponent) * (-self.activation_temp / f.t_adiab).exp()
    }

    pub fn predict_step(&self, f: &FeatureStep<T>) -> Option<T> {
        f.valid.then(|| self.amplitude * self.shape(f))
    }
}

/// LOP prediction at each timestep, absent where the features are invalid.
pub fn lop_predict<T: Scalar>(features: &[FeatureSeries<T>], params: &LopParams<T>) -> Series<T> {
    features
        .iter()
        .map(|fs| fs.steps.iter().map(|f| params.predict_step(f)).collect())
        .collect()
}

/// Least-squares amplitude with the exponents and activation temperature
/// held at the values in `template`.
pub fn calibrate_lop<T: Scalar>(
    features: &[FeatureSeries<T>],
    observed: &[Vec<T>],
    template: &LopParams<T>,
) -> Result<LopParams<T>> {
    let mut num = T::zero();
    let mut den = T::zero();
    let mut n = 0usize;
    for (fs, obs) in features.iter().zip(observed) {
        for (f, &y) in fs.steps.iter().zip(obs) {
            if !f.valid {
                continue;
            }
            let g = template.shape(f);
            num += y * g;
            den += g * g;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Calibration("no valid timesteps to calibrate LOP on".into()));
    }
    if n < 10 {
        return Err(Error::Calibration(format!(
            "LOP calibration needs at least 10 valid timesteps, got {n}"
        )));
    }
    if !(den > T::zero()) {
        return Err(Error::Calibration(
            "LOP shape underflows to zero on every timestep".into(),
        ));
    }
    let mut amplitude = num / den;
    if !(amplitude > T::zero()) {
        warn!("calibrated LOP amplitude {amplitude} is not positive; clamping");
        amplitude = T::min_positive_value();
    }
    Ok(LopParams {
        amplitude,
        ..template.clone()
    })
}
