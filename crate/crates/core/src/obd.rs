//! OBD telemetry data model: CSV ingest and export, uniform resampling and
//! route-stratified train/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical attribute names. The six physics inputs and the target use the
/// CSV column names; extras keep whatever name the export used.
pub mod attr {
    pub const INTAKE_AIR: &str = "intake_air_kgph";
    pub const FUEL_RATE: &str = "fuel_kgph";
    pub const RAIL_PRESSURE: &str = "rail_pressure_pa";
    pub const INTAKE_PRESSURE: &str = "intake_pressure_pa";
    pub const INTAKE_TEMP: &str = "intake_temp_k";
    pub const ENGINE_SPEED: &str = "engine_rpm";
    pub const NOX: &str = "nox_ppm";

    pub const ENG_TORQUE: &str = "EngTq";
    pub const EGR_FLOW: &str = "EGRkgph";
    /// Alias for [`ENGINE_SPEED`] used by OBD exports.
    pub const ENG_RPM: &str = "EngRPM";

    pub const PHYSICS: [&str; 6] = [
        INTAKE_AIR,
        FUEL_RATE,
        RAIL_PRESSURE,
        INTAKE_PRESSURE,
        INTAKE_TEMP,
        ENGINE_SPEED,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObdRecord {
    /// Seconds from run start.
    pub t: f64,
    pub intake_air_flow: f64,
    pub fuel_rate: f64,
    pub rail_pressure: f64,
    pub intake_pressure: f64,
    pub intake_temp: f64,
    pub engine_speed: f64,
    pub nox_observed: f64,
    /// Non-physics attributes. A missing key means the value was absent.
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
}

impl ObdRecord {
    /// Checks the finiteness and positivity invariants.
    pub fn is_valid(&self) -> bool {
        let finite = [
            self.t,
            self.intake_air_flow,
            self.fuel_rate,
            self.rail_pressure,
            self.intake_pressure,
            self.intake_temp,
            self.engine_speed,
            self.nox_observed,
        ]
        .iter()
        .all(|v| v.is_finite());
        finite
            && self.engine_speed >= 0.0
            && self.intake_temp > 0.0
            && self.rail_pressure > 0.0
            && self.intake_pressure > 0.0
    }

    /// Looks up an attribute by name. Physics inputs and the target resolve
    /// to their fields; anything else is read from `extras`.
    pub fn value(&self, name: &str) -> Option<f64> {
        match name {
            attr::INTAKE_AIR => Some(self.intake_air_flow),
            attr::FUEL_RATE => Some(self.fuel_rate),
            attr::RAIL_PRESSURE => Some(self.rail_pressure),
            attr::INTAKE_PRESSURE => Some(self.intake_pressure),
            attr::INTAKE_TEMP => Some(self.intake_temp),
            attr::ENGINE_SPEED | attr::ENG_RPM => Some(self.engine_speed),
            attr::NOX => Some(self.nox_observed),
            other => self.extras.get(other).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub run_id: String,
    pub route_id: String,
    pub records: Vec<ObdRecord>,
}

impl Run {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObdDataset {
    pub runs: Vec<Run>,
    /// Seconds between consecutive samples.
    pub sample_period: f64,
    /// Declared extra attribute columns, in export order.
    pub extra_columns: Vec<String>,
}

impl ObdDataset {
    pub fn n_records(&self) -> usize {
        self.runs.iter().map(Run::len).sum()
    }

    pub fn run(&self, run_id: &str) -> Option<&Run> {
        self.runs.iter().find(|r| r.run_id == run_id)
    }

    /// Observed NOx per run, converted to the requested scalar type.
    pub fn nox_series<T: crate::Scalar>(&self) -> Vec<Vec<T>> {
        self.runs
            .iter()
            .map(|r| r.records.iter().map(|x| T::of(x.nox_observed)).collect())
            .collect()
    }

    /// True when at least one record carries a value for `name`.
    pub fn has_attribute(&self, name: &str) -> bool {
        self.runs
            .iter()
            .flat_map(|r| r.records.iter())
            .any(|rec| rec.value(name).is_some())
    }

    /// Sub-dataset with the listed runs, in this dataset's order.
    pub fn subset(&self, run_ids: &BTreeSet<String>) -> ObdDataset {
        ObdDataset {
            runs: self
                .runs
                .iter()
                .filter(|r| run_ids.contains(&r.run_id))
                .cloned()
                .collect(),
            sample_period: self.sample_period,
            extra_columns: self.extra_columns.clone(),
        }
    }

    /// Verifies unique run ids and uniform strictly increasing timestamps.
    pub fn check_uniform(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let tol = 1e-9 * self.sample_period.max(1.0);
        for run in &self.runs {
            if !seen.insert(run.run_id.as_str()) {
                return Err(Error::Config(format!("duplicate run id `{}`", run.run_id)));
            }
            for w in run.records.windows(2) {
                let dt = w[1].t - w[0].t;
                if (dt - self.sample_period).abs() > tol {
                    return Err(Error::Config(format!(
                        "run `{}` has spacing {dt} at t={}, expected {}",
                        run.run_id, w[0].t, self.sample_period
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Maps dataset attributes onto CSV column names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub run_id: String,
    pub route_id: String,
    pub t: String,
    pub intake_air_flow: String,
    pub fuel_rate: String,
    pub rail_pressure: String,
    pub intake_pressure: String,
    pub intake_temp: String,
    pub engine_speed: String,
    pub nox_observed: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            run_id: "run_id".into(),
            route_id: "route_id".into(),
            t: "t_s".into(),
            intake_air_flow: attr::INTAKE_AIR.into(),
            fuel_rate: attr::FUEL_RATE.into(),
            rail_pressure: attr::RAIL_PRESSURE.into(),
            intake_pressure: attr::INTAKE_PRESSURE.into(),
            intake_temp: attr::INTAKE_TEMP.into(),
            engine_speed: attr::ENGINE_SPEED.into(),
            nox_observed: attr::NOX.into(),
        }
    }
}

impl CsvSchema {
    fn mandatory(&self) -> [&str; 10] {
        [
            &self.run_id,
            &self.route_id,
            &self.t,
            &self.intake_air_flow,
            &self.fuel_rate,
            &self.rail_pressure,
            &self.intake_pressure,
            &self.intake_temp,
            &self.engine_speed,
            &self.nox_observed,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub runs: usize,
    pub per_run_counts: BTreeMap<String, usize>,
}

/// Reads a header-first CSV export into a dataset.
///
/// Rows with an unparseable or invalid physics attribute, target or
/// timestamp are dropped and counted. Extra columns are kept by name; an
/// empty or non-finite extra cell is recorded as absent. Runs keep the
/// order in which their ids first appear, records are sorted by time, and
/// repeated timestamps within a run keep the first row.
pub fn parse_csv<R: Read>(source: R, schema: &CsvSchema) -> Result<(ObdDataset, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyDataset("no header row".into()));
    }
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let [run_c, route_c, t_c, air_c, fuel_c, rail_c, inp_c, temp_c, rpm_c, nox_c] = {
        let names = schema.mandatory();
        let mut idx = [0usize; 10];
        for (slot, name) in idx.iter_mut().zip(names) {
            *slot = column(name)?;
        }
        idx
    };
    let mandatory: BTreeSet<usize> = [run_c, route_c, t_c, air_c, fuel_c, rail_c, inp_c, temp_c, rpm_c, nox_c]
        .into_iter()
        .collect();
    let extra_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !mandatory.contains(i))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, (String, Vec<ObdRecord>)> = HashMap::new();
    let mut report = IngestReport::default();

    for row in reader.records() {
        let row = row?;
        report.rows_read += 1;
        let num = |c: usize| row.get(c).and_then(|s| s.parse::<f64>().ok());
        let run_id = row.get(run_c).unwrap_or("").to_string();
        let route_id = row.get(route_c).unwrap_or("").to_string();
        let parsed = (|| {
            Some(ObdRecord {
                t: num(t_c)?,
                intake_air_flow: num(air_c)?,
                fuel_rate: num(fuel_c)?,
                rail_pressure: num(rail_c)?,
                intake_pressure: num(inp_c)?,
                intake_temp: num(temp_c)?,
                engine_speed: num(rpm_c)?,
                nox_observed: num(nox_c)?,
                extras: extra_cols
                    .iter()
                    .filter_map(|(c, name)| num(*c).filter(|v| v.is_finite()).map(|v| (name.clone(), v)))
                    .collect(),
            })
        })();
        match parsed {
            Some(rec) if rec.is_valid() && !run_id.is_empty() => {
                let entry = grouped.entry(run_id.clone()).or_insert_with(|| {
                    order.push(run_id.clone());
                    (route_id, Vec::new())
                });
                entry.1.push(rec);
            }
            _ => report.rows_dropped += 1,
        }
    }
    if report.rows_read == 0 {
        return Err(Error::EmptyDataset("no data rows".into()));
    }

    let mut runs = Vec::with_capacity(order.len());
    for run_id in order {
        let (route_id, mut records) = grouped.remove(&run_id).expect("grouped by id");
        records.sort_by(|a, b| a.t.total_cmp(&b.t));
        let before = records.len();
        records.dedup_by(|later, earlier| later.t == earlier.t);
        report.rows_dropped += before - records.len();
        report.per_run_counts.insert(run_id.clone(), records.len());
        runs.push(Run {
            run_id,
            route_id,
            records,
        });
    }
    if runs.is_empty() {
        return Err(Error::EmptyDataset("every row was dropped".into()));
    }
    report.runs = runs.len();
    let dataset = ObdDataset {
        runs,
        sample_period: 1.0,
        extra_columns: extra_cols.into_iter().map(|(_, n)| n).collect(),
    };
    Ok((dataset, report))
}

/// Writes the dataset in the standard column layout. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(dataset: &ObdDataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<&str> = vec!["run_id", "route_id", "t_s"];
    header.extend(attr::PHYSICS);
    header.push(attr::NOX);
    header.extend(dataset.extra_columns.iter().map(String::as_str));
    w.write_record(&header)?;
    for run in &dataset.runs {
        for rec in &run.records {
            let mut row = vec![
                run.run_id.clone(),
                run.route_id.clone(),
                rec.t.to_string(),
                rec.intake_air_flow.to_string(),
                rec.fuel_rate.to_string(),
                rec.rail_pressure.to_string(),
                rec.intake_pressure.to_string(),
                rec.intake_temp.to_string(),
                rec.engine_speed.to_string(),
                rec.nox_observed.to_string(),
            ];
            row.extend(
                dataset
                    .extra_columns
                    .iter()
                    .map(|c| rec.extras.get(c).map(f64::to_string).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv sink>", e))?;
    Ok(())
}

/// Re-grids every run onto a constant `period` by zero-order hold.
///
/// A gap longer than five periods between consecutive records splits the
/// run; the pieces after the first get `~1`, `~2`, ... appended to the id.
/// Runs with fewer than two records pass through unchanged.
pub fn resample_uniform(dataset: &ObdDataset, period: f64) -> Result<ObdDataset> {
    if !(period > 0.0 && period.is_finite()) {
        return Err(Error::Config(format!("resample period must be > 0, got {period}")));
    }
    let gap = 5.0 * period;
    let tol = 1e-9 * period;
    let mut runs = Vec::new();
    for run in &dataset.runs {
        if run.records.len() < 2 {
            runs.push(run.clone());
            continue;
        }
        let mut segments: Vec<&[ObdRecord]> = Vec::new();
        let mut start = 0;
        for i in 1..run.records.len() {
            if run.records[i].t - run.records[i - 1].t > gap {
                segments.push(&run.records[start..i]);
                start = i;
            }
        }
        segments.push(&run.records[start..]);

        for (seg_idx, seg) in segments.into_iter().enumerate() {
            let t0 = seg[0].t;
            let span = seg[seg.len() - 1].t - t0;
            let steps = ((span + tol) / period).floor() as usize;
            let mut out = Vec::with_capacity(steps + 1);
            let mut src = 0;
            for i in 0..=steps {
                let t = t0 + i as f64 * period;
                while src + 1 < seg.len() && seg[src + 1].t <= t + tol {
                    src += 1;
                }
                let mut rec = seg[src].clone();
                rec.t = t;
                out.push(rec);
            }
            let run_id = if seg_idx == 0 {
                run.run_id.clone()
            } else {
                format!("{}~{}", run.run_id, seg_idx)
            };
            runs.push(Run {
                run_id,
                route_id: run.route_id.clone(),
                records: out,
            });
        }
    }
    Ok(ObdDataset {
        runs,
        sample_period: period,
        extra_columns: dataset.extra_columns.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_run_ids: BTreeSet<String>,
    pub test_run_ids: BTreeSet<String>,
}

/// Route-stratified split.
///
/// Runs of each route are shuffled with `seed` and dealt alternately to
/// train and test. Each route starts on whichever side is currently
/// smaller, so the overall counts stay within one of each other. A route
/// with a single run goes to train.
pub fn split_train_test(dataset: &ObdDataset, seed: u64) -> Result<SplitSpec> {
    if dataset.runs.len() < 2 {
        return Err(Error::Config(format!(
            "train/test split needs at least 2 runs, dataset has {}",
            dataset.runs.len()
        )));
    }
    let mut by_route: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for run in &dataset.runs {
        by_route
            .entry(run.route_id.as_str())
            .or_default()
            .push(run.run_id.as_str());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for (route, mut ids) in by_route {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        if ids.len() == 1 {
            warn!("route `{route}` has a single run; assigning it to train");
            train.insert(ids[0].to_string());
            continue;
        }
        let mut to_train = train.len() <= test.len();
        for id in ids {
            if to_train {
                train.insert(id.to_string());
            } else {
                test.insert(id.to_string());
            }
            to_train = !to_train;
        }
    }
    Ok(SplitSpec {
        train_run_ids: train,
        test_run_ids: test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64, fuel: f64) -> ObdRecord {
        ObdRecord {
            t,
            intake_air_flow: 400.0,
            fuel_rate: fuel,
            rail_pressure: 1.2e8,
            intake_pressure: 2.0e5,
            intake_temp: 320.0,
            engine_speed: 1400.0,
            nox_observed: 250.0,
            extras: BTreeMap::new(),
        }
    }

    const HEADER: &str = "run_id,route_id,t_s,intake_air_kgph,fuel_kgph,rail_pressure_pa,\
intake_pressure_pa,intake_temp_k,engine_rpm,nox_ppm,EngTq\n";

    #[test]
    fn parses_well_formed_file() {
        let body = format!(
            "{HEADER}r1,A,0,400,20,1.2e8,2e5,320,1400,250,800\n\
             r1,A,1,401,21,1.2e8,2e5,320,1410,260,\n\
             r1,A,2,402,22,1.2e8,2e5,320,1420,270,820\n"
        );
        let (ds, report) = parse_csv(body.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.runs.len(), 1);
        assert_eq!(ds.runs[0].records.len(), 3);
        assert_eq!(report.rows_dropped, 0);
        assert_eq!(ds.extra_columns, vec!["EngTq".to_string()]);
        assert_eq!(ds.runs[0].records[0].extras.get("EngTq"), Some(&800.0));
        // empty extra cell is absent, not zero
        assert!(!ds.runs[0].records[1].extras.contains_key("EngTq"));
    }

    #[test]
    fn drops_nan_rows() {
        let body = format!(
            "{HEADER}r1,A,0,400,20,1.2e8,2e5,320,1400,250,800\n\
             r1,A,1,401,NaN,1.2e8,2e5,320,1410,260,810\n\
             r1,A,2,402,22,1.2e8,2e5,320,1420,270,820\n"
        );
        let (ds, report) = parse_csv(body.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.runs[0].records.len(), 2);
        assert_eq!(report.rows_dropped, 1);
        assert_eq!(report.rows_read, 3);
        assert_eq!(report.per_run_counts["r1"], 2);
    }

    #[test]
    fn missing_column_is_named() {
        let body = "run_id,route_id,t_s\nr1,A,0\n";
        match parse_csv(body.as_bytes(), &CsvSchema::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "intake_air_kgph"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(
            parse_csv("".as_bytes(), &CsvSchema::default()),
            Err(Error::EmptyDataset(_))
        ));
        assert!(matches!(
            parse_csv(HEADER.as_bytes(), &CsvSchema::default()),
            Err(Error::EmptyDataset(_))
        ));
    }

    fn one_run(times: &[f64]) -> ObdDataset {
        ObdDataset {
            runs: vec![Run {
                run_id: "r".into(),
                route_id: "A".into(),
                records: times.iter().map(|&t| rec(t, t + 10.0)).collect(),
            }],
            sample_period: 1.0,
            extra_columns: vec![],
        }
    }

    #[test]
    fn resample_identity_on_uniform() {
        let ds = one_run(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(resample_uniform(&ds, 1.0).unwrap(), ds);
    }

    #[test]
    fn resample_holds_previous_value() {
        let ds = one_run(&[0.0, 1.0, 3.0]);
        let out = resample_uniform(&ds, 1.0).unwrap();
        let recs = &out.runs[0].records;
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[2].t, 2.0);
        assert_eq!(recs[2].fuel_rate, recs[1].fuel_rate);
        assert_eq!(recs[3].fuel_rate, 13.0);
        out.check_uniform().unwrap();
    }

    #[test]
    fn resample_splits_on_long_gap() {
        let ds = one_run(&[0.0, 1.0, 2.0, 12.0, 13.0]);
        let out = resample_uniform(&ds, 1.0).unwrap();
        assert_eq!(out.runs.len(), 2);
        assert_eq!(out.runs[0].records.len(), 3);
        assert_eq!(out.runs[1].run_id, "r~1");
        assert_eq!(out.runs[1].records.len(), 2);
        out.check_uniform().unwrap();
    }

    #[test]
    fn resample_passes_short_runs() {
        let ds = one_run(&[5.0]);
        assert_eq!(resample_uniform(&ds, 1.0).unwrap().runs, ds.runs);
        assert!(resample_uniform(&ds, 0.0).is_err());
    }

    fn runs_over_routes(routes: &[usize]) -> ObdDataset {
        let mut runs = Vec::new();
        for (route, &count) in routes.iter().enumerate() {
            for i in 0..count {
                runs.push(Run {
                    run_id: format!("R{route}-{i}"),
                    route_id: format!("route{route}"),
                    records: vec![rec(0.0, 1.0)],
                });
            }
        }
        ObdDataset {
            runs,
            sample_period: 1.0,
            extra_columns: vec![],
        }
    }

    #[test]
    fn sixteen_runs_split_eight_eight() {
        let ds = runs_over_routes(&[6, 5, 5]);
        let split = split_train_test(&ds, 7).unwrap();
        assert_eq!(split.train_run_ids.len(), 8);
        assert_eq!(split.test_run_ids.len(), 8);
        for route in 0..3 {
            let p = format!("R{route}-");
            assert!(split.train_run_ids.iter().any(|r| r.starts_with(&p)));
            assert!(split.test_run_ids.iter().any(|r| r.starts_with(&p)));
        }
        assert_eq!(split, split_train_test(&ds, 7).unwrap());
    }

    #[test]
    fn two_runs_one_route() {
        let split = split_train_test(&runs_over_routes(&[2]), 1).unwrap();
        assert_eq!(split.train_run_ids.len(), 1);
        assert_eq!(split.test_run_ids.len(), 1);
        assert!(split_train_test(&runs_over_routes(&[1]), 1).is_err());
    }

    #[test]
    fn single_run_route_goes_to_train() {
        let split = split_train_test(&runs_over_routes(&[2, 1]), 3).unwrap();
        assert!(split.train_run_ids.contains("R1-0"));
    }
}
