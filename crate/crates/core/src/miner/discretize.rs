use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obd::ObdDataset;

pub const N_LEVELS: usize = 11;

/// Discrete value level, `0..=10` from very low to high.
pub type Level = u8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeBins {
    /// `N_LEVELS + 1` strictly ascending edges spanning the training range.
    pub edges: Vec<f64>,
    /// Set when training saw a single distinct value; every value maps to 0.
    pub constant: bool,
}

impl AttributeBins {
    fn fit(min: f64, max: f64) -> Self {
        if max > min {
            let width = (max - min) / N_LEVELS as f64;
            let mut edges: Vec<f64> = (0..N_LEVELS).map(|i| min + width * i as f64).collect();
            edges.push(max);
            AttributeBins { edges, constant: false }
        } else {
            AttributeBins {
                edges: (0..=N_LEVELS).map(|i| min + i as f64).collect(),
                constant: true,
            }
        }
    }

    /// Equal-width bin index, clamped to `0..=10`.
    pub fn level(&self, v: f64) -> Option<Level> {
        if !v.is_finite() {
            return None;
        }
        if self.constant {
            return Some(0);
        }
        let min = self.edges[0];
        let max = self.edges[N_LEVELS];
        let idx = ((v - min) / (max - min) * N_LEVELS as f64).floor();
        Some(idx.clamp(0.0, (N_LEVELS - 1) as f64) as Level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub attributes: BTreeMap<String, AttributeBins>,
}

impl Discretizer {
    pub fn level(&self, attribute: &str, v: f64) -> Option<Level> {
        self.attributes.get(attribute)?.level(v)
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.attributes.keys().cloned().collect()
    }
}

/// Eleven equal-width bins per attribute over its training min/max.
pub fn fit_discretizer(train: &ObdDataset, attributes: &[String]) -> Result<Discretizer> {
    let mut out = BTreeMap::new();
    for name in attributes {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for rec in train.runs.iter().flat_map(|r| &r.records) {
            if let Some(v) = rec.value(name).filter(|v| v.is_finite()) {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if min > max {
            return Err(Error::MissingAttribute(name.clone()));
        }
        out.insert(name.clone(), AttributeBins::fit(min, max));
    }
    Ok(Discretizer { attributes: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSymbols {
    pub run_id: String,
    /// `levels[attribute][k]`
    pub levels: Vec<Vec<Option<Level>>>,
}

impl RunSymbols {
    pub fn len(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Level per (attribute, run, timestep). Attributes are in discretizer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolTable {
    pub attributes: Vec<String>,
    pub runs: Vec<RunSymbols>,
}

impl SymbolTable {
    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }
}

pub fn symbolize(dataset: &ObdDataset, discretizer: &Discretizer) -> SymbolTable {
    let attributes = discretizer.attribute_names();
    let runs = dataset
        .runs
        .iter()
        .map(|run| RunSymbols {
            run_id: run.run_id.clone(),
            levels: attributes
                .iter()
                .map(|a| {
                    let bins = &discretizer.attributes[a];
                    run.records
                        .iter()
                        .map(|rec| rec.value(a).and_then(|v| bins.level(v)))
                        .collect()
                })
                .collect(),
        })
        .collect();
    SymbolTable { attributes, runs }
}
