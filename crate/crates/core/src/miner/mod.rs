//! Co-occurrence patterns: per-attribute level sequences that keep showing
//! up together inside divergent windows.
//!
//! Attributes are discretized into eleven levels. A pattern maps each of up
//! to `max_attributes` attributes to an exact sequence of `L` levels and
//! occurs in a window when every attribute's levels in that window equal
//! its sequence. Support counts divergent windows containing the pattern
//! over all stride-1 windows; the cross-K ratio compares how dense the
//! pattern is among divergent windows with how dense it is overall.

mod discretize;
mod mine;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::divergence::DivergentWindow;
use crate::error::{Error, Result};
use crate::obd::attr;

pub use discretize::{
    fit_discretizer, symbolize, AttributeBins, Discretizer, Level, RunSymbols, SymbolTable, N_LEVELS,
};
pub use mine::{mine_patterns, WindowIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    pub min_supp: f64,
    pub epsilon: f64,
    pub max_attributes: usize,
    pub mining_attributes: Vec<String>,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            min_supp: 0.003,
            epsilon: 2.0,
            max_attributes: 3,
            mining_attributes: [
                attr::ENG_TORQUE,
                attr::ENG_RPM,
                attr::EGR_FLOW,
                attr::INTAKE_AIR,
                attr::FUEL_RATE,
                attr::RAIL_PRESSURE,
                attr::INTAKE_PRESSURE,
                attr::INTAKE_TEMP,
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_supp > 0.0 && self.min_supp <= 1.0) {
            return Err(Error::Config(format!(
                "min_supp must lie in (0, 1], got {}",
                self.min_supp
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_attributes == 0 {
            return Err(Error::Config("max_attributes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrencePattern {
    pub items: BTreeMap<String, Vec<Level>>,
    pub support: f64,
    pub cross_k_ratio: f64,
    /// Divergent windows containing the pattern.
    #[serde(rename = "occurrences")]
    pub occurrence_count: usize,
    /// Free-text annotation for a human reviewer; never filled by the miner.
    #[serde(default)]
    pub scenario_label: Option<String>,
}

impl CoOccurrencePattern {
    /// Rank order: cross-K ratio descending, support descending, then the
    /// items lexicographically.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .cross_k_ratio
            .total_cmp(&self.cross_k_ratio)
            .then_with(|| other.support.total_cmp(&self.support))
            .then_with(|| self.items.iter().cmp(other.items.iter()))
    }

    /// True when `self` contains every item of `other` with equal sequences.
    pub fn extends(&self, other: &Self) -> bool {
        other.items.iter().all(|(a, seq)| self.items.get(a) == Some(seq))
    }

    /// Resolves item attributes to column indices in `symbols`.
    pub fn resolve(&self, symbols: &SymbolTable) -> Result<Vec<(usize, &[Level])>> {
        self.items
            .iter()
            .map(|(a, seq)| {
                symbols
                    .attribute_index(a)
                    .map(|i| (i, seq.as_slice()))
                    .ok_or_else(|| Error::MissingAttribute(a.clone()))
            })
            .collect()
    }
}

/// True when every item's levels over `[end + 1 − L, end]` equal its sequence.
pub(crate) fn matches_at(run: &RunSymbols, items: &[(usize, &[Level])], end: usize) -> bool {
    items.iter().all(|(attr, seq)| {
        let l = seq.len();
        if end + 1 < l {
            return false;
        }
        let col = &run.levels[*attr];
        col[end + 1 - l..=end]
            .iter()
            .zip(seq.iter())
            .all(|(got, want)| *got == Some(*want))
    })
}

/// `(D_P / D) / (W_P / W)`; zero when the pattern never occurs.
///
/// Evaluated as `(D_P · W) / (D · W_P)` with exact integer products and a
/// single rounding, so patterns with equal ratios compare equal.
pub fn density_ratio(dp: usize, d: usize, wp: usize, w: usize) -> f64 {
    if wp == 0 || d == 0 {
        return 0.0;
    }
    let num = dp as u128 * w as u128;
    let den = d as u128 * wp as u128;
    num as f64 / den as f64
}

/// Cross-K ratio by direct scan of every window of the pattern's length.
pub fn cross_k_ratio<T>(
    pattern: &CoOccurrencePattern,
    symbols: &SymbolTable,
    divergent_windows: &[DivergentWindow<T>],
) -> Result<f64> {
    if divergent_windows.is_empty() {
        return Err(Error::Miner("cross-K ratio needs at least one divergent window".into()));
    }
    let items = pattern.resolve(symbols)?;
    let l = items
        .first()
        .map(|(_, s)| s.len())
        .ok_or_else(|| Error::Miner("pattern has no items".into()))?;
    if items.iter().any(|(_, s)| s.len() != l) || l == 0 {
        return Err(Error::Miner("pattern sequences must share one nonzero length".into()));
    }
    let (mut w, mut wp) = (0usize, 0usize);
    for run in &symbols.runs {
        for end in l.saturating_sub(1)..run.len() {
            w += 1;
            wp += usize::from(matches_at(run, &items, end));
        }
    }
    let mut dp = 0;
    for win in divergent_windows {
        let run = symbols
            .runs
            .get(win.run)
            .ok_or_else(|| Error::Miner(format!("window refers to missing run {}", win.run)))?;
        dp += usize::from(matches_at(run, &items, win.end));
    }
    Ok(density_ratio(dp, divergent_windows.len(), wp, w))
}

/// Sorts into rank order in place.
pub fn sort_patterns(patterns: &mut [CoOccurrencePattern]) {
    patterns.sort_by(CoOccurrencePattern::rank_cmp);
}

/// First `n` patterns in rank order, skipping any pattern that merely
/// extends an already selected one.
pub fn select_top_n(patterns: &[CoOccurrencePattern], n: usize) -> Vec<CoOccurrencePattern> {
    let mut pool = patterns.to_vec();
    sort_patterns(&mut pool);
    let mut chosen: Vec<CoOccurrencePattern> = Vec::with_capacity(n);
    for p in pool {
        if chosen.len() == n {
            break;
        }
        if chosen.iter().any(|s| p.extends(s)) {
            continue;
        }
        chosen.push(p);
    }
    if chosen.len() < n {
        warn!("requested {n} patterns but only {} are available", chosen.len());
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pat(items: &[(&str, &[Level])], ratio: f64, support: f64) -> CoOccurrencePattern {
        CoOccurrencePattern {
            items: items.iter().map(|(a, s)| (a.to_string(), s.to_vec())).collect(),
            support,
            cross_k_ratio: ratio,
            occurrence_count: 1,
            scenario_label: None,
        }
    }

    #[test]
    fn rank_order_is_total() {
        let mut v = vec![
            pat(&[("B", &[1, 1])], 3.0, 0.1),
            pat(&[("A", &[1, 1])], 3.0, 0.1),
            pat(&[("C", &[1, 1])], 3.0, 0.2),
            pat(&[("D", &[1, 1])], 5.0, 0.01),
        ];
        sort_patterns(&mut v);
        let names: Vec<&str> = v.iter().map(|p| p.items.keys().next().unwrap().as_str()).collect();
        assert_eq!(names, vec!["D", "C", "A", "B"]);
    }

    #[test]
    fn top_n_edges() {
        let v = vec![pat(&[("A", &[1])], 3.0, 0.1), pat(&[("B", &[1])], 2.0, 0.1)];
        assert!(select_top_n(&v, 0).is_empty());
        assert_eq!(select_top_n(&v, 10).len(), 2);
    }

    #[test]
    fn top_n_drops_extensions_of_selected() {
        let v = vec![
            pat(&[("A", &[1, 2])], 4.0, 0.1),
            pat(&[("A", &[1, 2]), ("B", &[0, 0])], 4.0, 0.05),
            pat(&[("A", &[1, 3]), ("B", &[0, 0])], 3.0, 0.05),
        ];
        let top = select_top_n(&v, 2);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0], v[0]);
        assert_eq!(top[1], v[2]);
    }

    #[test]
    fn pattern_json_shape() {
        let p = pat(&[("EngTq", &[10, 10, 10])], 2.5, 0.01);
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["items"]["EngTq"], serde_json::json!([10, 10, 10]));
        assert_eq!(json["occurrences"], 1);
        assert!(json["scenario_label"].is_null());
    }

    fn symbols(cols: Vec<Vec<Option<Level>>>) -> SymbolTable {
        SymbolTable {
            attributes: (0..cols.len()).map(|i| format!("a{i}")).collect(),
            runs: vec![RunSymbols {
                run_id: "r".into(),
                levels: cols,
            }],
        }
    }

    fn window(start: usize, end: usize) -> DivergentWindow<f64> {
        DivergentWindow {
            run_id: "r".into(),
            run: 0,
            start,
            end,
            error_sum: 100.0,
        }
    }

    #[test]
    fn ratio_is_one_for_ubiquitous_pattern() {
        let sym = symbols(vec![vec![Some(3); 20]]);
        let p = pat(&[("a0", &[3, 3])], 0.0, 0.0);
        let r = cross_k_ratio(&p, &sym, &[window(0, 1), window(5, 6)]).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn ratio_is_ten_for_exclusive_pattern() {
        // 100 single-sample windows, 10 divergent, pattern only there
        let mut col = vec![Some(0); 100];
        let wins: Vec<_> = (0..10).map(|i| window(i * 10, i * 10)).collect();
        for w in &wins {
            col[w.start] = Some(7);
        }
        let p = pat(&[("a0", &[7])], 0.0, 0.0);
        let r = cross_k_ratio(&p, &symbols(vec![col]), &wins).unwrap();
        assert!((r - 10.0).abs() < 1e-12);
    }

    #[test]
    fn equal_ratios_compare_equal() {
        // 2/7 of divergent windows against 3/21 overall, and so on
        let base = density_ratio(1, 3, 1, 9);
        for k in 1..200 {
            assert_eq!(density_ratio(k, 3, k, 9), base);
            assert_eq!(density_ratio(2 * k, 6 * k, 7, 63), base);
        }
    }

    #[test]
    fn ratio_requires_divergent_windows() {
        let sym = symbols(vec![vec![Some(3); 5]]);
        let p = pat(&[("a0", &[3])], 0.0, 0.0);
        assert!(cross_k_ratio::<f64>(&p, &sym, &[]).is_err());
    }
}
