use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::debug;
use rayon::prelude::*;

use super::{density_ratio, sort_patterns, CoOccurrencePattern, Level, MinerConfig, SymbolTable};
use crate::divergence::DivergentWindow;
use crate::error::{Error, Result};

type Seq = Vec<Level>;
type Ids = Vec<u32>;

/// All stride-1 windows of one length, indexed by attribute content.
///
/// Window ids are global: runs are laid end to end and a window is named by
/// its run offset plus its start.
pub struct WindowIndex {
    pub window_len: usize,
    /// First window id of each run.
    pub offsets: Vec<usize>,
    pub total: usize,
    /// Per attribute: level sequence → sorted window ids carrying it.
    by_content: Vec<HashMap<Seq, Ids>>,
}

impl WindowIndex {
    pub fn new(symbols: &SymbolTable, window_len: usize) -> Self {
        let mut offsets = Vec::with_capacity(symbols.runs.len());
        let mut total = 0;
        for run in &symbols.runs {
            offsets.push(total);
            total += (run.len() + 1).saturating_sub(window_len);
        }
        let by_content = (0..symbols.attributes.len())
            .into_par_iter()
            .map(|a| {
                let mut map: HashMap<Seq, Ids> = HashMap::new();
                for (r, run) in symbols.runs.iter().enumerate() {
                    let col = &run.levels[a];
                    for start in 0..(run.len() + 1).saturating_sub(window_len) {
                        if let Some(seq) = content(col, start, window_len) {
                            map.entry(seq).or_default().push((offsets[r] + start) as u32);
                        }
                    }
                }
                map
            })
            .collect();
        WindowIndex {
            window_len,
            offsets,
            total,
            by_content,
        }
    }

    pub fn window_id(&self, run: usize, start: usize) -> usize {
        self.offsets[run] + start
    }

    fn ids(&self, attr: usize, seq: &Seq) -> &[u32] {
        self.by_content[attr].get(seq).map_or(&[], Vec::as_slice)
    }
}

/// `(run, start, window id)` per distinct divergent window, sorted by id.
fn divergent_window_ids<T>(
    symbols: &SymbolTable,
    index: &WindowIndex,
    windows: &[DivergentWindow<T>],
) -> Result<Vec<(usize, usize, u32)>> {
    let mut out = Vec::with_capacity(windows.len());
    for win in windows {
        let run = symbols
            .runs
            .get(win.run)
            .ok_or_else(|| Error::Miner(format!("window refers to missing run {}", win.run)))?;
        if run.run_id != win.run_id {
            return Err(Error::Miner(format!(
                "window run `{}` does not line up with symbol run `{}`",
                win.run_id, run.run_id
            )));
        }
        if win.end < win.start || win.end - win.start + 1 != index.window_len || win.end >= run.len() {
            return Err(Error::Miner(format!(
                "window {}..={} of run `{}` does not match window length {}",
                win.start, win.end, win.run_id, index.window_len
            )));
        }
        out.push((win.run, win.start, index.window_id(win.run, win.start) as u32));
    }
    out.sort_unstable_by_key(|x| x.2);
    out.dedup_by_key(|x| x.2);
    Ok(out)
}

fn content(col: &[Option<Level>], start: usize, len: usize) -> Option<Seq> {
    col[start..start + len].iter().copied().collect()
}

fn intersect(a: &[u32], b: &[u32]) -> Ids {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Items sorted by attribute index.
type Items = Vec<(usize, Seq)>;

struct Frequent {
    items: Items,
    /// Divergent windows containing the pattern, by global id.
    divergent: Ids,
}

/// Levelwise (Apriori) search for co-occurrence patterns.
///
/// Level one collects every (attribute, level sequence) seen inside a
/// divergent window with enough support. Level `m` joins frequent
/// `(m − 1)`-attribute patterns that agree on their first `m − 2` items,
/// drops candidates with an infrequent subset, and keeps those whose
/// support clears `min_supp`. Survivors from every level are then
/// filtered by cross-K ratio `>= epsilon` and returned in rank order.
pub fn mine_patterns<T>(
    symbols: &SymbolTable,
    divergent_windows: &[DivergentWindow<T>],
    config: &MinerConfig,
    window_len: usize,
) -> Result<Vec<CoOccurrencePattern>> {
    config.validate()?;
    if divergent_windows.is_empty() {
        return Err(Error::Miner("no divergent windows to mine".into()));
    }
    if window_len == 0 {
        return Err(Error::Miner("window length must be >= 1".into()));
    }
    let index = WindowIndex::new(symbols, window_len);
    mine_with_index(symbols, &index, divergent_windows, config)
}

pub(crate) fn mine_with_index<T>(
    symbols: &SymbolTable,
    index: &WindowIndex,
    divergent_windows: &[DivergentWindow<T>],
    config: &MinerConfig,
) -> Result<Vec<CoOccurrencePattern>> {
    let l = index.window_len;
    let div_ids = divergent_window_ids(symbols, index, divergent_windows)?;
    let d = div_ids.len();
    let w = index.total;
    let frequent_enough = |count: usize| count as f64 / w as f64 >= config.min_supp;

    // level 1
    let mut level: Vec<Frequent> = Vec::new();
    for a in 0..symbols.attributes.len() {
        let mut by_seq: BTreeMap<Seq, Ids> = BTreeMap::new();
        for &(run, start, id) in &div_ids {
            if let Some(seq) = content(&symbols.runs[run].levels[a], start, l) {
                by_seq.entry(seq).or_default().push(id);
            }
        }
        for (seq, ids) in by_seq {
            if frequent_enough(ids.len()) {
                level.push(Frequent {
                    items: vec![(a, seq)],
                    divergent: ids,
                });
            }
        }
    }

    let mut all: Vec<Frequent> = Vec::new();
    let mut size = 1;
    while !level.is_empty() {
        debug!("apriori level {size}: {} frequent patterns", level.len());
        let next = if size < config.max_attributes {
            join_level(&level, &frequent_enough)
        } else {
            Vec::new()
        };
        all.extend(level);
        level = next;
        size += 1;
    }

    let mut out: Vec<CoOccurrencePattern> = all
        .par_iter()
        .filter_map(|f| {
            let mut wp: Ids = index.ids(f.items[0].0, &f.items[0].1).to_vec();
            for (a, seq) in &f.items[1..] {
                wp = intersect(&wp, index.ids(*a, seq));
            }
            let ratio = density_ratio(f.divergent.len(), d, wp.len(), w);
            (ratio >= config.epsilon).then(|| CoOccurrencePattern {
                items: f
                    .items
                    .iter()
                    .map(|(a, s)| (symbols.attributes[*a].clone(), s.clone()))
                    .collect(),
                support: f.divergent.len() as f64 / w as f64,
                cross_k_ratio: ratio,
                occurrence_count: f.divergent.len(),
                scenario_label: None,
            })
        })
        .collect();
    sort_patterns(&mut out);
    Ok(out)
}

fn join_level(level: &[Frequent], frequent_enough: &(dyn Fn(usize) -> bool + Sync)) -> Vec<Frequent> {
    let known: BTreeSet<&Items> = level.iter().map(|f| &f.items).collect();
    let m = level[0].items.len();
    let mut groups: BTreeMap<&[(usize, Seq)], Vec<&Frequent>> = BTreeMap::new();
    for f in level {
        groups.entry(&f.items[..m - 1]).or_default().push(f);
    }
    let pairs: Vec<(&Frequent, &Frequent)> = groups
        .values()
        .flat_map(|g| {
            g.iter().enumerate().flat_map(move |(i, p)| {
                g[i + 1..]
                    .iter()
                    .filter(move |q| p.items[m - 1].0 != q.items[m - 1].0)
                    .map(move |q| {
                        if p.items[m - 1].0 < q.items[m - 1].0 {
                            (*p, *q)
                        } else {
                            (*q, *p)
                        }
                    })
            })
        })
        .collect();
    let mut out: Vec<Frequent> = pairs
        .into_par_iter()
        .filter_map(|(p, q)| {
            let mut items = p.items.clone();
            items.push(q.items[m - 1].clone());
            // every m-subset must itself be frequent
            let closed = (0..items.len()).all(|skip| {
                let sub: Items = items
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != skip)
                    .map(|(_, it)| it.clone())
                    .collect();
                known.contains(&sub)
            });
            if !closed {
                return None;
            }
            let divergent = intersect(&p.divergent, &q.divergent);
            (!divergent.is_empty() && frequent_enough(divergent.len())).then_some(Frequent { items, divergent })
        })
        .collect();
    out.sort_by(|a, b| a.items.cmp(&b.items));
    out
}
