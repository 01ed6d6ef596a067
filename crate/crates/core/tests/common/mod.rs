#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use noxstva::divergence::{find_divergent_windows, DivergentWindow};
use noxstva::miner::{mine_patterns, select_top_n, CoOccurrencePattern, Level, MinerConfig, RunSymbols, SymbolTable};
use noxstva::series::Series;

/// Small random miner/detector instance.
pub struct Instance {
    pub symbols: SymbolTable,
    pub errors: Series<f64>,
    pub run_ids: Vec<String>,
    pub window_len: usize,
    pub threshold: f64,
    pub config: MinerConfig,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_attr = rng.random_range(1..=3);
    let n_runs = rng.random_range(1..=3);
    let total = rng.random_range(20..=500);
    let levels = rng.random_range(2..=4u8);
    let window_len = rng.random_range(1..=4);
    let mut lens: Vec<usize> = vec![total / n_runs; n_runs];
    lens[0] += total % n_runs;

    let run_ids: Vec<String> = (0..n_runs).map(|r| format!("r{r}")).collect();
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for (r, &len) in lens.iter().enumerate() {
        let cols: Vec<Vec<Option<Level>>> = (0..n_attr)
            .map(|_| {
                (0..len)
                    .map(|_| (!rng.random_bool(0.03)).then(|| rng.random_range(0..levels)))
                    .collect()
            })
            .collect();
        // errors lean on attribute 0 being at level 0, so some patterns stand out
        let errs: Vec<Option<f64>> = (0..len)
            .map(|k| {
                if rng.random_bool(0.02) {
                    return None;
                }
                let bump = if cols[0][k] == Some(0) { 15.0 } else { 0.0 };
                Some(rng.random_range(0.0..10.0) + bump)
            })
            .collect();
        runs.push(RunSymbols {
            run_id: run_ids[r].clone(),
            levels: cols,
        });
        errors.push(errs);
    }
    let threshold = window_len as f64 * rng.random_range(6.0..14.0);
    let config = MinerConfig {
        min_supp: [0.001, 0.005, 0.02][rng.random_range(0..3)],
        epsilon: [1.0, 1.5, 2.0][rng.random_range(0..3)],
        max_attributes: rng.random_range(1..=3),
        mining_attributes: Vec::new(),
    };
    Instance {
        symbols: SymbolTable {
            attributes: (0..n_attr).map(|a| format!("A{a}")).collect(),
            runs,
        },
        errors,
        run_ids,
        window_len,
        threshold,
        config,
    }
}

/// Direct re-summation of every window.
pub fn brute_windows(errors: &Series<f64>, run_ids: &[String], l: usize, threshold: f64) -> Vec<DivergentWindow<f64>> {
    let mut out = Vec::new();
    for (run, errs) in errors.iter().enumerate() {
        if errs.len() < l {
            continue;
        }
        for start in 0..=errs.len() - l {
            let slice = &errs[start..start + l];
            if slice.iter().any(Option::is_none) {
                continue;
            }
            let mut sum = 0.0;
            for e in slice {
                sum += e.unwrap();
            }
            if sum > threshold {
                out.push(DivergentWindow {
                    run_id: run_ids[run].clone(),
                    run,
                    start,
                    end: start + l - 1,
                    error_sum: sum,
                });
            }
        }
    }
    out
}

fn subsets(n: usize, max: usize) -> Vec<Vec<usize>> {
    (1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect::<Vec<_>>())
        .filter(|s| s.len() <= max)
        .collect()
}

fn window_content(run: &RunSymbols, attrs: &[usize], start: usize, l: usize) -> Option<Vec<Vec<Level>>> {
    attrs
        .iter()
        .map(|&a| {
            run.levels[a][start..start + l]
                .iter()
                .copied()
                .collect::<Option<Vec<Level>>>()
        })
        .collect()
}

/// Enumerates every attribute subset and every content seen in a
/// divergent window, then counts occurrences by full scan.
pub fn brute_patterns(
    symbols: &SymbolTable,
    windows: &[DivergentWindow<f64>],
    config: &MinerConfig,
    l: usize,
) -> BTreeMap<BTreeMap<String, Vec<Level>>, (usize, f64, f64)> {
    let w: usize = symbols.runs.iter().map(|r| (r.len() + 1).saturating_sub(l)).sum();
    let d = windows.len();
    let mut out = BTreeMap::new();
    for attrs in subsets(symbols.attributes.len(), config.max_attributes) {
        let mut dp: BTreeMap<Vec<Vec<Level>>, usize> = BTreeMap::new();
        for win in windows {
            if let Some(c) = window_content(&symbols.runs[win.run], &attrs, win.start, l) {
                *dp.entry(c).or_default() += 1;
            }
        }
        for (content, dp) in dp {
            let mut wp = 0usize;
            for run in &symbols.runs {
                for start in 0..(run.len() + 1).saturating_sub(l) {
                    if window_content(run, &attrs, start, l).as_ref() == Some(&content) {
                        wp += 1;
                    }
                }
            }
            let support = dp as f64 / w as f64;
            // exact rational, rounded once
            let ratio = (dp as u128 * w as u128) as f64 / (d as u128 * wp as u128) as f64;
            if support >= config.min_supp && ratio >= config.epsilon {
                let items = attrs
                    .iter()
                    .zip(content)
                    .map(|(&a, seq)| (symbols.attributes[a].clone(), seq))
                    .collect();
                out.insert(items, (dp, support, ratio));
            }
        }
    }
    out
}

/// Compares detector and miner against the brute-force versions on one
/// instance. Returns a description of the first mismatch.
pub fn check_instance(seed: u64) -> Result<(), String> {
    let inst = random_instance(seed);
    let got = find_divergent_windows(&inst.errors, &inst.run_ids, inst.window_len, inst.threshold);
    let want = brute_windows(&inst.errors, &inst.run_ids, inst.window_len, inst.threshold);
    if got != want {
        return Err(format!(
            "seed {seed}: detector found {} windows, oracle {}",
            got.len(),
            want.len()
        ));
    }
    if got.is_empty() {
        return Ok(());
    }
    let mined =
        mine_patterns(&inst.symbols, &got, &inst.config, inst.window_len).map_err(|e| format!("seed {seed}: {e}"))?;
    let oracle = brute_patterns(&inst.symbols, &got, &inst.config, inst.window_len);
    if mined.len() != oracle.len() {
        return Err(format!(
            "seed {seed}: miner returned {} patterns, oracle {}",
            mined.len(),
            oracle.len()
        ));
    }
    for p in &mined {
        match oracle.get(&p.items) {
            Some(&(dp, support, ratio))
                if dp == p.occurrence_count && support == p.support && ratio == p.cross_k_ratio => {}
            Some(o) => {
                return Err(format!(
                    "seed {seed}: {:?} counted {:?}, oracle {o:?}",
                    p.items,
                    (p.occurrence_count, p.support, p.cross_k_ratio)
                ))
            }
            None => return Err(format!("seed {seed}: {:?} not in oracle", p.items)),
        }
    }
    if mined.windows(2).any(|w| w[0].rank_cmp(&w[1]).is_gt()) {
        return Err(format!("seed {seed}: miner output out of rank order"));
    }
    let top = select_top_n(&mined, 3);
    if !top_n_oracle(&mined, 3).eq(top.iter()) {
        return Err(format!("seed {seed}: top-n selection differs"));
    }
    Ok(())
}

fn top_n_oracle(ranked: &[CoOccurrencePattern], n: usize) -> impl Iterator<Item = &CoOccurrencePattern> {
    let mut chosen: Vec<&CoOccurrencePattern> = Vec::new();
    for p in ranked {
        let redundant = chosen
            .iter()
            .any(|s| s.items.iter().all(|(a, seq)| p.items.get(a) == Some(seq)));
        if chosen.len() < n && !redundant {
            chosen.push(p);
        }
    }
    chosen.into_iter()
}

use noxstva::synth::SynthConfig;

/// The default low-speed regime alone, with wide operating spread.
pub fn one_regime(delta: usize, noise: f64, seed: u64) -> SynthConfig {
    let mut c = SynthConfig::default_four_regime();
    let mut r = c.regimes[1].clone();
    for (k, sd) in r.attribute_stddevs.iter_mut() {
        if k != "EngTq" && k != "EGRkgph" {
            *sd *= 1.5;
        }
    }
    c.regimes = vec![r];
    c.transition = vec![vec![1.0]];
    c.initial_regime = Some(0);
    c.delta = delta;
    c.noise_stddev = noise;
    c.physics_mismatch = None;
    c.seed = seed;
    c
}

/// Low-speed and high-load only, noiseless, fitted with the generating
/// constants.
pub fn two_regime(seed: u64) -> SynthConfig {
    let mut c = SynthConfig::default_four_regime();
    c.regimes = vec![c.regimes[1].clone(), c.regimes[2].clone()];
    c.transition = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    c.initial_regime = Some(0);
    c.noise_stddev = 0.0;
    c.physics_mismatch = None;
    c.runs = 6;
    c.run_length = 1200;
    c.seed = seed;
    c
}
