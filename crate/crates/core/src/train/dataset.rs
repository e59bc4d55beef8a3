//! Dataset assembly: scenario files to standardized samples, split at the
//! scenario level so no track contributes to both training and validation.
//! Standardization constants come from the training windows only (before
//! the off-map filter, which needs rasters) and are applied to both splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{mix_seed, RunConfig};
use crate::error::{Error, Result};
use crate::map::sample::{
    build_samples, state_features, window_starts, Sample, StandardizationStats, STATE_FEATURES,
};
use crate::map::scenario::load_scenario;
use crate::map::{Track, VectorMap};

#[derive(Debug, Clone)]
pub struct LoadedScenario {
    /// File stem, used as the scenario id in samples.
    pub id: String,
    pub map: VectorMap,
    pub tracks: Vec<Track>,
}

/// Loads every `.json` scenario under `dir`, ordered by file name.
pub fn load_scenario_dir(dir: &Path) -> Result<Vec<LoadedScenario>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        // Scenario directories also hold the generation manifest.
        if path.extension().is_some_and(|e| e == "json")
            && path.file_name().is_some_and(|n| n != "manifest.json")
        {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .par_iter()
        .map(|path| {
            let (map, tracks) = load_scenario(path)?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(LoadedScenario { id, map, tracks })
        })
        .collect()
}

/// Scenario-level split: indices are shuffled by the split seed, the first
/// `round(n * val_fraction)` become validation (never the whole set). Both
/// halves are returned in ascending order.
pub fn split_scenarios(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xC]));
    idx.shuffle(&mut rng);
    let n_val = (((n as f64) * val_fraction).round() as usize).min(n.saturating_sub(1));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// State-feature rows of every complete window, duplicates included, so
/// the constants reflect exactly what training consumes.
fn window_rows(scenarios: &[&LoadedScenario], cfg: &RunConfig) -> Vec<[f64; STATE_FEATURES]> {
    let mut rows = Vec::new();
    for sc in scenarios {
        for track in &sc.tracks {
            for start in window_starts(track.states.len(), cfg.rho, cfg.tau, cfg.sample_stride) {
                for s in &track.states[start..start + cfg.rho] {
                    rows.push(state_features(s));
                }
            }
        }
    }
    rows
}

/// Rasterizes and standardizes all samples of the given scenarios with
/// fixed, externally supplied constants. Applies the off-map filter when
/// the config asks for it.
pub fn build_samples_with_stats(
    scenarios: &[LoadedScenario],
    cfg: &RunConfig,
    stats: &StandardizationStats,
) -> Result<Vec<Sample>> {
    let jobs: Vec<(&LoadedScenario, &Track)> = scenarios
        .iter()
        .flat_map(|sc| sc.tracks.iter().map(move |t| (sc, t)))
        .collect();
    let per_track: Result<Vec<Vec<Sample>>> = jobs
        .par_iter()
        .map(|(sc, track)| build_samples(&sc.map, track, cfg, stats, &sc.id))
        .collect();
    let mut samples: Vec<Sample> = per_track?.into_iter().flatten().collect();
    if cfg.drop_off_map {
        samples.retain(|s| !s.off_map);
    }
    Ok(samples)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub stats: StandardizationStats,
}

pub fn build_dataset(scenarios: &[LoadedScenario], cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(Error::Config("no scenarios to build a dataset from".into()));
    }
    let (train_idx, val_idx) = split_scenarios(scenarios.len(), cfg.val_fraction, cfg.seed);
    let pick = |idx: &[usize]| -> Vec<LoadedScenario> { idx.iter().map(|&i| scenarios[i].clone()).collect() };
    let train_sc = pick(&train_idx);
    let val_sc = pick(&val_idx);

    let rows = window_rows(&train_sc.iter().collect::<Vec<_>>(), cfg);
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "training scenarios contain no complete window of {} observed plus {} future frames",
            cfg.rho, cfg.tau
        )));
    }
    let stats = StandardizationStats::compute(&rows)?;

    let train = build_samples_with_stats(&train_sc, cfg, &stats)?;
    let val = build_samples_with_stats(&val_sc, cfg, &stats)?;
    if train.is_empty() {
        return Err(Error::Config("every training sample was filtered out".into()));
    }
    Ok(Dataset { train, val, stats })
}
