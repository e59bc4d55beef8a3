//! Run configuration: every tunable that affects results, serializable so a
//! run is reproducible from the config plus the dataset files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::SemanticLayerType;
use crate::raster::RasterConfig;
use crate::train::TrainConfig;

/// Splitmix64-based seed mixing: derives independent streams from one root
/// seed plus context salts, deterministically across platforms.
pub fn mix_seed(base: u64, salts: &[u64]) -> u64 {
    let mut state = base;
    let mut mix = |v: u64| {
        state = state.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(v);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        state = z ^ (z >> 31);
    };
    mix(0);
    for &s in salts {
        mix(s);
    }
    state
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Observed history length (frames).
    pub rho: usize,
    /// Prediction horizon (frames).
    pub tau: usize,
    pub routing_iters: usize,
    pub raster: RasterConfig,
    /// Channel order of the raster stack. Informational; only the canonical
    /// order is accepted in this version.
    pub layer_order: Vec<String>,
    /// Keep every n-th window of each track when building samples.
    pub sample_stride: usize,
    /// Discard samples whose observation windows leave the map bound.
    pub drop_off_map: bool,
    /// Fraction of scenarios held out for validation.
    pub val_fraction: f64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            rho: 5,
            tau: 12,
            routing_iters: 3,
            raster: RasterConfig::default(),
            layer_order: canonical_layer_order(),
            sample_stride: 1,
            drop_off_map: true,
            val_fraction: 0.1,
            train: TrainConfig::default(),
        }
    }
}

pub fn canonical_layer_order() -> Vec<String> {
    SemanticLayerType::ALL
        .iter()
        .map(|t| t.name().to_string())
        .collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho == 0 {
            return Err(Error::Config("rho must be at least 1".into()));
        }
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if self.routing_iters == 0 {
            return Err(Error::Config("routing_iters must be at least 1".into()));
        }
        self.raster.validate()?;
        if self.layer_order != canonical_layer_order() {
            return Err(Error::Config(format!(
                "layer_order must be {:?} in this version",
                canonical_layer_order()
            )));
        }
        if self.sample_stride == 0 {
            return Err(Error::Config("sample_stride must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} must be in [0, 1)",
                self.val_fraction
            )));
        }
        self.train.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
