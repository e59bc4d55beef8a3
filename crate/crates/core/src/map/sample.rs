//! Training samples: windows of rho observed frames plus tau future
//! displacement targets, with standardized state features and rasterized
//! map chunks. Only the observed window ever feeds the inputs; targets are
//! relative to the last observed position.

use serde::{Deserialize, Serialize};

use super::{AgentState, Track, Vec2, VectorMap};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::raster::{rasterize_chunk_stack, window_off_map};

/// Per-frame model inputs: vx, vy, ax, ay, yaw.
pub const STATE_FEATURES: usize = 5;

pub fn state_features(s: &AgentState) -> [f64; STATE_FEATURES] {
    [s.vel.x, s.vel.y, s.acc.x, s.acc.y, s.yaw]
}

/// Z-score parameters per state feature, computed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: [f64; STATE_FEATURES],
    pub std: [f64; STATE_FEATURES],
}

/// Features with population spread below this are treated as constant.
const DEGENERATE_STD: f64 = 1e-8;

impl StandardizationStats {
    /// Identity transform; used when no training statistics exist.
    pub fn identity() -> Self {
        StandardizationStats {
            mean: [0.0; STATE_FEATURES],
            std: [1.0; STATE_FEATURES],
        }
    }

    /// Population statistics over feature rows. Degenerate features keep
    /// std = 1 so standardization stays invertible.
    pub fn compute(rows: &[[f64; STATE_FEATURES]]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Config(format!(
                "standardization needs at least 2 feature rows, got {}",
                rows.len()
            )));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; STATE_FEATURES];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = [0.0; STATE_FEATURES];
        for row in rows {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s <= DEGENERATE_STD {
                *s = 1.0;
            }
        }
        Ok(StandardizationStats { mean, std })
    }

    pub fn standardize(&self, row: [f64; STATE_FEATURES]) -> [f64; STATE_FEATURES] {
        let mut out = [0.0; STATE_FEATURES];
        for i in 0..STATE_FEATURES {
            out[i] = (row[i] - self.mean[i]) / self.std[i];
        }
        out
    }

    pub fn destandardize(&self, row: [f64; STATE_FEATURES]) -> [f64; STATE_FEATURES] {
        let mut out = [0.0; STATE_FEATURES];
        for i in 0..STATE_FEATURES {
            out[i] = row[i] * self.std[i] + self.mean[i];
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub scenario_id: String,
    pub agent_id: String,
    pub rho: usize,
    pub tau: usize,
    pub out_px: usize,
    /// rho x STATE_FEATURES, standardized, oldest frame first.
    pub features: Vec<f32>,
    /// rho x 5 x out_px x out_px raster chunks, frame-major.
    pub chunks: Vec<f32>,
    pub chunk_origins: Vec<Vec2>,
    /// tau displacement targets relative to the last observed position.
    pub target: Vec<[f64; 2]>,
    /// Raw observed states (for physics baselines and diagnostics).
    pub observed: Vec<AgentState>,
    /// True when any observation window extends beyond the map bound.
    pub off_map: bool,
}

impl Sample {
    /// Last observed state; targets and predictions are relative to it.
    pub fn current(&self) -> &AgentState {
        self.observed.last().expect("samples hold rho >= 1 states")
    }
}

/// Start indices of complete windows (rho observed + tau future frames).
pub fn window_starts(track_len: usize, rho: usize, tau: usize, stride: usize) -> Vec<usize> {
    let need = rho + tau;
    if track_len < need || stride == 0 {
        return Vec::new();
    }
    (0..=track_len - need).step_by(stride).collect()
}

pub fn build_samples(
    map: &VectorMap,
    track: &Track,
    cfg: &RunConfig,
    stats: &StandardizationStats,
    scenario_id: &str,
) -> Result<Vec<Sample>> {
    let (rho, tau) = (cfg.rho, cfg.tau);
    let chunk_px = cfg.raster.out_px * cfg.raster.out_px;
    let mut samples = Vec::new();
    for start in window_starts(track.states.len(), rho, tau, cfg.sample_stride) {
        let observed = &track.states[start..start + rho];
        let current = &observed[rho - 1];

        let mut features = Vec::with_capacity(rho * STATE_FEATURES);
        let mut chunks = Vec::with_capacity(rho * 5 * chunk_px);
        let mut chunk_origins = Vec::with_capacity(rho);
        let mut off_map = false;
        for state in observed {
            let std_row = stats.standardize(state_features(state));
            features.extend(std_row.iter().map(|&v| v as f32));
            let stack = rasterize_chunk_stack(map, state, track.length_m, track.width_m, &cfg.raster)?;
            chunk_origins.push(stack.origin);
            chunks.extend_from_slice(&stack.data);
            off_map |= window_off_map(map, state.pos, &cfg.raster);
        }

        let target = (0..tau)
            .map(|j| {
                let future = &track.states[start + rho + j];
                [future.pos.x - current.pos.x, future.pos.y - current.pos.y]
            })
            .collect();

        samples.push(Sample {
            scenario_id: scenario_id.to_string(),
            agent_id: track.agent_id.clone(),
            rho,
            tau,
            out_px: cfg.raster.out_px,
            features,
            chunks,
            chunk_origins,
            target,
            observed: observed.to_vec(),
            off_map,
        });
    }
    Ok(samples)
}
