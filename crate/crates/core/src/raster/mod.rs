//! Binary occupancy rasters of the semantic layers around an agent.
//!
//! Each chunk is a square window of half-width `lambda_m` centered on the
//! agent position, rasterized at `px_per_m` in a local frame (row 0 is the
//! top edge, at center y + lambda), then bilinearly resampled to `out_px`.
//! Vertices are snapped to a 1/256 m grid after the shift into the local
//! frame, which makes rasters bitwise invariant under window translation.

pub mod pgm;

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{AgentState, SemanticLayerType, Vec2, VectorMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterConfig {
    /// Half-width of the observation window in meters.
    pub lambda_m: f64,
    /// Native rasterization resolution in pixels per meter.
    pub px_per_m: f64,
    /// Side length of the resampled output raster.
    pub out_px: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            lambda_m: 10.0,
            px_per_m: 3.0,
            out_px: 64,
        }
    }
}

impl RasterConfig {
    /// Side length of the native raster before resampling.
    pub fn native_px(&self) -> usize {
        (2.0 * self.lambda_m * self.px_per_m).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_m.is_finite() && self.lambda_m > 0.0) {
            return Err(Error::Config(format!("lambda_m {} must be positive", self.lambda_m)));
        }
        if !(self.px_per_m.is_finite() && self.px_per_m > 0.0) {
            return Err(Error::Config(format!("px_per_m {} must be positive", self.px_per_m)));
        }
        if self.native_px() == 0 {
            return Err(Error::Config("window rasterizes to zero pixels".into()));
        }
        if self.out_px == 0 {
            return Err(Error::Config("out_px must be positive".into()));
        }
        Ok(())
    }
}

/// Vertex snap grid: 1/256 m. Power of two, so snapped coordinates and the
/// pixel-center comparisons against them are exact in f64.
const SNAP_PER_M: f64 = 256.0;

fn snap(v: f64) -> f64 {
    (v * SNAP_PER_M).round() / SNAP_PER_M
}

/// Pixel-center scanline fill of one polygon into `buf` (native x native,
/// row-major, row 0 at local y = +lambda). For each row, edge crossings at
/// the row's center height are collected with a half-open rule (an edge
/// spans the row if one endpoint is at or below the center and the other is
/// strictly above), and a pixel center is inside when an odd number of
/// crossings lie strictly to its right.
fn fill_polygon(buf: &mut [f32], native: usize, lambda: f64, px_per_m: f64, points: &[Vec2]) {
    let n = points.len();
    if n < 3 {
        return;
    }
    let (min_y, max_y) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.y), hi.max(p.y))
        });
    let mut crossings: Vec<f64> = Vec::with_capacity(8);
    for row in 0..native {
        let cy = lambda - (row as f64 + 0.5) / px_per_m;
        if cy < min_y || cy > max_y {
            continue;
        }
        crossings.clear();
        for i in 0..n {
            let a = points[i];
            let b = points[(i + 1) % n];
            let spans = (a.y <= cy && b.y > cy) || (b.y <= cy && a.y > cy);
            if spans {
                crossings.push(a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
        let base = row * native;
        let mut idx = 0;
        for col in 0..native {
            let cx = -lambda + (col as f64 + 0.5) / px_per_m;
            while idx < crossings.len() && crossings[idx] <= cx {
                idx += 1;
            }
            // Crossings strictly right of cx: total - idx; total is even.
            if (crossings.len() - idx) % 2 == 1 {
                buf[base + col] = 1.0;
            }
        }
    }
}

/// Rasterizes one semantic map layer around `center` at native resolution.
/// The agent-box channel has no map geometry and is rejected here.
pub fn extract_layer(
    map: &VectorMap,
    center: Vec2,
    layer: SemanticLayerType,
    cfg: &RasterConfig,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    let polys = map.polygons(layer).ok_or_else(|| {
        Error::Config("agent boxes are rendered from track state, not extracted from the map".into())
    })?;
    let native = cfg.native_px();
    let mut buf = vec![0.0f32; native * native];
    let bound = cfg.lambda_m + 1.0 / cfg.px_per_m;
    for poly in polys {
        let local: Vec<Vec2> = poly
            .points
            .iter()
            .map(|&p| Vec2::new(snap(p.x - center.x), snap(p.y - center.y)))
            .collect();
        let inside_window = local.iter().any(|p| p.x.abs() <= bound && p.y.abs() <= bound)
            || polygon_covers_window(&local, bound);
        if inside_window {
            fill_polygon(&mut buf, native, cfg.lambda_m, cfg.px_per_m, &local);
        }
    }
    Ok(buf)
}

/// True when the window bound box intersects the polygon bound box. Used
/// only to skip polygons that cannot touch the window.
fn polygon_covers_window(local: &[Vec2], bound: f64) -> bool {
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in local {
        lo_x = lo_x.min(p.x);
        hi_x = hi_x.max(p.x);
        lo_y = lo_y.min(p.y);
        hi_y = hi_y.max(p.y);
    }
    lo_x <= bound && hi_x >= -bound && lo_y <= bound && hi_y >= -bound
}

/// Mask rotation angle in degrees for an agent heading `yaw` (radians,
/// clockwise-positive mask convention): 90 + sign(-yaw) * |yaw| * 180 / pi,
/// with sign(0) = +1. Heading +x gives 90, +y gives 0, -y gives 180.
pub fn agent_rotation_deg(yaw: f64) -> f64 {
    let sign = if -yaw >= 0.0 { 1.0 } else { -1.0 };
    (FRAC_PI_2 + sign * yaw.abs()) / PI * 180.0
}

/// Renders the agent's own bounding box, centered in the window and aligned
/// with its heading: the length axis of the box points along `yaw`. This
/// equals rotating an up-facing box clockwise by [`agent_rotation_deg`].
pub fn render_agent_box(length_m: f64, width_m: f64, yaw: f64, cfg: &RasterConfig) -> Vec<f32> {
    let native = cfg.native_px();
    let mut buf = vec![0.0f32; native * native];
    let (hw, hl) = (width_m / 2.0, length_m / 2.0);
    let delta = yaw - FRAC_PI_2;
    let corners: Vec<Vec2> = [
        Vec2::new(-hw, -hl),
        Vec2::new(hw, -hl),
        Vec2::new(hw, hl),
        Vec2::new(-hw, hl),
    ]
    .into_iter()
    .map(|c| c.rotated(delta))
    .collect();
    fill_polygon(&mut buf, native, cfg.lambda_m, cfg.px_per_m, &corners);
    buf
}

/// Bilinear resampling with half-pixel alignment. The interpolation uses the
/// a + t * (b - a) form, which preserves constant regions exactly; output is
/// clamped to [0, 1].
pub fn resample(src: &[f32], src_px: usize, dst_px: usize) -> Vec<f32> {
    assert_eq!(src.len(), src_px * src_px, "source raster is square");
    if src_px == dst_px {
        return src.to_vec();
    }
    let scale = src_px as f64 / dst_px as f64;
    let coord = |d: usize| -> (usize, usize, f32) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_px - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_px - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
    let mut out = vec![0.0f32; dst_px * dst_px];
    for r in 0..dst_px {
        let (y0, y1, fy) = coord(r);
        for c in 0..dst_px {
            let (x0, x1, fx) = coord(c);
            let top = lerp(src[y0 * src_px + x0], src[y0 * src_px + x1], fx);
            let bot = lerp(src[y1 * src_px + x0], src[y1 * src_px + x1], fx);
            out[r * dst_px + c] = lerp(top, bot, fy).clamp(0.0, 1.0);
        }
    }
    out
}

/// All five semantic channels around one agent state, resampled to
/// `out_px`, in the fixed channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStack {
    pub origin: Vec2,
    pub out_px: usize,
    /// [channel][row][col], channel order per `SemanticLayerType::ALL`.
    pub data: Vec<f32>,
}

impl ChunkStack {
    pub fn layer(&self, t: SemanticLayerType) -> &[f32] {
        let px = self.out_px * self.out_px;
        &self.data[t.index() * px..(t.index() + 1) * px]
    }
}

pub fn rasterize_chunk_stack(
    map: &VectorMap,
    state: &AgentState,
    length_m: f64,
    width_m: f64,
    cfg: &RasterConfig,
) -> Result<ChunkStack> {
    cfg.validate()?;
    let px = cfg.out_px * cfg.out_px;
    let mut data = Vec::with_capacity(5 * px);
    for layer in SemanticLayerType::MAP_LAYERS {
        let native = extract_layer(map, state.pos, layer, cfg)?;
        data.extend_from_slice(&resample(&native, cfg.native_px(), cfg.out_px));
    }
    let agent = render_agent_box(length_m, width_m, state.yaw, cfg);
    data.extend_from_slice(&resample(&agent, cfg.native_px(), cfg.out_px));
    Ok(ChunkStack {
        origin: state.pos,
        out_px: cfg.out_px,
        data,
    })
}

/// True when any part of the window around `center` extends beyond the
/// map's polygon bound. An empty map has no bound, so everything is outside.
pub fn window_off_map(map: &VectorMap, center: Vec2, cfg: &RasterConfig) -> bool {
    match map.bbox() {
        None => true,
        Some((lo, hi)) => {
            center.x - cfg.lambda_m < lo.x
                || center.x + cfg.lambda_m > hi.x
                || center.y - cfg.lambda_m < lo.y
                || center.y + cfg.lambda_m > hi.y
        }
    }
}
