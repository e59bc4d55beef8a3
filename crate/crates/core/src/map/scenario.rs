//! Scenario interchange files: JSON with a version tag, one polygon set per
//! semantic map layer, and per-agent state tracks sampled at 2 Hz.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentState, Polygon, SemanticLayerType, Track, Vec2, VectorMap, DELTA_T};
use crate::error::{Error, Result};

pub const SCENARIO_VERSION: u32 = 1;

/// Tolerance on the 0.5 s frame spacing.
const DT_TOL: f64 = 1e-9;

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    version: u32,
    map: MapSection,
    tracks: Vec<TrackSection>,
}

#[derive(Serialize, Deserialize)]
struct MapSection {
    layers: Vec<LayerSection>,
}

#[derive(Serialize, Deserialize)]
struct LayerSection {
    #[serde(rename = "type")]
    layer_type: String,
    polygons: Vec<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct TrackSection {
    agent_id: String,
    length_m: f64,
    width_m: f64,
    states: Vec<StateSection>,
}

#[derive(Serialize, Deserialize)]
struct StateSection {
    t: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    ax: f64,
    ay: f64,
    yaw: f64,
}

pub fn load_scenario(path: &Path) -> Result<(VectorMap, Vec<Track>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parsed: ScenarioFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
    scenario_from_wire(parsed, path)
}

fn scenario_from_wire(file: ScenarioFile, path: &Path) -> Result<(VectorMap, Vec<Track>)> {
    if file.version != SCENARIO_VERSION {
        return Err(Error::scenario(
            path,
            format!("unsupported version {} (expected {})", file.version, SCENARIO_VERSION),
        ));
    }
    let mut map = VectorMap::new();
    for (li, layer) in file.map.layers.iter().enumerate() {
        let layer_type = SemanticLayerType::from_name(&layer.layer_type).ok_or_else(|| {
            Error::scenario(path, format!("layer {li}: unknown type {:?}", layer.layer_type))
        })?;
        if layer_type == SemanticLayerType::AgentBox {
            return Err(Error::scenario(
                path,
                format!("layer {li}: agent boxes belong to tracks, not the map"),
            ));
        }
        for (pi, poly) in layer.polygons.iter().enumerate() {
            if poly.len() < 3 {
                return Err(Error::scenario(
                    path,
                    format!(
                        "layer {li} ({}) polygon {pi}: {} vertices, need at least 3",
                        layer.layer_type,
                        poly.len()
                    ),
                ));
            }
            if let Some(bad) = poly.iter().find(|p| !p[0].is_finite() || !p[1].is_finite()) {
                return Err(Error::scenario(
                    path,
                    format!(
                        "layer {li} ({}) polygon {pi}: non-finite vertex {:?}",
                        layer.layer_type, bad
                    ),
                ));
            }
            map.add_polygon(
                layer_type,
                Polygon::new(poly.iter().map(|&p| Vec2::from(p)).collect()),
            );
        }
    }

    let mut tracks = Vec::with_capacity(file.tracks.len());
    for tr in &file.tracks {
        let ctx = |detail: String| Error::scenario(path, format!("track {:?}: {detail}", tr.agent_id));
        if !(tr.length_m.is_finite() && tr.length_m > 0.0)
            || !(tr.width_m.is_finite() && tr.width_m > 0.0)
        {
            return Err(ctx(format!(
                "box dimensions {}x{} must be finite and positive",
                tr.length_m, tr.width_m
            )));
        }
        if tr.states.is_empty() {
            return Err(ctx("no states".into()));
        }
        let mut states = Vec::with_capacity(tr.states.len());
        for (si, s) in tr.states.iter().enumerate() {
            let vals = [s.t, s.x, s.y, s.vx, s.vy, s.ax, s.ay, s.yaw];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(ctx(format!("state {si}: non-finite value")));
            }
            if !(s.yaw > -PI && s.yaw <= PI) {
                return Err(ctx(format!("state {si}: yaw {} outside (-pi, pi]", s.yaw)));
            }
            if si > 0 {
                let dt = s.t - tr.states[si - 1].t;
                if (dt - DELTA_T).abs() > DT_TOL {
                    return Err(ctx(format!(
                        "state {si}: frame spacing {dt} differs from {DELTA_T}"
                    )));
                }
            }
            states.push(AgentState {
                t: s.t,
                pos: Vec2::new(s.x, s.y),
                vel: Vec2::new(s.vx, s.vy),
                acc: Vec2::new(s.ax, s.ay),
                yaw: s.yaw,
            });
        }
        tracks.push(Track {
            agent_id: tr.agent_id.clone(),
            length_m: tr.length_m,
            width_m: tr.width_m,
            states,
        });
    }
    Ok((map, tracks))
}

/// Writes the canonical form: all four map layers in stack order (empty ones
/// included), tracks in the given order, pretty-printed with a trailing
/// newline. Loading and re-saving a canonical file is byte-identical.
pub fn save_scenario(map: &VectorMap, tracks: &[Track], path: &Path) -> Result<()> {
    let layers = SemanticLayerType::MAP_LAYERS
        .iter()
        .map(|&t| LayerSection {
            layer_type: t.name().to_string(),
            polygons: map
                .polygons(t)
                .expect("map layer")
                .iter()
                .map(|poly| poly.points.iter().map(|&p| p.into()).collect())
                .collect(),
        })
        .collect();
    let wire = ScenarioFile {
        version: SCENARIO_VERSION,
        map: MapSection { layers },
        tracks: tracks
            .iter()
            .map(|tr| TrackSection {
                agent_id: tr.agent_id.clone(),
                length_m: tr.length_m,
                width_m: tr.width_m,
                states: tr
                    .states
                    .iter()
                    .map(|s| StateSection {
                        t: s.t,
                        x: s.pos.x,
                        y: s.pos.y,
                        vx: s.vel.x,
                        vy: s.vel.y,
                        ax: s.acc.x,
                        ay: s.acc.y,
                        yaw: s.yaw,
                    })
                    .collect(),
            })
            .collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &wire).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
