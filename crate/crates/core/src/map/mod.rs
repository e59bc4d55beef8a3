pub mod sample;
pub mod scenario;
pub mod synth;

use serde::{Deserialize, Serialize};

/// Frame spacing of all tracks, in seconds (2 Hz).
pub const DELTA_T: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Counterclockwise rotation by `angle` radians.
    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, f: f64) -> Vec2 {
        Vec2::new(self.x * f, self.y * f)
    }
}

/// Semantic raster channels in their fixed stack order. The first four are
/// map layers; the agent box is rendered from track state, not map geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SemanticLayerType {
    DrivableArea,
    RoadSegment,
    Lane,
    Walkway,
    AgentBox,
}

impl SemanticLayerType {
    pub const ALL: [SemanticLayerType; 5] = [
        SemanticLayerType::DrivableArea,
        SemanticLayerType::RoadSegment,
        SemanticLayerType::Lane,
        SemanticLayerType::Walkway,
        SemanticLayerType::AgentBox,
    ];

    pub const MAP_LAYERS: [SemanticLayerType; 4] = [
        SemanticLayerType::DrivableArea,
        SemanticLayerType::RoadSegment,
        SemanticLayerType::Lane,
        SemanticLayerType::Walkway,
    ];

    /// Channel position in a chunk stack.
    pub fn index(self) -> usize {
        match self {
            SemanticLayerType::DrivableArea => 0,
            SemanticLayerType::RoadSegment => 1,
            SemanticLayerType::Lane => 2,
            SemanticLayerType::Walkway => 3,
            SemanticLayerType::AgentBox => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticLayerType::DrivableArea => "drivable_area",
            SemanticLayerType::RoadSegment => "road_segment",
            SemanticLayerType::Lane => "lane",
            SemanticLayerType::Walkway => "walkway",
            SemanticLayerType::AgentBox => "agent",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub points: Vec<Vec2>,
}

impl Polygon {
    pub fn new(points: Vec<Vec2>) -> Self {
        Polygon { points }
    }

    pub fn bbox(&self) -> Option<(Vec2, Vec2)> {
        bbox_of(self.points.iter().copied())
    }
}

fn bbox_of(points: impl Iterator<Item = Vec2>) -> Option<(Vec2, Vec2)> {
    let mut bounds: Option<(Vec2, Vec2)> = None;
    for p in points {
        bounds = Some(match bounds {
            None => (p, p),
            Some((lo, hi)) => (
                Vec2::new(lo.x.min(p.x), lo.y.min(p.y)),
                Vec2::new(hi.x.max(p.x), hi.y.max(p.y)),
            ),
        });
    }
    bounds
}

/// Sparse vector map: polygon sets for the four semantic map layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorMap {
    layers: [Vec<Polygon>; 4],
}

impl VectorMap {
    pub fn new() -> Self {
        VectorMap::default()
    }

    /// Polygons of a map layer; `None` for the agent-box channel, which has
    /// no map geometry.
    pub fn polygons(&self, layer: SemanticLayerType) -> Option<&[Polygon]> {
        match layer {
            SemanticLayerType::AgentBox => None,
            l => Some(&self.layers[l.index()]),
        }
    }

    pub fn add_polygon(&mut self, layer: SemanticLayerType, polygon: Polygon) {
        assert!(
            layer != SemanticLayerType::AgentBox,
            "agent boxes are rendered from track state, not stored in the map"
        );
        self.layers[layer.index()].push(polygon);
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Vec::is_empty)
    }

    /// Axis-aligned bound over all polygons of all layers.
    pub fn bbox(&self) -> Option<(Vec2, Vec2)> {
        bbox_of(
            self.layers
                .iter()
                .flatten()
                .flat_map(|p| p.points.iter().copied()),
        )
    }
}

/// One observed agent frame. Velocity and acceleration are world-frame;
/// yaw is in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub t: f64,
    pub pos: Vec2,
    pub vel: Vec2,
    pub acc: Vec2,
    pub yaw: f64,
}

impl AgentState {
    pub fn speed(&self) -> f64 {
        self.vel.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub agent_id: String,
    pub length_m: f64,
    pub width_m: f64,
    pub states: Vec<AgentState>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_order_is_fixed() {
        let idx: Vec<usize> = SemanticLayerType::ALL.iter().map(|t| t.index()).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert_eq!(SemanticLayerType::ALL[4], SemanticLayerType::AgentBox);
        assert_eq!(SemanticLayerType::MAP_LAYERS.len(), 4);
    }

    #[test]
    fn layer_names_round_trip() {
        for t in SemanticLayerType::ALL {
            assert_eq!(SemanticLayerType::from_name(t.name()), Some(t));
        }
        assert_eq!(SemanticLayerType::from_name("curb"), None);
    }

    #[test]
    fn map_rejects_agent_polygons_and_reports_bbox() {
        let mut map = VectorMap::new();
        assert!(map.bbox().is_none());
        map.add_polygon(
            SemanticLayerType::Lane,
            Polygon::new(vec![
                Vec2::new(-1.0, 0.0),
                Vec2::new(2.0, 0.0),
                Vec2::new(2.0, 3.0),
            ]),
        );
        let (lo, hi) = map.bbox().unwrap();
        assert_eq!((lo.x, lo.y), (-1.0, 0.0));
        assert_eq!((hi.x, hi.y), (2.0, 3.0));
        assert!(map.polygons(SemanticLayerType::AgentBox).is_none());
        assert_eq!(map.polygons(SemanticLayerType::Lane).unwrap().len(), 1);
        assert!(map.polygons(SemanticLayerType::Walkway).unwrap().is_empty());
    }

    #[test]
    fn vec2_rotation_is_counterclockwise() {
        let p = Vec2::new(1.0, 0.0).rotated(std::f64::consts::FRAC_PI_2);
        assert!(p.x.abs() < 1e-12);
        assert!((p.y - 1.0).abs() < 1e-12);
    }
}
