//! Seeded synthetic scenario generation. All geometry is built in a local
//! frame (road along +x, or arc around the origin), then rotated and
//! translated by a random rigid transform. Track states are derived from
//! positions by central differences, so stored kinematics are consistent
//! with the path by construction.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{AgentState, Polygon, SemanticLayerType, Track, Vec2, VectorMap, DELTA_T};
use crate::config::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Straight,
    Curve,
    Intersection,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::Straight,
        ScenarioKind::Curve,
        ScenarioKind::Intersection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::Curve => "curve",
            ScenarioKind::Intersection => "intersection",
        }
    }

    fn salt(self) -> u64 {
        match self {
            ScenarioKind::Straight => 1,
            ScenarioKind::Curve => 2,
            ScenarioKind::Intersection => 3,
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scenario kind {s:?} (straight, curve, intersection)"))
    }
}

// Road cross-section in meters. Walkways sit 2.5 m off the drivable edge and
// are wide enough that a 10 m observation window around any lane stays
// inside the map bound.
const SHOULDER: f64 = 0.75;
const WALK_GAP: f64 = 2.5;
const WALK_WIDTH: f64 = 7.0;

/// Wraps to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

pub fn generate_scenario(seed: u64, kind: ScenarioKind, n_agents: usize) -> (VectorMap, Vec<Track>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[kind.salt(), n_agents as u64]));
    let rotation = rng.random_range(-PI..PI);
    let shift = Vec2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));

    let (mut map, mut paths) = match kind {
        ScenarioKind::Straight => straight_scene(&mut rng, n_agents),
        ScenarioKind::Curve => curve_scene(&mut rng, n_agents),
        ScenarioKind::Intersection => intersection_scene(&mut rng, n_agents),
    };

    let xf = |p: Vec2| p.rotated(rotation) + shift;
    let mut out = VectorMap::new();
    for layer in SemanticLayerType::MAP_LAYERS {
        for poly in map.polygons(layer).expect("map layer") {
            out.add_polygon(layer, Polygon::new(poly.points.iter().map(|&p| xf(p)).collect()));
        }
    }
    map = out;

    let tracks = paths
        .drain(..)
        .enumerate()
        .map(|(i, path)| {
            let positions: Vec<Vec2> = path.positions.iter().map(|&p| xf(p)).collect();
            Track {
                agent_id: format!("agent{i}"),
                length_m: path.length_m,
                width_m: path.width_m,
                states: states_from_positions(&positions),
            }
        })
        .collect();
    (map, tracks)
}

struct AgentPath {
    positions: Vec<Vec2>,
    length_m: f64,
    width_m: f64,
}

fn agent_dims<R: Rng>(rng: &mut R) -> (f64, f64) {
    (rng.random_range(4.2..5.0), rng.random_range(1.7..2.0))
}

fn n_states<R: Rng>(rng: &mut R) -> usize {
    rng.random_range(18..23)
}

/// Velocity by central difference (one-sided at the ends), acceleration by
/// central difference of velocity, yaw from the velocity direction. Frames
/// start at t = 0 and step by DELTA_T exactly.
fn states_from_positions(positions: &[Vec2]) -> Vec<AgentState> {
    let n = positions.len();
    assert!(n >= 2, "a track needs at least two frames");
    let vel: Vec<Vec2> = (0..n)
        .map(|k| {
            if k == 0 {
                (positions[1] - positions[0]) * (1.0 / DELTA_T)
            } else if k == n - 1 {
                (positions[n - 1] - positions[n - 2]) * (1.0 / DELTA_T)
            } else {
                (positions[k + 1] - positions[k - 1]) * (1.0 / (2.0 * DELTA_T))
            }
        })
        .collect();
    let acc: Vec<Vec2> = (0..n)
        .map(|k| {
            if k == 0 {
                (vel[1] - vel[0]) * (1.0 / DELTA_T)
            } else if k == n - 1 {
                (vel[n - 1] - vel[n - 2]) * (1.0 / DELTA_T)
            } else {
                (vel[k + 1] - vel[k - 1]) * (1.0 / (2.0 * DELTA_T))
            }
        })
        .collect();
    let mut yaw_prev = 0.0;
    (0..n)
        .map(|k| {
            let yaw = if vel[k].norm() > 1e-9 {
                wrap_angle(vel[k].y.atan2(vel[k].x))
            } else {
                yaw_prev
            };
            yaw_prev = yaw;
            AgentState {
                t: k as f64 * DELTA_T,
                pos: positions[k],
                vel: vel[k],
                acc: acc[k],
                yaw,
            }
        })
        .collect()
}

/// Axis-aligned strip along +x covering x in [-half_len, half_len] and
/// y in [lo, hi].
fn strip(half_len: f64, lo: f64, hi: f64) -> Polygon {
    Polygon::new(vec![
        Vec2::new(-half_len, lo),
        Vec2::new(half_len, lo),
        Vec2::new(half_len, hi),
        Vec2::new(-half_len, hi),
    ])
}

fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Polygon {
    Polygon::new(vec![
        Vec2::new(x0, y0),
        Vec2::new(x1, y0),
        Vec2::new(x1, y1),
        Vec2::new(x0, y1),
    ])
}

/// Two-lane road along the x axis with shoulders and walkways on both sides.
fn road_cross_section(map: &mut VectorMap, half_len: f64, lane_w: f64, transpose: bool) {
    let rh = lane_w;
    let mut add = |layer: SemanticLayerType, p: Polygon| {
        let p = if transpose {
            // Rotate the strip onto the y axis (proper rotation, not a flip).
            Polygon::new(p.points.iter().map(|&v| Vec2::new(-v.y, v.x)).collect())
        } else {
            p
        };
        map.add_polygon(layer, p);
    };
    add(SemanticLayerType::DrivableArea, strip(half_len, -rh, rh));
    add(
        SemanticLayerType::RoadSegment,
        strip(half_len, -rh - SHOULDER, rh + SHOULDER),
    );
    add(SemanticLayerType::Lane, strip(half_len, -lane_w, 0.0));
    add(SemanticLayerType::Lane, strip(half_len, 0.0, lane_w));
    add(
        SemanticLayerType::Walkway,
        strip(half_len, rh + WALK_GAP, rh + WALK_GAP + WALK_WIDTH),
    );
    add(
        SemanticLayerType::Walkway,
        strip(half_len, -rh - WALK_GAP - WALK_WIDTH, -rh - WALK_GAP),
    );
}

fn straight_scene<R: Rng>(rng: &mut R, n_agents: usize) -> (VectorMap, Vec<AgentPath>) {
    let half_len = 90.0;
    let lane_w = rng.random_range(3.0..4.0);
    let mut map = VectorMap::new();
    road_cross_section(&mut map, half_len, lane_w, false);

    let paths = (0..n_agents)
        .map(|_| {
            let (length_m, width_m) = agent_dims(rng);
            let n = n_states(rng);
            let lane_off = if rng.random_bool(0.5) { -lane_w / 2.0 } else { lane_w / 2.0 };
            let u = rng.random_range(4.0..11.0);
            let travel = u * DELTA_T * (n - 1) as f64;
            let s0 = rng.random_range(-(half_len - 12.0)..(half_len - 12.0 - travel));
            let positions = (0..n)
                .map(|k| Vec2::new(s0 + u * DELTA_T * k as f64, lane_off))
                .collect();
            AgentPath {
                positions,
                length_m,
                width_m,
            }
        })
        .collect();
    (map, paths)
}

/// Annular band around the origin between radii [r_lo, r_hi], spanning
/// [a_lo, a_hi] radians. Sampled every ~4 degrees; the span stays well below
/// a full turn so the ring never self-intersects.
fn arc_band(r_lo: f64, r_hi: f64, a_lo: f64, a_hi: f64) -> Polygon {
    let steps = (((a_hi - a_lo) / 0.07).ceil() as usize).max(2);
    let mut points = Vec::with_capacity(2 * (steps + 1));
    for i in 0..=steps {
        let a = a_lo + (a_hi - a_lo) * i as f64 / steps as f64;
        points.push(Vec2::new(r_hi * a.cos(), r_hi * a.sin()));
    }
    for i in (0..=steps).rev() {
        let a = a_lo + (a_hi - a_lo) * i as f64 / steps as f64;
        points.push(Vec2::new(r_lo * a.cos(), r_lo * a.sin()));
    }
    Polygon::new(points)
}

fn curve_scene<R: Rng>(rng: &mut R, n_agents: usize) -> (VectorMap, Vec<AgentPath>) {
    let lane_w = rng.random_range(3.0..4.0);
    let rh = lane_w;
    let radius = rng.random_range(26.0..45.0);
    let arc_margin = 25.0;

    let mut paths = Vec::with_capacity(n_agents);
    let mut max_arc: f64 = 0.0;
    for _ in 0..n_agents {
        let (length_m, width_m) = agent_dims(rng);
        let n = n_states(rng);
        // Keep the total angular span under 4.5 rad so the band polygon
        // stays simple.
        let u_cap = (radius * 4.5 - 2.0 * arc_margin) / (DELTA_T * (n - 1) as f64);
        let u = rng.random_range(4.0..u_cap.min(9.0));
        let lane_off = if rng.random_bool(0.5) { -lane_w / 2.0 } else { lane_w / 2.0 };
        let r_lane = radius + lane_off;
        let track_arc = u * DELTA_T * (n - 1) as f64;
        max_arc = max_arc.max(track_arc);
        let direction = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let positions = (0..n)
            .map(|k| {
                let a = direction * u * DELTA_T * k as f64 / r_lane;
                Vec2::new(r_lane * a.cos(), r_lane * a.sin())
            })
            .collect();
        paths.push(AgentPath {
            positions,
            length_m,
            width_m,
        });
    }

    // One band wide enough for every agent, symmetric around angle 0 where
    // all tracks start.
    let span = (max_arc + arc_margin) / radius;
    let (a_lo, a_hi) = (-span, span);
    let mut map = VectorMap::new();
    map.add_polygon(
        SemanticLayerType::DrivableArea,
        arc_band(radius - rh, radius + rh, a_lo, a_hi),
    );
    map.add_polygon(
        SemanticLayerType::RoadSegment,
        arc_band(radius - rh - SHOULDER, radius + rh + SHOULDER, a_lo, a_hi),
    );
    map.add_polygon(
        SemanticLayerType::Lane,
        arc_band(radius - lane_w, radius, a_lo, a_hi),
    );
    map.add_polygon(
        SemanticLayerType::Lane,
        arc_band(radius, radius + lane_w, a_lo, a_hi),
    );
    map.add_polygon(
        SemanticLayerType::Walkway,
        arc_band(radius + rh + WALK_GAP, radius + rh + WALK_GAP + WALK_WIDTH, a_lo, a_hi),
    );
    map.add_polygon(
        SemanticLayerType::Walkway,
        arc_band(radius - rh - WALK_GAP - WALK_WIDTH, radius - rh - WALK_GAP, a_lo, a_hi),
    );
    (map, paths)
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Piecewise path through the junction: straight approach along +x, optional
/// quarter-circle turn, straight exit. Parameterized by arclength.
enum JunctionPath {
    Through {
        x_start: f64,
        y_lane: f64,
    },
    Turn {
        x_start: f64,
        y_in: f64,
        /// Arc center; entry at (center.x, y_in), exit at (x_out, center.y).
        center: Vec2,
        radius: f64,
        /// +1 turns left (exit along +y), -1 turns right (exit along -y).
        side: f64,
    },
}

impl JunctionPath {
    fn arc_start(&self) -> f64 {
        match self {
            JunctionPath::Through { .. } => f64::INFINITY,
            JunctionPath::Turn { x_start, center, .. } => center.x - x_start,
        }
    }

    fn arc_len(&self) -> f64 {
        match self {
            JunctionPath::Through { .. } => 0.0,
            JunctionPath::Turn { radius, .. } => radius * PI / 2.0,
        }
    }

    fn position(&self, s: f64) -> Vec2 {
        match self {
            JunctionPath::Through { x_start, y_lane } => Vec2::new(x_start + s, *y_lane),
            JunctionPath::Turn {
                x_start,
                y_in,
                center,
                radius,
                side,
            } => {
                let sa = self.arc_start();
                if s <= sa {
                    Vec2::new(x_start + s, *y_in)
                } else if s <= sa + self.arc_len() {
                    // Entry point sits at angle -side * pi/2 from the center;
                    // the angle advances by side * (s - sa) / radius.
                    let a = -side * PI / 2.0 + side * (s - sa) / radius;
                    *center + Vec2::new(radius * a.cos(), radius * a.sin())
                } else {
                    let along = s - sa - self.arc_len();
                    Vec2::new(center.x + radius, center.y + side * along)
                }
            }
        }
    }
}

fn intersection_scene<R: Rng>(rng: &mut R, n_agents: usize) -> (VectorMap, Vec<AgentPath>) {
    let half_len = 70.0;
    let lane_w = rng.random_range(3.0..4.0);
    let rh = lane_w;
    let mut map = VectorMap::new();

    // Both roads share the cross-section; walkways are added per quadrant so
    // they do not cross the junction itself.
    for transpose in [false, true] {
        let mut add = |layer: SemanticLayerType, p: Polygon| {
            let p = if transpose {
                Polygon::new(p.points.iter().map(|&v| Vec2::new(-v.y, v.x)).collect())
            } else {
                p
            };
            map.add_polygon(layer, p);
        };
        add(SemanticLayerType::DrivableArea, strip(half_len, -rh, rh));
        add(
            SemanticLayerType::RoadSegment,
            strip(half_len, -rh - SHOULDER, rh + SHOULDER),
        );
        add(SemanticLayerType::Lane, strip(half_len, -lane_w, 0.0));
        add(SemanticLayerType::Lane, strip(half_len, 0.0, lane_w));
        let (wlo, whi) = (rh + WALK_GAP, rh + WALK_GAP + WALK_WIDTH);
        for (x0, x1) in [(wlo, half_len), (-half_len, -wlo)] {
            add(SemanticLayerType::Walkway, rect(x0, x1, wlo, whi));
            add(SemanticLayerType::Walkway, rect(x0, x1, -whi, -wlo));
        }
    }

    let paths = (0..n_agents)
        .map(|_| {
            let (length_m, width_m) = agent_dims(rng);
            let n = n_states(rng);
            let rotate_approach = rng.random_bool(0.5);
            let y_in = -lane_w / 2.0;

            let (path, u0, u_slow, slow_center, slow_halfwidth) = if rng.random_bool(0.5) {
                let x_start = -rng.random_range(35.0..45.0);
                let u0 = rng.random_range(5.0..8.0);
                // Smooth dip through the junction.
                let p = JunctionPath::Through { x_start, y_lane: y_in };
                (p, u0, 0.65 * u0, -x_start, 8.0)
            } else {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let radius = rng.random_range(6.0..12.0);
                let x_out = -side * lane_w / 2.0;
                let center = Vec2::new(x_out - radius, y_in + side * radius);
                let x_start = center.x - rng.random_range(25.0..32.0);
                let p = JunctionPath::Turn {
                    x_start,
                    y_in,
                    center,
                    radius,
                    side,
                };
                let u0 = rng.random_range(5.0..7.5);
                let mid = p.arc_start() + p.arc_len() / 2.0;
                let half = p.arc_len() / 2.0;
                (p, u0, rng.random_range(2.5..4.0), mid, half)
            };

            // March along the path with a speed profile that eases toward
            // u_slow near the junction maneuver.
            let speed = |s: f64| {
                let d = ((s - slow_center).abs() - slow_halfwidth).max(0.0);
                u_slow + (u0 - u_slow) * smoothstep(d / 30.0)
            };
            let mut s = 0.0;
            let positions = (0..n)
                .map(|_| {
                    let p = path.position(s);
                    s += DELTA_T * speed(s);
                    p
                })
                .map(|p| {
                    if rotate_approach {
                        Vec2::new(-p.y, p.x)
                    } else {
                        p
                    }
                })
                .collect();
            AgentPath {
                positions,
                length_m,
                width_m,
            }
        })
        .collect();
    (map, paths)
}
