//! Physics baselines. The plain baseline extrapolates the last velocity
//! vector. The oracle rolls out four kinematic models (constant velocity,
//! constant acceleration, constant turn rate with constant speed or with
//! constant tangential acceleration) and keeps, per sample, the rollout
//! closest to the actual future, so it lower-bounds what physics alone can
//! explain.

use crate::error::Result;
use crate::map::sample::Sample;
use crate::map::synth::wrap_angle;
use crate::map::{AgentState, DELTA_T};
use crate::train::metrics::Predictor;

const OMEGA_EPS: f64 = 1e-6;

/// Yaw rate from the last two observed headings, zero for a single frame.
pub fn turn_rate(observed: &[AgentState]) -> f64 {
    match observed {
        [.., prev, last] => wrap_angle(last.yaw - prev.yaw) / DELTA_T,
        _ => 0.0,
    }
}

/// Acceleration component along the heading.
fn tangential_accel(s: &AgentState) -> f64 {
    s.acc.x * s.yaw.cos() + s.acc.y * s.yaw.sin()
}

fn horizon_times(tau: usize) -> impl Iterator<Item = f64> {
    (0..tau).map(|j| (j + 1) as f64 * DELTA_T)
}

/// Rollout of the last velocity vector over `tau` steps.
pub fn constant_velocity(s: &AgentState, tau: usize) -> Vec<[f64; 2]> {
    horizon_times(tau).map(|t| [s.vel.x * t, s.vel.y * t]).collect()
}

/// Rollout of the last velocity and acceleration vectors.
pub fn constant_acceleration(s: &AgentState, tau: usize) -> Vec<[f64; 2]> {
    horizon_times(tau)
        .map(|t| {
            [
                s.vel.x * t + 0.5 * s.acc.x * t * t,
                s.vel.y * t + 0.5 * s.acc.y * t * t,
            ]
        })
        .collect()
}

/// Circular-arc rollout at fixed speed and yaw rate `omega`; degenerates to
/// a straight rollout when the turn rate is negligible.
pub fn constant_turn_constant_speed(s: &AgentState, omega: f64, tau: usize) -> Vec<[f64; 2]> {
    let speed = s.speed();
    let (sin0, cos0) = s.yaw.sin_cos();
    if omega.abs() < OMEGA_EPS {
        return horizon_times(tau).map(|t| [speed * t * cos0, speed * t * sin0]).collect();
    }
    horizon_times(tau)
        .map(|t| {
            let (sin_t, cos_t) = (s.yaw + omega * t).sin_cos();
            [(speed / omega) * (sin_t - sin0), -(speed / omega) * (cos_t - cos0)]
        })
        .collect()
}

/// Spiral rollout with fixed yaw rate and fixed tangential acceleration.
pub fn constant_turn_constant_accel(s: &AgentState, omega: f64, tau: usize) -> Vec<[f64; 2]> {
    let speed = s.speed();
    let accel = tangential_accel(s);
    let (sin0, cos0) = s.yaw.sin_cos();
    if omega.abs() < OMEGA_EPS {
        return horizon_times(tau)
            .map(|t| {
                let arc = speed * t + 0.5 * accel * t * t;
                [arc * cos0, arc * sin0]
            })
            .collect();
    }
    horizon_times(tau)
        .map(|t| {
            let (sin_t, cos_t) = (s.yaw + omega * t).sin_cos();
            let x = (speed / omega) * (sin_t - sin0)
                + accel * ((cos_t - cos0) / (omega * omega) + t * sin_t / omega);
            let y = -(speed / omega) * (cos_t - cos0)
                + accel * ((sin_t - sin0) / (omega * omega) - t * cos_t / omega);
            [x, y]
        })
        .collect()
}

/// Extrapolates the last observed velocity vector.
pub struct ConstantVelocityBaseline;

impl Predictor for ConstantVelocityBaseline {
    fn name(&self) -> &str {
        "cvh"
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<[f64; 2]>> {
        Ok(constant_velocity(sample.current(), sample.tau))
    }
}

pub const PHYSICS_MODELS: [&str; 4] = ["cvh", "cah", "ctrv", "ctra"];

/// Best-of-four kinematic rollouts, judged against the sample's future.
pub struct PhysicsOracle;

impl PhysicsOracle {
    /// The winning model name and its rollout. Ties keep the earlier entry
    /// of [`PHYSICS_MODELS`].
    pub fn select(sample: &Sample) -> (&'static str, Vec<[f64; 2]>) {
        let s = sample.current();
        let omega = turn_rate(&sample.observed);
        let candidates = [
            constant_velocity(s, sample.tau),
            constant_acceleration(s, sample.tau),
            constant_turn_constant_speed(s, omega, sample.tau),
            constant_turn_constant_accel(s, omega, sample.tau),
        ];
        let cost = |pred: &[[f64; 2]]| -> f64 {
            pred.iter()
                .zip(&sample.target)
                .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
                .sum()
        };
        let mut best = 0;
        let mut best_cost = cost(&candidates[0]);
        for (k, cand) in candidates.iter().enumerate().skip(1) {
            let c = cost(cand);
            if c < best_cost {
                best = k;
                best_cost = c;
            }
        }
        let [cv, ca, ctrv, ctra] = candidates;
        let rollout = match best {
            0 => cv,
            1 => ca,
            2 => ctrv,
            _ => ctra,
        };
        (PHYSICS_MODELS[best], rollout)
    }
}

impl Predictor for PhysicsOracle {
    fn name(&self) -> &str {
        "physics_oracle"
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<[f64; 2]>> {
        Ok(PhysicsOracle::select(sample).1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::Vec2;

    fn state(vel: (f64, f64), acc: (f64, f64), yaw: f64) -> AgentState {
        AgentState {
            t: 2.0,
            pos: Vec2 { x: 100.0, y: -40.0 },
            vel: Vec2 { x: vel.0, y: vel.1 },
            acc: Vec2 { x: acc.0, y: acc.1 },
            yaw,
        }
    }

    fn sample_from(states: Vec<AgentState>, target: Vec<[f64; 2]>) -> Sample {
        Sample {
            scenario_id: "s".into(),
            agent_id: "a".into(),
            rho: states.len(),
            tau: target.len(),
            out_px: 1,
            features: vec![],
            chunks: vec![],
            chunk_origins: vec![],
            target,
            observed: states,
            off_map: false,
        }
    }

    #[test]
    fn constant_velocity_scales_linearly() {
        let s = state((2.0, -1.0), (9.9, 9.9), 0.3);
        let pred = constant_velocity(&s, 4);
        assert_eq!(pred[0], [1.0, -0.5]);
        assert_eq!(pred[3], [4.0, -2.0]);
    }

    #[test]
    fn constant_acceleration_adds_quadratic_term() {
        let s = state((2.0, 0.0), (1.0, -2.0), 0.0);
        let pred = constant_acceleration(&s, 2);
        // t = 0.5: [1 + 0.125, -0.25]; t = 1: [2 + 0.5, -1].
        assert!((pred[0][0] - 1.125).abs() < 1e-12);
        assert!((pred[0][1] + 0.25).abs() < 1e-12);
        assert!((pred[1][0] - 2.5).abs() < 1e-12);
        assert!((pred[1][1] + 1.0).abs() < 1e-12);
        let coasting = state((2.0, 0.0), (0.0, 0.0), 0.0);
        assert_eq!(constant_acceleration(&coasting, 4), constant_velocity(&coasting, 4));
    }

    #[test]
    fn turn_rollout_traces_a_circle() {
        use std::f64::consts::FRAC_PI_2;
        // Quarter turn per second: radius = speed / omega.
        let speed = 4.0;
        let omega = FRAC_PI_2;
        let s = state((speed, 0.0), (0.0, 0.0), 0.0);
        let pred = constant_turn_constant_speed(&s, omega, 2);
        let r = speed / omega;
        for (j, p) in pred.iter().enumerate() {
            let t = (j + 1) as f64 * DELTA_T;
            let want = [r * (omega * t).sin(), r * (1.0 - (omega * t).cos())];
            assert!((p[0] - want[0]).abs() < 1e-12, "step {j}");
            assert!((p[1] - want[1]).abs() < 1e-12);
        }
        // Heading after a full second is vertical, displacement (r, r).
        assert!((pred[1][0] - r).abs() < 1e-12);
        assert!((pred[1][1] - r).abs() < 1e-12);
    }

    #[test]
    fn zero_turn_rate_falls_back_to_heading_line() {
        let s = state((3.0, 4.0), (0.0, 0.0), 0.5);
        let pred = constant_turn_constant_speed(&s, 0.0, 3);
        let speed = 5.0;
        for (j, p) in pred.iter().enumerate() {
            let t = (j + 1) as f64 * DELTA_T;
            assert!((p[0] - speed * t * 0.5f64.cos()).abs() < 1e-12);
            assert!((p[1] - speed * t * 0.5f64.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn accelerating_turn_matches_numeric_integration() {
        let s = state((3.0, 1.0), (0.9, 0.6), 0.4);
        let omega = 0.7;
        let tau = 6;
        let pred = constant_turn_constant_accel(&s, omega, tau);
        let speed0 = s.speed();
        let accel = tangential_accel(&s);
        let dt = 1e-5;
        let mut x = 0.0;
        let mut y = 0.0;
        let mut t = 0.0;
        for (j, p) in pred.iter().enumerate() {
            let t_end = (j + 1) as f64 * DELTA_T;
            while t < t_end - dt / 2.0 {
                let heading = s.yaw + omega * (t + dt / 2.0);
                let speed = speed0 + accel * (t + dt / 2.0);
                x += speed * heading.cos() * dt;
                y += speed * heading.sin() * dt;
                t += dt;
            }
            assert!((p[0] - x).abs() < 1e-4, "step {j}: {} vs {x}", p[0]);
            assert!((p[1] - y).abs() < 1e-4, "step {j}: {} vs {y}", p[1]);
        }
        let coasting = constant_turn_constant_accel(&state((3.0, 0.0), (0.0, 0.0), 0.0), omega, tau);
        let ctrv = constant_turn_constant_speed(&state((3.0, 0.0), (0.0, 0.0), 0.0), omega, tau);
        for (a, b) in coasting.iter().zip(&ctrv) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_matches_the_generating_model() {
        // Future generated by pure acceleration along x: cah fits exactly.
        let s = state((2.0, 0.0), (1.5, 0.0), 0.0);
        let target = constant_acceleration(&s, 8);
        let sample = sample_from(vec![s], target.clone());
        let (name, rollout) = PhysicsOracle::select(&sample);
        assert_eq!(name, "cah");
        assert_eq!(rollout, target);

        // Future on a circle at constant speed: ctrv fits exactly.
        let prev = AgentState {
            yaw: -0.35,
            ..state((4.0, 0.0), (0.0, 0.0), 0.0)
        };
        let cur = state((4.0, 0.0), (0.0, 0.0), 0.0);
        let omega = turn_rate(&[prev, cur]);
        assert!((omega - 0.7).abs() < 1e-12);
        let target = constant_turn_constant_speed(&cur, omega, 8);
        let sample = sample_from(vec![prev, cur], target.clone());
        let (name, rollout) = PhysicsOracle::select(&sample);
        assert_eq!(name, "ctrv");
        assert_eq!(rollout, target);
    }

    #[test]
    fn oracle_ties_keep_declaration_order() {
        // Zero acceleration and zero turn make all four rollouts identical.
        let s = state((3.0, 0.0), (0.0, 0.0), 0.0);
        let target = constant_velocity(&s, 6);
        let sample = sample_from(vec![s, s], target);
        let (name, _) = PhysicsOracle::select(&sample);
        assert_eq!(name, "cvh");
    }

    #[test]
    fn oracle_never_beats_its_own_components() {
        // The oracle cost is the minimum over rollouts, so its error per
        // sample is never above the plain baseline's.
        let prev = state((4.0, 0.2), (0.3, -0.1), 0.1);
        let cur = state((4.1, 0.4), (0.3, -0.1), 0.22);
        let target: Vec<[f64; 2]> = (0..10).map(|j| [(j as f64) * 2.1, (j as f64).sin()]).collect();
        let sample = sample_from(vec![prev, cur], target.clone());
        let err = |pred: &[[f64; 2]]| -> f64 {
            pred.iter()
                .zip(&target)
                .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
                .sum()
        };
        let (_, oracle) = PhysicsOracle::select(&sample);
        let cvh = ConstantVelocityBaseline.predict(&sample).unwrap();
        assert!(err(&oracle) <= err(&cvh) + 1e-12);
    }
}
