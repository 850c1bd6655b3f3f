//! Microscopic vehicle kinematics on a closed path.
//!
//! Vehicles are points on a 1D arc (the path loop) with a length that only
//! matters for bumper-to-bumper gaps. Longitudinal dynamics use a first-order
//! actuation lag followed by semi-implicit Euler integration.

use serde::{Deserialize, Serialize};

use crate::control::Mode;
use crate::geometry::Point2;

/// Closed polyline with precomputed cumulative arc lengths.
#[derive(Clone, Debug)]
pub struct Path {
    waypoints: Vec<Point2>,
    /// `cumulative[i]` is the arc length at `waypoints[i]`.
    cumulative: Vec<f64>,
}

impl Path {
    /// `waypoints` must describe a closed loop (first == last).
    pub fn new(waypoints: Vec<Point2>) -> Path {
        let mut cumulative = Vec::with_capacity(waypoints.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in waypoints.windows(2) {
            acc += w[0].distance(w[1]);
            cumulative.push(acc);
        }
        Path { waypoints, cumulative }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    pub fn waypoints(&self) -> &[Point2] {
        &self.waypoints
    }

    pub fn cumulative_lengths(&self) -> &[f64] {
        &self.cumulative
    }

    /// Wraps an arc length into `[0, length)`.
    pub fn wrap(&self, s: f64) -> f64 {
        let len = self.length();
        let w = s.rem_euclid(len);
        // rem_euclid can round up to `len` for tiny negative inputs.
        if w >= len {
            0.0
        } else {
            w
        }
    }

    /// Linear interpolation along the loop at arc length `s` (wrapped).
    pub fn position(&self, s: f64) -> Point2 {
        let s = self.wrap(s);
        // index of the segment containing s
        let seg = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).expect("finite arc length"))
        {
            Ok(i) => i.min(self.waypoints.len() - 2),
            Err(i) => i - 1,
        };
        let seg_len = self.cumulative[seg + 1] - self.cumulative[seg];
        if seg_len == 0.0 {
            return self.waypoints[seg];
        }
        let u = (s - self.cumulative[seg]) / seg_len;
        self.waypoints[seg].lerp(self.waypoints[seg + 1], u)
    }
}

/// Free function form of [`Path::position`].
pub fn path_position(path: &Path, s: f64) -> Point2 {
    path.position(s)
}

fn default_length() -> f64 {
    4.0
}
fn default_max_accel() -> f64 {
    2.5
}
fn default_max_decel() -> f64 {
    6.0
}
fn default_tau() -> f64 {
    0.5
}

/// Static description of one vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub id: String,
    #[serde(default = "default_length")]
    pub length: f64,
    pub initial_s: f64,
    pub initial_speed: f64,
    #[serde(default = "default_max_accel")]
    pub max_accel: f64,
    /// Braking limit as a positive magnitude.
    #[serde(default = "default_max_decel")]
    pub max_decel: f64,
    /// Actuation time constant, seconds.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl VehicleSpec {
    pub fn clamp_accel(&self, a: f64) -> f64 {
        a.clamp(-self.max_decel, self.max_accel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VehicleState {
    pub id: String,
    /// Arc position in `[0, path_length)`.
    pub s: f64,
    pub speed: f64,
    /// Actuated acceleration.
    pub accel: f64,
    /// Last commanded acceleration (before clamping).
    pub accel_cmd: f64,
    /// Controller mode for followers; `None` for the platoon leader.
    pub mode: Option<Mode>,
}

impl VehicleState {
    pub fn initial(spec: &VehicleSpec, mode: Option<Mode>) -> Self {
        VehicleState {
            id: spec.id.clone(),
            s: spec.initial_s,
            speed: spec.initial_speed,
            accel: 0.0,
            accel_cmd: 0.0,
            mode,
        }
    }
}

fn default_v_low() -> f64 {
    15.0
}
fn default_v_high() -> f64 {
    25.0
}
fn default_period() -> f64 {
    10.0
}

/// Leader speed target: a square wave between `v_high` and `v_low`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderProfile {
    #[serde(default = "default_v_low")]
    pub v_low: f64,
    #[serde(default = "default_v_high")]
    pub v_high: f64,
    #[serde(default = "default_period")]
    pub period: f64,
}

impl Default for LeaderProfile {
    fn default() -> Self {
        LeaderProfile { v_low: default_v_low(), v_high: default_v_high(), period: default_period() }
    }
}

impl LeaderProfile {
    pub fn v_mean(&self) -> f64 {
        0.5 * (self.v_low + self.v_high)
    }
}

/// `v_high` on `[0, period)`, `v_low` on `[period, 2 period)`, repeating.
pub fn leader_target_speed(t: f64, profile: &LeaderProfile) -> f64 {
    // Guard against 9.999999 vs 10 style rounding at the toggle instants.
    let phase = ((t / profile.period) + 1e-9).floor() as i64;
    if phase.rem_euclid(2) == 0 {
        profile.v_high
    } else {
        profile.v_low
    }
}

/// First-order actuation lag then semi-implicit Euler.
pub fn step_vehicle(
    state: &VehicleState,
    spec: &VehicleSpec,
    accel_cmd: f64,
    dt: f64,
    path_length: f64,
) -> VehicleState {
    debug_assert!(dt > 0.0);
    let target = spec.clamp_accel(accel_cmd);
    let accel = state.accel + dt * (target - state.accel) / spec.tau;
    let speed = (state.speed + accel * dt).max(0.0);
    let mut s = (state.s + speed * dt).rem_euclid(path_length);
    if s >= path_length {
        s = 0.0;
    }
    VehicleState {
        id: state.id.clone(),
        s,
        speed,
        accel,
        accel_cmd,
        mode: state.mode,
    }
}

/// Bumper-to-bumper distance from `follower` to the vehicle in front.
pub fn gap_front(
    follower: &VehicleState,
    front: &VehicleState,
    path_length: f64,
    front_length: f64,
) -> f64 {
    arc_gap(follower.s, front.s, path_length, front_length)
}

/// [`gap_front`] on bare arc positions.
pub fn arc_gap(follower_s: f64, front_s: f64, path_length: f64, front_length: f64) -> f64 {
    (front_s - follower_s).rem_euclid(path_length) - front_length
}

/// Source of vehicle kinematics for the orchestrator. The built-in engine
/// integrates [`step_vehicle`]; an external mobility simulator could provide
/// the same surface.
pub trait MobilityEngine {
    fn path(&self) -> &Path;
    fn states(&self) -> &[VehicleState];
    /// Advance every vehicle by `dt` under the given commands (config order).
    fn advance(&mut self, accel_cmds: &[f64], dt: f64);
    fn set_mode(&mut self, index: usize, mode: Option<Mode>);
}

pub struct BuiltinMobility {
    path: Path,
    specs: Vec<VehicleSpec>,
    states: Vec<VehicleState>,
}

impl BuiltinMobility {
    pub fn new(path: Path, specs: Vec<VehicleSpec>) -> Self {
        let states = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| VehicleState::initial(spec, if i == 0 { None } else { Some(Mode::Cacc) }))
            .collect();
        BuiltinMobility { path, specs, states }
    }

    pub fn specs(&self) -> &[VehicleSpec] {
        &self.specs
    }
}

impl MobilityEngine for BuiltinMobility {
    fn path(&self) -> &Path {
        &self.path
    }

    fn states(&self) -> &[VehicleState] {
        &self.states
    }

    fn advance(&mut self, accel_cmds: &[f64], dt: f64) {
        let len = self.path.length();
        for ((state, spec), &cmd) in self.states.iter_mut().zip(&self.specs).zip(accel_cmds) {
            *state = step_vehicle(state, spec, cmd, dt, len);
        }
    }

    fn set_mode(&mut self, index: usize, mode: Option<Mode>) {
        self.states[index].mode = mode;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_path() -> Path {
        Path::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(100.0, 0.0),
            Point2::new(100.0, 100.0),
            Point2::new(0.0, 100.0),
            Point2::new(0.0, 0.0),
        ])
    }

    fn spec() -> VehicleSpec {
        VehicleSpec {
            id: "v".into(),
            length: 4.0,
            initial_s: 0.0,
            initial_speed: 20.0,
            max_accel: 2.5,
            max_decel: 6.0,
            tau: 0.5,
        }
    }

    fn state(s: f64, speed: f64, accel: f64) -> VehicleState {
        VehicleState { id: "v".into(), s, speed, accel, accel_cmd: 0.0, mode: None }
    }

    #[test]
    fn path_interpolation() {
        let p = square_path();
        assert_eq!(p.length(), 400.0);
        assert_eq!(p.position(0.0), Point2::new(0.0, 0.0));
        assert_eq!(p.position(50.0), Point2::new(50.0, 0.0));
        assert_eq!(p.position(410.0), p.position(10.0));
        assert_eq!(p.position(150.0), Point2::new(100.0, 50.0));
        assert_eq!(p.position(-10.0), Point2::new(0.0, 10.0));
        assert_eq!(p.position(100.0), Point2::new(100.0, 0.0));
    }

    #[test]
    fn leader_square_wave() {
        let prof = LeaderProfile::default();
        assert_eq!(leader_target_speed(0.0, &prof), 25.0);
        assert_eq!(leader_target_speed(9.99, &prof), 25.0);
        assert_eq!(leader_target_speed(10.0, &prof), 15.0);
        assert_eq!(leader_target_speed(25.0, &prof), 25.0);
        assert_eq!(prof.v_mean(), 20.0);
    }

    #[test]
    fn step_examples() {
        let sp = spec();
        let next = step_vehicle(&state(0.0, 20.0, 0.0), &sp, 0.0, 0.01, 400.0);
        assert!((next.s - 0.2).abs() < 1e-12);

        let next = step_vehicle(&state(0.0, 20.0, 0.0), &sp, 1.0, 0.01, 400.0);
        // 0 + 0.01 * (1 - 0) / 0.5
        assert!((next.accel - 0.02).abs() < 1e-15);

        let next = step_vehicle(&state(0.0, 0.0, -6.0), &sp, -6.0, 0.01, 400.0);
        assert_eq!(next.speed, 0.0);
        assert_eq!(next.s, 0.0);
    }

    #[test]
    fn command_is_clamped() {
        let sp = spec();
        let next = step_vehicle(&state(0.0, 20.0, 0.0), &sp, 100.0, 0.01, 400.0);
        assert!((next.accel - 0.01 * 2.5 / 0.5).abs() < 1e-15);
        assert_eq!(next.accel_cmd, 100.0);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap_front(&state(100.0, 0.0, 0.0), &state(109.0, 0.0, 0.0), 400.0, 4.0), 5.0);
        assert_eq!(gap_front(&state(396.0, 0.0, 0.0), &state(2.0, 0.0, 0.0), 400.0, 4.0), 2.0);
        let platoon: Vec<_> = (0..4).map(|i| state(200.0 - 9.0 * i as f64, 20.0, 0.0)).collect();
        for w in platoon.windows(2) {
            assert_eq!(gap_front(&w[1], &w[0], 400.0, 4.0), 5.0);
        }
    }
}
