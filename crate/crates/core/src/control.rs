//! Cooperative (CACC) and radar-only (ACC) longitudinal controllers, the
//! delay-triggered fallback state machine, and the platooning beacon.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::mobility::{LeaderProfile, VehicleState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "CACC")]
    Cacc,
    #[serde(rename = "ACC")]
    Acc,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Cacc => "CACC",
            Mode::Acc => "ACC",
        })
    }
}

fn default_gap_des() -> f64 {
    5.0
}
fn default_c1() -> f64 {
    0.5
}
fn default_xi() -> f64 {
    1.0
}
fn default_omega_n() -> f64 {
    0.2 * 2.0 * std::f64::consts::PI
}
fn default_headway() -> f64 {
    1.2
}
fn default_lambda() -> f64 {
    0.1
}
fn default_leader_gain() -> f64 {
    0.15
}
fn default_control_period() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerParams {
    /// CACC constant spacing, meters.
    #[serde(default = "default_gap_des")]
    pub gap_des: f64,
    /// Weight of the leader in the CACC law.
    #[serde(default = "default_c1")]
    pub c1: f64,
    /// Damping ratio.
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// Bandwidth, rad/s.
    #[serde(default = "default_omega_n")]
    pub omega_n: f64,
    /// ACC time headway, seconds.
    #[serde(default = "default_headway")]
    pub headway: f64,
    /// ACC spacing-error gain, 1/s.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Proportional speed gain of the leader, 1/s.
    #[serde(default = "default_leader_gain")]
    pub leader_gain: f64,
    /// Beacon period, seconds.
    #[serde(default = "default_control_period")]
    pub control_period: f64,
    #[serde(default)]
    pub leader_profile: LeaderProfile,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams {
            gap_des: default_gap_des(),
            c1: default_c1(),
            xi: default_xi(),
            omega_n: default_omega_n(),
            headway: default_headway(),
            lambda: default_lambda(),
            leader_gain: default_leader_gain(),
            control_period: default_control_period(),
            leader_profile: LeaderProfile::default(),
        }
    }
}

/// The five gains of the consensus CACC law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaccGains {
    pub front_accel: f64,
    pub leader_accel: f64,
    pub front_speed_diff: f64,
    pub leader_speed_diff: f64,
    pub spacing: f64,
}

impl CaccGains {
    pub fn from_params(p: &ControllerParams) -> Self {
        let root = p.xi + (p.xi * p.xi - 1.0).sqrt();
        CaccGains {
            front_accel: 1.0 - p.c1,
            leader_accel: p.c1,
            front_speed_diff: -(2.0 * p.xi - p.c1 * root) * p.omega_n,
            leader_speed_diff: -root * p.omega_n * p.c1,
            spacing: -p.omega_n * p.omega_n,
        }
    }
}

/// Consensus-style constant spacing controller.
///
/// `gap` is the measured bumper-to-bumper distance to the front vehicle.
pub fn cacc_accel(
    ego: &VehicleState,
    front: &ControlMessage,
    leader: &ControlMessage,
    gap: f64,
    p: &ControllerParams,
) -> f64 {
    let g = CaccGains::from_params(p);
    // positive when too close
    let spacing_err = -(gap - p.gap_des);
    g.front_accel * front.accel
        + g.leader_accel * leader.accel
        + g.front_speed_diff * (ego.speed - front.speed)
        + g.leader_speed_diff * (ego.speed - leader.speed)
        + g.spacing * spacing_err
}

/// Constant time-headway ACC on radar gap and front speed.
pub fn acc_accel(ego: &VehicleState, gap: f64, front_speed: f64, p: &ControllerParams) -> f64 {
    let err = -gap + p.headway * ego.speed;
    let err_rate = ego.speed - front_speed;
    -(err_rate + p.lambda * err) / p.headway
}

/// Proportional tracking of the leader's speed profile, clamped to limits.
pub fn leader_accel(ego: &VehicleState, target_speed: f64, gain: f64, max_accel: f64, max_decel: f64) -> f64 {
    (gain * (target_speed - ego.speed)).clamp(-max_decel, max_accel)
}

fn default_delay_high() -> f64 {
    0.300
}
fn default_delay_low() -> f64 {
    0.100
}
fn default_recovery_window() -> f64 {
    5.0
}
fn default_stale_periods() -> u32 {
    3
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FallbackParams {
    #[serde(default = "default_delay_high")]
    pub delay_high: f64,
    #[serde(default = "default_delay_low")]
    pub delay_low: f64,
    #[serde(default = "default_recovery_window")]
    pub recovery_window: f64,
    /// Control periods without any packet before a synthetic delay sample
    /// is fed to the state machine.
    #[serde(default = "default_stale_periods")]
    pub stale_periods: u32,
    /// When false, followers stay in CACC regardless of delay.
    #[serde(default = "default_true")]
    pub enabled: bool,
}

impl Default for FallbackParams {
    fn default() -> Self {
        FallbackParams {
            delay_high: default_delay_high(),
            delay_low: default_delay_low(),
            recovery_window: default_recovery_window(),
            stale_periods: default_stale_periods(),
            enabled: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FallbackState {
    pub mode: Mode,
    /// Start of the current uninterrupted run of samples below `delay_low`.
    /// Only set in ACC mode.
    pub good_since: Option<f64>,
}

impl Default for FallbackState {
    fn default() -> Self {
        FallbackState { mode: Mode::Cacc, good_since: None }
    }
}

pub fn fallback_step(fsm: FallbackState, delay_sample: f64, now: f64, p: &FallbackParams) -> FallbackState {
    match fsm.mode {
        Mode::Cacc if delay_sample > p.delay_high => FallbackState { mode: Mode::Acc, good_since: None },
        Mode::Cacc => fsm,
        Mode::Acc if delay_sample < p.delay_low => {
            let since = fsm.good_since.unwrap_or(now);
            // Small slack so 50 samples at 0.1 s reach a 5 s window despite rounding.
            if now - since >= p.recovery_window - 1e-9 {
                FallbackState { mode: Mode::Cacc, good_since: None }
            } else {
                FallbackState { mode: Mode::Acc, good_since: Some(since) }
            }
        }
        Mode::Acc => FallbackState { mode: Mode::Acc, good_since: None },
    }
}

/// Platooning beacon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlMessage {
    pub sender_id: String,
    pub seq: u64,
    pub pos_s: f64,
    pub speed: f64,
    pub accel: f64,
    /// Send time, simulated nanoseconds.
    pub ts_l4: u64,
}

impl ControlMessage {
    pub fn sent_at(&self) -> f64 {
        self.ts_l4 as f64 * 1e-9
    }

    /// `now - ts_l4`, seconds.
    pub fn delay_at(&self, now: f64) -> f64 {
        now - self.sent_at()
    }
}

pub fn secs_to_nanos(t: f64) -> u64 {
    (t * 1e9).round() as u64
}

pub fn make_control_msg(state: &VehicleState, seq: u64, now: f64) -> ControlMessage {
    ControlMessage {
        sender_id: state.id.clone(),
        seq,
        pos_s: state.s,
        speed: state.speed,
        accel: state.accel,
        ts_l4: secs_to_nanos(now),
    }
}

/// Per-vehicle beacon sequence counter.
#[derive(Clone, Debug, Default)]
pub struct BeaconSource {
    next_seq: u64,
}

impl BeaconSource {
    pub fn emit(&mut self, state: &VehicleState, now: f64) -> ControlMessage {
        let msg = make_control_msg(state, self.next_seq, now);
        self.next_seq += 1;
        msg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ego(speed: f64) -> VehicleState {
        VehicleState { id: "e".into(), s: 0.0, speed, accel: 0.0, accel_cmd: 0.0, mode: Some(Mode::Cacc) }
    }

    fn msg(speed: f64, accel: f64) -> ControlMessage {
        ControlMessage { sender_id: "x".into(), seq: 0, pos_s: 0.0, speed, accel, ts_l4: 0 }
    }

    fn plexe_params() -> ControllerParams {
        ControllerParams { omega_n: 0.2, ..ControllerParams::default() }
    }

    #[test]
    fn cacc_examples() {
        let p = plexe_params();
        assert_eq!(cacc_accel(&ego(20.0), &msg(20.0, 0.0), &msg(20.0, 0.0), 5.0, &p), 0.0);
        let a = cacc_accel(&ego(20.0), &msg(20.0, 0.0), &msg(20.0, 0.0), 4.0, &p);
        assert!((a - -0.04).abs() < 1e-12, "{a}");
        let a = cacc_accel(&ego(21.0), &msg(20.0, 0.0), &msg(20.0, 0.0), 5.0, &p);
        assert!((a - -0.4).abs() < 1e-12, "{a}");
    }

    #[test]
    fn acc_examples() {
        let p = ControllerParams::default();
        assert_eq!(acc_accel(&ego(20.0), 24.0, 20.0, &p), 0.0);
        assert!((acc_accel(&ego(20.0), 23.0, 20.0, &p) - -0.1 / 1.2).abs() < 1e-12);
        assert!((acc_accel(&ego(21.0), 25.2, 20.0, &p) - -1.0 / 1.2).abs() < 1e-12);
    }

    #[test]
    fn default_bandwidth_is_two_pi_fifth() {
        assert!((ControllerParams::default().omega_n - 1.2566370614359172).abs() < 1e-15);
    }

    #[test]
    fn fallback_switches_on_high_delay() {
        let p = FallbackParams::default();
        let s = fallback_step(FallbackState::default(), 0.350, 1.0, &p);
        assert_eq!(s.mode, Mode::Acc);
        assert_eq!(s.good_since, None);
        // at the threshold itself nothing happens
        assert_eq!(fallback_step(FallbackState::default(), 0.300, 1.0, &p).mode, Mode::Cacc);
    }

    #[test]
    fn fallback_recovers_after_window() {
        let p = FallbackParams::default();
        let mut s = FallbackState { mode: Mode::Acc, good_since: None };
        let mut switched_at = None;
        for k in 0..60 {
            let now = 10.0 + 0.1 * k as f64;
            s = fallback_step(s, 0.090, now, &p);
            if s.mode == Mode::Cacc && switched_at.is_none() {
                switched_at = Some(k);
            }
        }
        // first sample at k=0 opens the window, k=50 is 5.0 s later
        assert_eq!(switched_at, Some(50));
    }

    #[test]
    fn fallback_violation_resets_window() {
        let p = FallbackParams::default();
        let mut s = FallbackState { mode: Mode::Acc, good_since: None };
        for k in 0..30 {
            s = fallback_step(s, 0.090, 0.1 * k as f64, &p);
        }
        assert!(s.good_since.is_some());
        s = fallback_step(s, 0.150, 3.0, &p);
        assert_eq!(s, FallbackState { mode: Mode::Acc, good_since: None });
    }

    #[test]
    fn beacons() {
        let st = ego(20.0);
        let m = make_control_msg(&st, 0, 0.0);
        assert_eq!(m.ts_l4, 0);
        let mut src = BeaconSource::default();
        let seqs: Vec<_> = (0..3).map(|k| src.emit(&st, k as f64 * 0.1).seq).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
        let m = make_control_msg(&st, 7, 1.0);
        assert!((m.delay_at(1.120) - 0.120).abs() < 1e-12);
    }
}
