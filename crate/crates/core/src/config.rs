//! Scenario files: parsing, serialization and validation.
//!
//! Scenarios are TOML documents with a strict schema. Parsing applies
//! defaults and rejects unknown keys; validation checks every cross-field
//! invariant and precomputes the geometry the simulator needs.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::bus::validate_topic;
use crate::channel::{pathloss_db, Building, ChannelParams, GnbSite, Point3, los_blocked};
use crate::control::{ControllerParams, FallbackParams};
use crate::geometry::{BBox, Point2, Polygon};
use crate::link::LinkParams;
use crate::mobility::{arc_gap, Path, VehicleSpec};

/// The shipped sample scenario: a three-car platoon on a loop around
/// rectangular city blocks with the base station at a block corner.
pub const SAMPLE_SCENARIO: &str = include_str!("../scenarios/luxembourg_loop.toml");

/// Cadence of the mobility log, seconds.
pub const MOBILITY_LOG_PERIOD: f64 = 0.1;
/// Length of the aggregation windows, seconds.
pub const METRICS_WINDOW: f64 = 1.0;

fn default_dt_sim() -> f64 {
    0.01
}
fn default_max_nodes() -> usize {
    128
}
fn default_listen_port() -> u16 {
    7883
}
fn default_max_clients() -> usize {
    256
}
fn default_inprocess() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusParams {
    #[serde(default = "default_listen_port")]
    pub listen_port: u16,
    #[serde(default = "default_max_clients")]
    pub max_clients: usize,
    /// Loopback bus only; when false a TCP broker mirrors every message.
    #[serde(default = "default_inprocess")]
    pub inprocess: bool,
}

impl Default for BusParams {
    fn default() -> Self {
        BusParams { listen_port: default_listen_port(), max_clients: default_max_clients(), inprocess: default_inprocess() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnbConfig {
    pub position: Point2,
    /// Antenna height; falls back to `channel.h_gnb`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub duration: f64,
    #[serde(default = "default_dt_sim")]
    pub dt_sim: f64,
    #[serde(default, with = "seed_repr")]
    pub seed: u64,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    pub path: Vec<Point2>,
    #[serde(default)]
    pub buildings: Vec<Polygon>,
    pub gnb: GnbConfig,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub controller: ControllerParams,
    #[serde(default)]
    pub fallback: FallbackParams,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub link: LinkParams,
    #[serde(default)]
    pub bus: BusParams,
}

/// TOML integers are signed 64-bit, so seeds above `i64::MAX` are written
/// as decimal strings. Both forms are accepted on input.
mod seed_repr {
    use super::*;

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&seed.to_string()),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        use serde::de::Error;
        match Repr::deserialize(d)? {
            Repr::Int(v) => u64::try_from(v).map_err(|_| D::Error::custom(format!("seed must be non-negative, got {v}"))),
            Repr::Str(s) => s.trim().parse().map_err(|_| D::Error::custom(format!("seed `{s}` is not an unsigned 64-bit integer"))),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ParseError> {
    if let Err(e) = text.parse::<toml::Table>() {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        return Err(ParseError::Syntax { line, column, message: e.message().to_string() });
    }
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
        let at = e.span().map(|s| line_col(text, s.start));
        match at {
            Some((l, c)) => ParseError::Schema(format!("{} (line {l}, column {c})", e.message())),
            None => ParseError::Schema(e.message().to_string()),
        }
    })?;
    if cfg.max_nodes == 0 || cfg.vehicles.len() > cfg.max_nodes - 1 {
        return Err(ParseError::Schema(budget_message(cfg.vehicles.len(), cfg.max_nodes)));
    }
    Ok(cfg)
}

fn budget_message(vehicles: usize, max_nodes: usize) -> String {
    format!("node budget exceeded: {vehicles} vehicles but max_nodes = {max_nodes} leaves room for {} (one node is the gNB)", max_nodes.saturating_sub(1))
}

pub fn serialize_scenario(cfg: &ScenarioConfig) -> String {
    toml::to_string(cfg).expect("scenario serializes to TOML")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValidationCode {
    NonFinite,
    OutOfRange,
    PathTooShort,
    PathNotClosed,
    PathZeroLength,
    PolygonInvalid,
    NodeBudget,
    DtNotDivisor,
    GnbHeightMismatch,
    GnbInsideBuilding,
    VehicleId,
    VehicleOverlap,
    EffTable,
    BusCapacity,
}

impl ValidationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ValidationCode::NonFinite => "NON_FINITE",
            ValidationCode::OutOfRange => "OUT_OF_RANGE",
            ValidationCode::PathTooShort => "PATH_TOO_SHORT",
            ValidationCode::PathNotClosed => "PATH_NOT_CLOSED",
            ValidationCode::PathZeroLength => "PATH_ZERO_LENGTH",
            ValidationCode::PolygonInvalid => "POLYGON_INVALID",
            ValidationCode::NodeBudget => "NODE_BUDGET",
            ValidationCode::DtNotDivisor => "DT_NOT_DIVISOR",
            ValidationCode::GnbHeightMismatch => "GNB_HEIGHT_MISMATCH",
            ValidationCode::GnbInsideBuilding => "GNB_INSIDE_BUILDING",
            ValidationCode::VehicleId => "VEHICLE_ID",
            ValidationCode::VehicleOverlap => "VEHICLE_OVERLAP",
            ValidationCode::EffTable => "EFF_TABLE",
            ValidationCode::BusCapacity => "BUS_CAPACITY",
        }
    }
}

impl fmt::Display for ValidationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationError {
    pub code: ValidationCode,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

/// Every violated invariant, in check order.
#[derive(Clone, Debug, PartialEq, Error)]
pub struct ValidationErrors(pub Vec<ValidationError>);

impl ValidationErrors {
    pub fn codes(&self) -> Vec<ValidationCode> {
        self.0.iter().map(|e| e.code).collect()
    }

    pub fn has(&self, code: ValidationCode) -> bool {
        self.0.iter().any(|e| e.code == code)
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

/// A checked scenario plus derived geometry. Immutable after construction.
#[derive(Clone, Debug)]
pub struct ValidatedScenario {
    config: ScenarioConfig,
    path: Path,
    buildings: Vec<Building>,
    gnb: GnbSite,
    steps: u64,
    control_ticks: u64,
    channel_ticks: u64,
    mobility_ticks: u64,
    window_ticks: u64,
}

impl ValidatedScenario {
    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }
    pub fn path(&self) -> &Path {
        &self.path
    }
    pub fn buildings(&self) -> &[Building] {
        &self.buildings
    }
    pub fn building_bboxes(&self) -> Vec<BBox> {
        self.buildings.iter().map(|b| b.bbox).collect()
    }
    pub fn gnb(&self) -> GnbSite {
        self.gnb
    }
    /// Number of `dt_sim` steps in the run.
    pub fn steps(&self) -> u64 {
        self.steps
    }
    /// Steps per control period.
    pub fn control_ticks(&self) -> u64 {
        self.control_ticks
    }
    /// Steps per channel refresh.
    pub fn channel_ticks(&self) -> u64 {
        self.channel_ticks
    }
    /// Steps per mobility log row.
    pub fn mobility_ticks(&self) -> u64 {
        self.mobility_ticks
    }
    /// Steps per aggregation window.
    pub fn window_ticks(&self) -> u64 {
        self.window_ticks
    }

    /// Replace the master seed (command-line override).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self
    }

    /// Initial bumper-to-bumper gap of each follower to its predecessor.
    pub fn initial_gaps(&self) -> Vec<(String, f64)> {
        let v = &self.config.vehicles;
        (1..v.len())
            .map(|i| {
                let gap = arc_gap(v[i].initial_s, v[i - 1].initial_s, self.path.length(), v[i - 1].length);
                (v[i].id.clone(), gap)
            })
            .collect()
    }

    /// Shadow-free RSRP (dBm) and LoS flag sampled along the loop every
    /// `step` meters of arc length.
    pub fn rsrp_profile(&self, step: f64) -> Vec<(f64, bool, f64)> {
        let ch = &self.config.channel;
        let bs = Point3::new(self.gnb.position, self.gnb.height);
        let n = (self.path.length() / step).ceil() as usize;
        (0..n)
            .filter_map(|i| {
                let s = i as f64 * step;
                let ue = Point3::new(self.path.position(s), ch.h_ue);
                let los = !los_blocked(bs, ue, &self.buildings);
                let pl = pathloss_db(bs.distance(ue), ch.fc, los, ch.h_ue).ok()?;
                Some((s, los, ch.p_ref - pl))
            })
            .collect()
    }
}

struct Checker {
    errors: Vec<ValidationError>,
}

impl Checker {
    fn push(&mut self, code: ValidationCode, message: impl Into<String>) {
        self.errors.push(ValidationError { code, message: message.into() });
    }

    /// Finite and satisfying `ok`; `what` describes the allowed range.
    fn num(&mut self, field: &str, v: f64, ok: bool, what: &str) {
        if !v.is_finite() {
            self.push(ValidationCode::NonFinite, format!("{field} = {v} is not finite"));
        } else if !ok {
            self.push(ValidationCode::OutOfRange, format!("{field} = {v} must be {what}"));
        }
    }

    fn positive(&mut self, field: &str, v: f64) {
        self.num(field, v, v > 0.0, "> 0");
    }

    fn non_negative(&mut self, field: &str, v: f64) {
        self.num(field, v, v >= 0.0, ">= 0");
    }

    fn count(&mut self, field: &str, v: u64, min: u64) {
        if v < min {
            self.push(ValidationCode::OutOfRange, format!("{field} = {v} must be >= {min}"));
        }
    }

    fn point(&mut self, field: &str, p: Point2) {
        if !p.is_finite() {
            self.push(ValidationCode::NonFinite, format!("{field} = [{}, {}] is not finite", p.x, p.y));
        }
    }

    /// Whole number of `dt` steps in `period`, or None.
    fn ticks(&mut self, field: &str, period: f64, dt: f64) -> Option<u64> {
        if !(period.is_finite() && dt.is_finite() && period > 0.0 && dt > 0.0) {
            return None;
        }
        let ratio = period / dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            self.push(ValidationCode::DtNotDivisor, format!("dt_sim = {dt} does not divide {field} = {period}"));
            return None;
        }
        Some(n as u64)
    }
}

pub fn validate(config: ScenarioConfig) -> Result<ValidatedScenario, ValidationErrors> {
    let mut c = Checker { errors: Vec::new() };
    let cfg = &config;

    c.positive("duration", cfg.duration);
    c.positive("dt_sim", cfg.dt_sim);
    c.count("max_nodes", cfg.max_nodes as u64, 1);
    if cfg.max_nodes >= 1 && cfg.vehicles.len() > cfg.max_nodes - 1 {
        c.push(ValidationCode::NodeBudget, budget_message(cfg.vehicles.len(), cfg.max_nodes));
    }

    // path
    for (i, p) in cfg.path.iter().enumerate() {
        c.point(&format!("path[{i}]"), *p);
    }
    if cfg.path.len() < 3 {
        c.push(ValidationCode::PathTooShort, format!("path has {} waypoints, need at least 3", cfg.path.len()));
    } else {
        let (first, last) = (cfg.path[0], cfg.path[cfg.path.len() - 1]);
        if first != last {
            c.push(ValidationCode::PathNotClosed, format!("first waypoint [{}, {}] differs from last [{}, {}]", first.x, first.y, last.x, last.y));
        }
    }
    let path = Path::new(cfg.path.clone());
    let path_ok = cfg.path.len() >= 3 && path.length().is_finite();
    if path_ok && path.length() <= 0.0 {
        c.push(ValidationCode::PathZeroLength, "path has zero total length");
    }

    // buildings
    for (i, poly) in cfg.buildings.iter().enumerate() {
        if poly.vertices().iter().any(|p| !p.is_finite()) {
            c.push(ValidationCode::NonFinite, format!("buildings[{i}] has a non-finite vertex"));
        } else if !poly.is_simple() {
            c.push(ValidationCode::PolygonInvalid, format!("buildings[{i}] is not a simple polygon with at least 3 vertices"));
        }
    }

    // gNB
    c.point("gnb.position", cfg.gnb.position);
    let height = cfg.gnb.height.unwrap_or(cfg.channel.h_gnb);
    if let Some(h) = cfg.gnb.height {
        c.positive("gnb.height", h);
        if h != cfg.channel.h_gnb {
            c.push(ValidationCode::GnbHeightMismatch, format!("gnb.height = {h} differs from channel.h_gnb = {}", cfg.channel.h_gnb));
        }
    }
    if cfg.gnb.position.is_finite() {
        for (i, poly) in cfg.buildings.iter().enumerate() {
            if poly.is_simple() && poly.contains(cfg.gnb.position) {
                c.push(ValidationCode::GnbInsideBuilding, format!("gNB lies inside or on buildings[{i}]"));
            }
        }
    }

    // vehicles
    let mut seen = std::collections::BTreeSet::new();
    for (i, v) in cfg.vehicles.iter().enumerate() {
        let at = format!("vehicles[{i}]");
        if validate_topic(&format!("veh/{}/state", v.id)).is_err() || v.id.contains('/') {
            c.push(ValidationCode::VehicleId, format!("{at}.id `{}` must be non-empty without whitespace, '/' or '#'", v.id));
        } else if !seen.insert(v.id.as_str()) {
            c.push(ValidationCode::VehicleId, format!("{at}.id `{}` is duplicated", v.id));
        }
        c.positive(&format!("{at}.length"), v.length);
        c.non_negative(&format!("{at}.initial_s"), v.initial_s);
        c.non_negative(&format!("{at}.initial_speed"), v.initial_speed);
        c.positive(&format!("{at}.max_accel"), v.max_accel);
        c.positive(&format!("{at}.max_decel"), v.max_decel);
        c.positive(&format!("{at}.tau"), v.tau);
        if path.length().is_finite() && v.initial_s >= path.length() {
            c.push(ValidationCode::OutOfRange, format!("{at}.initial_s = {} must be below the path length {}", v.initial_s, path.length()));
        }
    }
    if path_ok && path.length() > 0.0 && c.errors.is_empty() {
        let v = &cfg.vehicles;
        for i in 1..v.len() {
            let gap = arc_gap(v[i].initial_s, v[i - 1].initial_s, path.length(), v[i - 1].length);
            if gap <= 0.0 {
                c.push(ValidationCode::VehicleOverlap, format!("{} starts {gap:.3} m behind the rear of {}", v[i].id, v[i - 1].id));
            }
        }
    }

    // controller
    let ctl = &cfg.controller;
    c.positive("controller.gap_des", ctl.gap_des);
    c.num("controller.c1", ctl.c1, (0.0..=1.0).contains(&ctl.c1), "in [0, 1]");
    c.num("controller.xi", ctl.xi, ctl.xi >= 1.0, ">= 1");
    c.positive("controller.omega_n", ctl.omega_n);
    c.positive("controller.headway", ctl.headway);
    c.non_negative("controller.lambda", ctl.lambda);
    c.positive("controller.leader_gain", ctl.leader_gain);
    c.positive("controller.control_period", ctl.control_period);
    let lp = &ctl.leader_profile;
    c.positive("controller.leader_profile.v_low", lp.v_low);
    c.num("controller.leader_profile.v_high", lp.v_high, lp.v_high > lp.v_low, "> v_low");
    c.positive("controller.leader_profile.period", lp.period);

    // fallback
    let fb = &cfg.fallback;
    c.positive("fallback.delay_low", fb.delay_low);
    c.num("fallback.delay_high", fb.delay_high, fb.delay_high > fb.delay_low, "> delay_low");
    c.non_negative("fallback.recovery_window", fb.recovery_window);
    c.count("fallback.stale_periods", fb.stale_periods as u64, 1);

    // channel
    let ch = &cfg.channel;
    c.positive("channel.fc", ch.fc);
    c.num("channel.p_ref", ch.p_ref, true, "");
    c.num("channel.n0", ch.n0, true, "");
    c.positive("channel.h_gnb", ch.h_gnb);
    c.positive("channel.h_ue", ch.h_ue);
    c.non_negative("channel.sigma_los", ch.sigma_los);
    c.non_negative("channel.sigma_nlos", ch.sigma_nlos);
    c.positive("channel.d_corr", ch.d_corr);
    c.positive("channel.update_period", ch.update_period);

    // link
    let lk = &cfg.link;
    c.count("link.mcs_count", lk.mcs_count as u64, 1);
    c.num("link.gamma0", lk.gamma0, true, "");
    c.non_negative("link.gamma_step", lk.gamma_step);
    c.positive("link.k_slope", lk.k_slope);
    c.num("link.target_bler", lk.target_bler, lk.target_bler > 0.0 && lk.target_bler < 1.0, "in (0, 1)");
    if let Some(eff) = &lk.eff {
        if eff.len() != lk.mcs_count {
            c.push(ValidationCode::EffTable, format!("link.eff has {} entries but mcs_count = {}", eff.len(), lk.mcs_count));
        }
        for (i, e) in eff.iter().enumerate() {
            c.positive(&format!("link.eff[{i}]"), *e);
        }
    }
    c.positive("link.bw_ue", lk.bw_ue);
    c.non_negative("link.harq_rtt", lk.harq_rtt);
    c.count("link.max_harq", lk.max_harq as u64, 1);
    c.non_negative("link.rlc_rtt", lk.rlc_rtt);
    c.count("link.max_rlc", lk.max_rlc as u64, 1);
    c.non_negative("link.core_latency", lk.core_latency);
    c.count("link.packet_bytes", lk.packet_bytes as u64, 1);
    c.count("link.snr_avg_samples", lk.snr_avg_samples as u64, 1);

    // bus: one client per vehicle plus orchestrator, channel generator and metrics
    let needed = cfg.vehicles.len() + 3;
    if cfg.bus.max_clients < needed {
        c.push(ValidationCode::BusCapacity, format!("bus.max_clients = {} but {needed} clients are needed", cfg.bus.max_clients));
    }

    // cadences
    let steps = c.ticks("duration", cfg.duration, cfg.dt_sim);
    let control_ticks = c.ticks("controller.control_period", ctl.control_period, cfg.dt_sim);
    let channel_ticks = c.ticks("channel.update_period", ch.update_period, cfg.dt_sim);
    let mobility_ticks = c.ticks("the mobility log period", MOBILITY_LOG_PERIOD, cfg.dt_sim);
    let window_ticks = c.ticks("the metrics window", METRICS_WINDOW, cfg.dt_sim);

    if !c.errors.is_empty() {
        return Err(ValidationErrors(c.errors));
    }
    let buildings = cfg.buildings.iter().cloned().map(Building::new).collect();
    let gnb = GnbSite { position: cfg.gnb.position, height };
    Ok(ValidatedScenario {
        steps: steps.unwrap(),
        control_ticks: control_ticks.unwrap(),
        channel_ticks: channel_ticks.unwrap(),
        mobility_ticks: mobility_ticks.unwrap(),
        window_ticks: window_ticks.unwrap(),
        path,
        buildings,
        gnb,
        config,
    })
}

/// Parse and validate in one go.
pub fn load_scenario(text: &str) -> Result<ValidatedScenario, LoadError> {
    Ok(validate(parse_scenario(text)?)?)
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{0}")]
    Validation(#[from] ValidationErrors),
}
