//! World state, the fixed-order step and the run driver.
//!
//! One step advances the clock by `dt_sim`:
//!
//! 1. controller commands from the snapshot at `t`
//! 2. mobility integration, then `t += dt_sim`
//! 3. channel sampling (every channel period)
//! 4. beacon generation and uplink enqueue (every control period)
//! 5. link service, uplink-to-downlink relay, application delivery
//! 6. fallback state machine updates (every control period)
//! 7. metrics
//!
//! Positions reach the channel generator and delivered beacons reach the
//! vehicle applications through the in-process bus, so the bus carries
//! the data the simulation actually consumes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path as FsPath, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bus::{Broker, BrokerError, BusEnvelope, TcpBroker, TcpBusClient};
use crate::channel::{sample_channel, ChannelError, ShadowState};
use crate::config::{ScenarioConfig, ValidatedScenario};
use crate::control::{
    acc_accel, cacc_accel, fallback_step, leader_accel, secs_to_nanos, BeaconSource, ControlMessage, FallbackState, Mode,
};
use crate::link::{Leg, LinkCounters, LinkState, Packet};
use crate::metrics::{
    fmt_num, ChannelWindow, CsvSink, MetricsError, APP_HEADER, CHANNEL_1S_HEADER, CHANNEL_HEADER, GAP, LEGS_HEADER,
    LINK_HEADER, MOBILITY_HEADER,
};
use crate::mobility::{gap_front, leader_target_speed, BuiltinMobility, MobilityEngine};
use crate::rng::{RngError, RngRegistry, RngStream};

pub const CODE_VERSION: &str = concat!("vcosim ", env!("CARGO_PKG_VERSION"));

/// Extra delay injected on control packets by `--force-degradation`.
pub const FORCED_EXTRA_DELAY: f64 = 0.4;

const ORCHESTRATOR: &str = "orchestrator";
const CHANNEL_GEN: &str = "channel-gen";
const METRICS: &str = "metrics";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("bus: {0}")]
    Bus(#[from] BrokerError),
    #[error("rng: {0}")]
    Rng(#[from] RngError),
    #[error("bus payload: {0}")]
    Payload(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Artificial delay on every control packet sent in `[start, start + duration]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Degradation {
    pub start: f64,
    pub duration: f64,
    pub extra_delay: f64,
}

impl Degradation {
    pub fn new(start: f64, duration: f64) -> Self {
        Degradation { start, duration, extra_delay: FORCED_EXTRA_DELAY }
    }

    pub fn applies(&self, sent_at: f64) -> bool {
        sent_at >= self.start - 1e-9 && sent_at <= self.start + self.duration + 1e-9
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub realtime: bool,
    pub degradation: Option<Degradation>,
}

/// Beacon travelling over the uplink.
#[derive(Clone, Debug)]
struct Uplinked {
    msg: ControlMessage,
    from: usize,
}

/// Beacon travelling over one receiver's downlink.
#[derive(Clone, Debug)]
struct Downlinked {
    msg: ControlMessage,
    to: usize,
    ul_delay: f64,
}

/// Beacon reaching the gNB side; fans out to every other vehicle.
#[derive(Clone, Debug)]
struct RelayEvent {
    msg: ControlMessage,
    from: usize,
    ul_delay: f64,
}

/// Beacon reaching the receiving application.
#[derive(Clone, Debug)]
struct AppEvent {
    relay: Downlinked,
    dl_delay: f64,
}

#[derive(Debug)]
struct Scheduled<E> {
    time: f64,
    order: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl<E> Eq for Scheduled<E> {}
impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl<E> Ord for Scheduled<E> {
    // reversed: BinaryHeap is a max-heap and we pop the earliest event
    fn cmp(&self, o: &Self) -> Ordering {
        o.time.total_cmp(&self.time).then(o.order.cmp(&self.order))
    }
}

/// Time-ordered queue with FIFO tie-breaking.
#[derive(Debug)]
struct Timeline<E> {
    heap: BinaryHeap<Scheduled<E>>,
    order: u64,
}

impl<E> Timeline<E> {
    fn new() -> Self {
        Timeline { heap: BinaryHeap::new(), order: 0 }
    }

    fn push(&mut self, time: f64, event: E) {
        self.order += 1;
        self.heap.push(Scheduled { time, order: self.order, event });
    }

    /// Pop the earliest event if `due(time)` holds for it.
    fn pop_if(&mut self, due: impl Fn(f64) -> bool) -> Option<(f64, E)> {
        if self.heap.peek().is_some_and(|e| due(e.time)) {
            self.heap.pop().map(|e| (e.time, e.event))
        } else {
            None
        }
    }

    fn len(&self) -> usize {
        self.heap.len()
    }
}

#[derive(Serialize, Deserialize)]
struct PositionBatch {
    t: f64,
    pos: Vec<(String, f64, f64)>,
}

/// Per-follower view of the platoon built from received beacons.
#[derive(Clone, Debug, Default)]
struct Receiver {
    /// Newest beacon per sender.
    latest: Vec<Option<ControlMessage>>,
    /// Send time of the newest beacon per sender.
    last_sent: Vec<Option<f64>>,
    /// Largest delay from the front vehicle or the leader this control period.
    period_max: Option<f64>,
}

/// Packet accounting across the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PacketCounts {
    pub beacons: u64,
    pub ul_delivered: u64,
    pub ul_dropped: u64,
    pub ul_pending: u64,
    pub dl_enqueued: u64,
    pub dl_delivered: u64,
    pub dl_dropped: u64,
    pub dl_pending: u64,
    pub relay_in_flight: u64,
    pub app_in_flight: u64,
    pub app_delivered: u64,
}

struct Recorder {
    mobility: CsvSink,
    channel: CsvSink,
    channel_1s: CsvSink,
    link: CsvSink,
    app: CsvSink,
    legs: CsvSink,
}

impl Recorder {
    fn create(dir: &FsPath) -> Result<Recorder, RunError> {
        fs::create_dir_all(dir)?;
        Ok(Recorder {
            mobility: CsvSink::create(dir, "mobility.csv", MOBILITY_HEADER)?,
            channel: CsvSink::create(dir, "channel.csv", CHANNEL_HEADER)?,
            channel_1s: CsvSink::create(dir, "channel_1s.csv", CHANNEL_1S_HEADER)?,
            link: CsvSink::create(dir, "link.csv", LINK_HEADER)?,
            app: CsvSink::create(dir, "app.csv", APP_HEADER)?,
            legs: CsvSink::create(dir, "legs.csv", LEGS_HEADER)?,
        })
    }

    fn finish(self) -> Result<Vec<(String, u64)>, RunError> {
        let mut rows = Vec::new();
        for sink in [self.mobility, self.channel, self.channel_1s, self.link, self.app, self.legs] {
            let name = sink.name().to_string();
            rows.push((name, sink.finish()?));
        }
        Ok(rows)
    }
}

/// Loopback broker, optionally mirrored to a TCP broker for observers.
struct BusPlane {
    broker: Broker,
    mirror: Option<(TcpBroker, TcpBusClient)>,
}

impl BusPlane {
    fn publish(&mut self, client: &str, topic: &str, payload: Vec<u8>, t: f64) -> Result<(), RunError> {
        let ts = secs_to_nanos(t);
        if let Some((_, tcp)) = self.mirror.as_mut() {
            tcp.publish(topic, &payload, ts)?;
        }
        self.broker.publish(&BusEnvelope::publish(client, topic, payload, ts))?;
        Ok(())
    }
}

pub struct World {
    scenario: ValidatedScenario,
    seed: u64,
    degradation: Option<Degradation>,
    step: u64,
    t: f64,
    mobility: BuiltinMobility,
    fsms: Vec<FallbackState>,
    receivers: Vec<Receiver>,
    beacons: Vec<BeaconSource>,
    shadow: Vec<Option<ShadowState>>,
    shadow_rng: Vec<RngStream>,
    snr: Vec<f64>,
    ul: Vec<LinkState<Uplinked>>,
    dl: Vec<LinkState<Downlinked>>,
    ul_rng: Vec<RngStream>,
    dl_rng: Vec<RngStream>,
    relays: Timeline<RelayEvent>,
    arrivals: Timeline<AppEvent>,
    channel_window: Vec<ChannelWindow>,
    bus: BusPlane,
    rng_labels: Vec<String>,
    counts: PacketCounts,
}

fn vehicle_topic(id: &str, kind: &str) -> String {
    format!("veh/{id}/{kind}")
}

fn app_client(id: &str) -> String {
    format!("app/{id}")
}

impl World {
    pub fn new(scenario: ValidatedScenario, seed: u64, degradation: Option<Degradation>) -> Result<World, RunError> {
        let cfg = scenario.config();
        let n = cfg.vehicles.len();
        let mut registry = RngRegistry::new(seed);
        let mut shadow_rng = Vec::with_capacity(n);
        let mut ul_rng = Vec::with_capacity(n);
        let mut dl_rng = Vec::with_capacity(n);
        for v in &cfg.vehicles {
            shadow_rng.push(registry.derive(&format!("shadow/{}", v.id))?);
            ul_rng.push(registry.derive(&format!("harq/{}/UL", v.id))?);
            dl_rng.push(registry.derive(&format!("harq/{}/DL", v.id))?);
        }

        let mut broker = Broker::new(cfg.bus.max_clients);
        for c in [ORCHESTRATOR, CHANNEL_GEN, METRICS] {
            broker.connect(c)?;
        }
        broker.subscribe(CHANNEL_GEN, "chan/update", 0)?;
        broker.subscribe(METRICS, "metrics/#", 0)?;
        broker.subscribe(METRICS, "sim/clock", 0)?;
        for v in &cfg.vehicles {
            let app = app_client(&v.id);
            broker.connect(&app)?;
            broker.subscribe(&app, &vehicle_topic(&v.id, "ctrl"), 0)?;
            broker.subscribe(METRICS, &vehicle_topic(&v.id, "state"), 0)?;
        }
        let mirror = if cfg.bus.inprocess {
            None
        } else {
            let tcp = TcpBroker::start(SocketAddr::from((Ipv4Addr::LOCALHOST, cfg.bus.listen_port)), cfg.bus.max_clients)?;
            let client = TcpBusClient::connect(tcp.local_addr(), ORCHESTRATOR)?;
            Some((tcp, client))
        };

        let mobility = BuiltinMobility::new(scenario.path().clone(), cfg.vehicles.clone());
        let receivers = (0..n)
            .map(|_| Receiver { latest: vec![None; n], last_sent: vec![None; n], period_max: None })
            .collect();
        Ok(World {
            seed,
            degradation,
            step: 0,
            t: 0.0,
            mobility,
            fsms: vec![FallbackState::default(); n],
            receivers,
            beacons: vec![BeaconSource::default(); n],
            shadow: vec![None; n],
            shadow_rng,
            snr: vec![f64::NAN; n],
            ul: (0..n).map(|_| LinkState::new(Leg::Ul)).collect(),
            dl: (0..n).map(|_| LinkState::new(Leg::Dl)).collect(),
            ul_rng,
            dl_rng,
            relays: Timeline::new(),
            arrivals: Timeline::new(),
            channel_window: vec![ChannelWindow::default(); n],
            bus: BusPlane { broker, mirror },
            rng_labels: registry.labels().map(str::to_string).collect(),
            counts: PacketCounts::default(),
            scenario,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scenario(&self) -> &ValidatedScenario {
        &self.scenario
    }

    pub fn vehicles(&self) -> &[crate::mobility::VehicleState] {
        self.mobility.states()
    }

    pub fn rng_labels(&self) -> &[String] {
        &self.rng_labels
    }

    /// TCP address of the observer mirror, if the scenario enables it.
    pub fn bus_address(&self) -> Option<SocketAddr> {
        self.bus.mirror.as_ref().map(|(b, _)| b.local_addr())
    }

    pub fn packet_counts(&self) -> PacketCounts {
        let mut c = self.counts;
        c.ul_pending = self.ul.iter().map(|l| l.backlog() as u64).sum();
        c.dl_pending = self.dl.iter().map(|l| l.backlog() as u64).sum();
        c.dl_enqueued = self.dl.iter().map(|l| l.enqueued()).sum();
        c.relay_in_flight = self.relays.len() as u64;
        c.app_in_flight = self.arrivals.len() as u64;
        c
    }

    fn dt(&self) -> f64 {
        self.scenario.config().dt_sim
    }

    /// Phase 1: commands from the snapshot at `t`.
    fn commands(&self) -> Vec<f64> {
        let cfg = self.scenario.config();
        let ctl = &cfg.controller;
        let states = self.mobility.states();
        let len = self.scenario.path().length();
        let mut cmds = Vec::with_capacity(states.len());
        for (i, ego) in states.iter().enumerate() {
            let spec = &cfg.vehicles[i];
            if i == 0 {
                let target = leader_target_speed(self.t, &ctl.leader_profile);
                cmds.push(leader_accel(ego, target, ctl.leader_gain, spec.max_accel, spec.max_decel));
                continue;
            }
            let front = &states[i - 1];
            let gap = gap_front(ego, front, len, cfg.vehicles[i - 1].length);
            let cmd = match self.fsms[i].mode {
                Mode::Acc => acc_accel(ego, gap, front.speed, ctl),
                Mode::Cacc => {
                    let rx = &self.receivers[i];
                    match (&rx.latest[i - 1], &rx.latest[0]) {
                        (Some(f), Some(l)) => cacc_accel(ego, f, l, gap, ctl),
                        // nothing heard yet: coast
                        _ => 0.0,
                    }
                }
            };
            cmds.push(cmd);
        }
        cmds
    }

    fn is_tick(&self, every: u64) -> bool {
        self.step % every == 0
    }

    /// Advance one `dt_sim`.
    fn step(&mut self, rec: &mut Recorder) -> Result<(), RunError> {
        // 1-2
        let cmds = self.commands();
        let dt = self.dt();
        self.mobility.advance(&cmds, dt);
        self.step += 1;
        self.t = self.step as f64 * dt;
        let t = self.t;
        self.bus.publish(ORCHESTRATOR, "sim/clock", secs_to_nanos(t).to_be_bytes().to_vec(), t)?;

        // 3
        if self.is_tick(self.scenario.channel_ticks()) {
            self.sample_channels(rec)?;
        }
        // 4
        let control_tick = self.is_tick(self.scenario.control_ticks());
        if control_tick {
            self.send_beacons();
        }
        // 5
        self.serve_links();
        self.deliver_to_apps(rec)?;
        // 6
        if control_tick {
            self.update_fallback();
        }
        // 7
        if self.is_tick(self.scenario.mobility_ticks()) {
            self.log_mobility(rec)?;
        }
        if self.is_tick(self.scenario.window_ticks()) {
            self.flush_windows(rec)?;
        }
        // the metrics tap only observes
        self.bus.broker.drain(METRICS);
        Ok(())
    }

    fn sample_channels(&mut self, rec: &mut Recorder) -> Result<(), RunError> {
        let t = self.t;
        let batch = PositionBatch {
            t,
            pos: self
                .mobility
                .states()
                .iter()
                .map(|s| {
                    let p = self.scenario.path().position(s.s);
                    (s.id.clone(), p.x, p.y)
                })
                .collect(),
        };
        self.bus.publish(ORCHESTRATOR, "chan/update", serde_json::to_vec(&batch)?, t)?;

        let cfg = self.scenario.config();
        let gnb = self.scenario.gnb();
        let mut rows = Vec::new();
        for env in self.bus.broker.drain(CHANNEL_GEN) {
            let batch: PositionBatch = serde_json::from_slice(&env.payload)?;
            for (i, (id, x, y)) in batch.pos.into_iter().enumerate() {
                let pos = crate::geometry::Point2::new(x, y);
                let s = sample_channel(
                    &id,
                    pos,
                    &gnb,
                    self.scenario.buildings(),
                    &cfg.channel,
                    &mut self.shadow[i],
                    &mut self.shadow_rng[i],
                    batch.t,
                )?;
                self.snr[i] = s.snr;
                self.ul[i].observe_snr(s.snr, &cfg.link);
                self.dl[i].observe_snr(s.snr, &cfg.link);
                self.channel_window[i].push(s.rsrp, s.rsrp_shadow_free(), s.snr, s.los);
                rows.push(vec![
                    fmt_num(s.t),
                    id,
                    if s.los { "1".into() } else { "0".into() },
                    fmt_num(s.d3d),
                    fmt_num(s.pl),
                    fmt_num(s.shadow),
                    fmt_num(s.rsrp),
                    fmt_num(s.snr),
                ]);
            }
        }
        rec.channel.write_window(self.step, &rows)?;
        Ok(())
    }

    fn send_beacons(&mut self) {
        let t = self.t;
        let bytes = self.scenario.config().link.packet_bytes;
        for i in 0..self.beacons.len() {
            let msg = self.beacons[i].emit(&self.mobility.states()[i], t);
            self.ul[i].enqueue(Packet { bytes, enqueue_t: t, payload: Uplinked { msg, from: i } });
            self.counts.beacons += 1;
        }
    }

    fn serve_links(&mut self) {
        let cfg = self.scenario.config();
        let link = cfg.link.clone();
        let horizon = self.t + self.dt();
        let n = self.ul.len();

        for i in 0..n {
            let done = self.ul[i].service(horizon, self.snr[i], &mut self.ul_rng[i], &link);
            for (out, up) in done {
                if !out.delivered {
                    self.counts.ul_dropped += 1;
                    continue;
                }
                self.counts.ul_delivered += 1;
                let extra = match self.degradation {
                    Some(d) if d.applies(up.msg.sent_at()) => d.extra_delay,
                    _ => 0.0,
                };
                let ul_delay = out.delay + extra;
                let arrival = out.enqueue_t + ul_delay;
                self.relays.push(arrival, RelayEvent { msg: up.msg, from: up.from, ul_delay });
            }
        }

        // relay everything that reaches the gNB side before the next tick
        while let Some((time, RelayEvent { msg, from, ul_delay })) = self.relays.pop_if(|at| at < horizon) {
            for to in (0..n).filter(|&r| r != from) {
                let relay = Downlinked { msg: msg.clone(), to, ul_delay };
                self.dl[to].enqueue(Packet { bytes: link.packet_bytes, enqueue_t: time, payload: relay });
            }
        }

        for r in 0..n {
            let done = self.dl[r].service(horizon, self.snr[r], &mut self.dl_rng[r], &link);
            for (out, relay) in done {
                if !out.delivered {
                    self.counts.dl_dropped += 1;
                    continue;
                }
                self.counts.dl_delivered += 1;
                self.arrivals.push(out.enqueue_t + out.delay, AppEvent { relay, dl_delay: out.delay });
            }
        }
    }

    /// Pop application arrivals due by `t`, publish them to the receiving
    /// vehicle's topic and let each application consume its inbox.
    fn deliver_to_apps(&mut self, rec: &mut Recorder) -> Result<(), RunError> {
        let t = self.t;
        let eps = 1e-9 * self.dt();
        while let Some((arrival, AppEvent { relay, dl_delay })) = self.arrivals.pop_if(|at| at <= t + eps) {
            let id = &self.scenario.config().vehicles[relay.to].id;
            let payload = serde_json::to_vec(&json!({
                "msg": relay.msg,
                "arrival": arrival,
                "ul_delay": relay.ul_delay,
                "dl_delay": dl_delay,
            }))?;
            self.bus.publish(ORCHESTRATOR, &vehicle_topic(id, "ctrl"), payload, t)?;
        }

        let n = self.mobility.states().len();
        let mut legs = Vec::new();
        let mut rows = Vec::new();
        for r in 0..n {
            let id = self.scenario.config().vehicles[r].id.clone();
            for env in self.bus.broker.drain(&app_client(&id)) {
                let d: AppDelivery = serde_json::from_slice(&env.payload)?;
                let from = self.scenario.config().vehicles.iter().position(|v| v.id == d.msg.sender_id).expect("known sender");
                let delay = d.arrival - d.msg.sent_at();
                self.counts.app_delivered += 1;
                let mode = if r == 0 { GAP.to_string() } else { self.fsms[r].mode.to_string() };
                rows.push(vec![
                    fmt_num(t),
                    id.clone(),
                    d.msg.sender_id.clone(),
                    d.msg.seq.to_string(),
                    fmt_num(delay * 1e3),
                    mode,
                ]);
                legs.push(vec![
                    fmt_num(t),
                    id.clone(),
                    d.msg.sender_id.clone(),
                    d.msg.seq.to_string(),
                    fmt_num(d.ul_delay * 1e3),
                    fmt_num(d.dl_delay * 1e3),
                ]);
                let rx = &mut self.receivers[r];
                if r > 0 && (from == r - 1 || from == 0) {
                    rx.period_max = Some(rx.period_max.map_or(delay, |m: f64| m.max(delay)));
                }
                let newer = rx.latest[from].as_ref().is_none_or(|m| m.seq < d.msg.seq);
                if newer {
                    rx.last_sent[from] = Some(d.msg.sent_at());
                    rx.latest[from] = Some(d.msg);
                }
            }
        }
        rec.app.write_window(self.step, &rows)?;
        rec.legs.write_window(self.step, &legs)?;
        Ok(())
    }

    fn update_fallback(&mut self) {
        let cfg = self.scenario.config();
        let fb = &cfg.fallback;
        if !fb.enabled {
            for rx in &mut self.receivers {
                rx.period_max = None;
            }
            return;
        }
        let t = self.t;
        let stale_after = fb.stale_periods as f64 * cfg.controller.control_period;
        for r in 1..self.receivers.len() {
            let rx = &mut self.receivers[r];
            let mut sample = rx.period_max.take();
            // silence from the front vehicle or the leader counts as delay
            for sender in [r - 1, 0] {
                let age = t - rx.last_sent[sender].unwrap_or(0.0);
                if age >= stale_after - 1e-9 {
                    sample = Some(sample.map_or(age, |s| s.max(age)));
                }
            }
            if let Some(delay) = sample {
                let next = fallback_step(self.fsms[r], delay, t, fb);
                if next.mode != self.fsms[r].mode {
                    self.mobility.set_mode(r, Some(next.mode));
                }
                self.fsms[r] = next;
            }
        }
    }

    fn log_mobility(&mut self, rec: &mut Recorder) -> Result<(), RunError> {
        let t = self.t;
        let cfg = self.scenario.config();
        let len = self.scenario.path().length();
        let states = self.mobility.states();
        let mut rows = Vec::with_capacity(states.len());
        let mut published = Vec::with_capacity(states.len());
        for (i, s) in states.iter().enumerate() {
            let p = self.scenario.path().position(s.s);
            let (gap, mode) = if i == 0 {
                (GAP.to_string(), GAP.to_string())
            } else {
                (fmt_num(gap_front(s, &states[i - 1], len, cfg.vehicles[i - 1].length)), self.fsms[i].mode.to_string())
            };
            rows.push(vec![
                fmt_num(t),
                s.id.clone(),
                fmt_num(s.s),
                fmt_num(p.x),
                fmt_num(p.y),
                fmt_num(s.speed),
                fmt_num(s.accel),
                gap,
                mode,
            ]);
            published.push((vehicle_topic(&s.id, "state"), serde_json::to_vec(s)?));
        }
        for (topic, payload) in published {
            self.bus.publish(ORCHESTRATOR, &topic, payload, t)?;
        }
        rec.mobility.write_window(self.step, &rows)?;
        Ok(())
    }

    fn flush_windows(&mut self, rec: &mut Recorder) -> Result<(), RunError> {
        let t = self.t;
        let ids: Vec<String> = self.scenario.config().vehicles.iter().map(|v| v.id.clone()).collect();

        let mut ch_rows = Vec::new();
        let mut all = ChannelWindow::default();
        for (i, id) in ids.iter().enumerate() {
            let w = std::mem::take(&mut self.channel_window[i]);
            all.merge(&w);
            ch_rows.push(w.row(t, id));
        }
        if !ids.is_empty() {
            ch_rows.push(all.row(t, "all"));
        }

        let mut link_rows = Vec::new();
        let (mut all_ul, mut all_dl) = (LinkCounters::default(), LinkCounters::default());
        for (i, id) in ids.iter().enumerate() {
            let ul = self.ul[i].take_window();
            let dl = self.dl[i].take_window();
            all_ul.merge(&ul);
            all_dl.merge(&dl);
            link_rows.push(link_row(t, id, Leg::Ul, &ul));
            link_rows.push(link_row(t, id, Leg::Dl, &dl));
        }
        if !ids.is_empty() {
            link_rows.push(link_row(t, "all", Leg::Ul, &all_ul));
            link_rows.push(link_row(t, "all", Leg::Dl, &all_dl));
        }

        for row in &ch_rows {
            self.bus.publish(ORCHESTRATOR, "metrics/channel", row.join(",").into_bytes(), t)?;
        }
        for row in &link_rows {
            self.bus.publish(ORCHESTRATOR, "metrics/link", row.join(",").into_bytes(), t)?;
        }
        rec.channel_1s.write_window(self.step, &ch_rows)?;
        rec.link.write_window(self.step, &link_rows)?;
        Ok(())
    }

    fn shutdown_bus(&mut self) {
        if let Some((tcp, client)) = self.bus.mirror.take() {
            drop(client);
            tcp.shutdown();
        }
    }
}

#[derive(Deserialize)]
struct AppDelivery {
    msg: ControlMessage,
    arrival: f64,
    ul_delay: f64,
    dl_delay: f64,
}

fn link_row(t: f64, veh: &str, leg: Leg, c: &LinkCounters) -> Vec<String> {
    vec![
        fmt_num(t),
        veh.to_string(),
        leg.to_string(),
        crate::metrics::fmt_opt(c.avg_mcs()),
        crate::metrics::fmt_opt(c.avg_bler()),
        c.retx.to_string(),
        c.delivered.to_string(),
        c.dropped.to_string(),
    ]
}

/// What a finished (or aborted) run produced.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub steps: u64,
    pub end_t: f64,
    pub status: RunStatus,
    pub packets: PacketCounts,
    pub rows: Vec<(String, u64)>,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial,
}

/// Execute a scenario and write all artifacts into `out_dir`.
pub fn run(scenario: ValidatedScenario, out_dir: &FsPath, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let seed = opts.seed.unwrap_or(scenario.config().seed);
    let scenario = scenario.with_seed(seed);
    let mut rec = Recorder::create(out_dir)?;
    let started = Instant::now();
    let mut world = World::new(scenario, seed, opts.degradation)?;
    let steps = world.scenario().steps();

    let mut failure = None;
    while world.step_count() < steps {
        if let Err(e) = world.step(&mut rec) {
            failure = Some(e);
            break;
        }
        if opts.realtime {
            let due = started + Duration::from_secs_f64(world.t());
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }
    world.shutdown_bus();
    let rows = rec.finish()?;
    let status = if failure.is_some() { RunStatus::Partial } else { RunStatus::Complete };
    let summary = RunSummary {
        out_dir: out_dir.to_path_buf(),
        seed,
        steps: world.step_count(),
        end_t: world.t(),
        status,
        packets: world.packet_counts(),
        rows,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_run_json(&world, &summary, opts, failure.as_ref())?;
    match failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

fn resolved_config(world: &World) -> ScenarioConfig {
    let mut cfg = world.scenario().config().clone();
    cfg.gnb.height = Some(world.scenario().gnb().height);
    cfg.seed = world.seed();
    cfg
}

fn write_run_json(world: &World, s: &RunSummary, opts: &RunOptions, error: Option<&RunError>) -> Result<(), RunError> {
    let (published, delivered) = world.bus.broker.stats();
    let doc = json!({
        "code_version": CODE_VERSION,
        "seed": s.seed,
        "status": s.status,
        "error": error.map(|e| e.to_string()),
        "start_t": 0.0,
        "end_t": s.end_t,
        "steps": s.steps,
        "dt_sim": world.dt(),
        "realtime": opts.realtime,
        "force_degradation": opts.degradation,
        "rng_streams": world.rng_labels(),
        "packets": s.packets,
        "bus": { "published": published, "delivered": delivered },
        "rows": s.rows.iter().map(|(f, n)| (f.clone(), *n)).collect::<std::collections::BTreeMap<_, _>>(),
        "wall_time_s": s.wall_time_s,
        "scenario": resolved_config(world),
    });
    fs::write(s.out_dir.join("run.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}
