//! Abstract cellular link: SNR-driven MCS selection, logistic BLER curves,
//! HARQ/RLC retransmissions and a FIFO server per UE and direction.
//!
//! A packet holds the server from its first attempt until it is delivered
//! or dropped, including the HARQ and RLC round trips between attempts. That
//! is what turns a burst of block errors into queueing delay for the packets
//! behind it.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

fn default_mcs_count() -> usize {
    29
}
fn default_gamma0() -> f64 {
    -3.5
}
fn default_gamma_step() -> f64 {
    1.0
}
fn default_k_slope() -> f64 {
    2.0
}
fn default_target_bler() -> f64 {
    0.1
}
fn default_bw_ue() -> f64 {
    5e6
}
fn default_harq_rtt() -> f64 {
    0.008
}
fn default_max_harq() -> u32 {
    4
}
fn default_rlc_rtt() -> f64 {
    0.040
}
fn default_max_rlc() -> u32 {
    2
}
fn default_core_latency() -> f64 {
    0.010
}
fn default_packet_bytes() -> u32 {
    300
}
fn default_snr_avg_samples() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    #[serde(default = "default_mcs_count")]
    pub mcs_count: usize,
    /// SNR (dB) at which MCS 0 has 50 % BLER.
    #[serde(default = "default_gamma0")]
    pub gamma0: f64,
    /// SNR (dB) spacing between consecutive MCS thresholds.
    #[serde(default = "default_gamma_step")]
    pub gamma_step: f64,
    /// Logistic steepness, 1/dB.
    #[serde(default = "default_k_slope")]
    pub k_slope: f64,
    #[serde(default = "default_target_bler")]
    pub target_bler: f64,
    /// Spectral efficiency per MCS, bit/s/Hz. Linear 0.2..5.5 when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eff: Option<Vec<f64>>,
    /// Bandwidth share per UE, Hz.
    #[serde(default = "default_bw_ue")]
    pub bw_ue: f64,
    #[serde(default = "default_harq_rtt")]
    pub harq_rtt: f64,
    #[serde(default = "default_max_harq")]
    pub max_harq: u32,
    #[serde(default = "default_rlc_rtt")]
    pub rlc_rtt: f64,
    /// HARQ cycles (initial plus RLC-triggered) before a packet is dropped.
    #[serde(default = "default_max_rlc")]
    pub max_rlc: u32,
    /// Core network latency added once per leg, seconds.
    #[serde(default = "default_core_latency")]
    pub core_latency: f64,
    #[serde(default = "default_packet_bytes")]
    pub packet_bytes: u32,
    /// Channel samples averaged for MCS selection; 1 means instantaneous.
    #[serde(default = "default_snr_avg_samples")]
    pub snr_avg_samples: usize,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            mcs_count: default_mcs_count(),
            gamma0: default_gamma0(),
            gamma_step: default_gamma_step(),
            k_slope: default_k_slope(),
            target_bler: default_target_bler(),
            eff: None,
            bw_ue: default_bw_ue(),
            harq_rtt: default_harq_rtt(),
            max_harq: default_max_harq(),
            rlc_rtt: default_rlc_rtt(),
            max_rlc: default_max_rlc(),
            core_latency: default_core_latency(),
            packet_bytes: default_packet_bytes(),
            snr_avg_samples: default_snr_avg_samples(),
        }
    }
}

impl LinkParams {
    /// SNR threshold (50 % BLER point) of `mcs`.
    pub fn threshold(&self, mcs: usize) -> f64 {
        self.gamma0 + mcs as f64 * self.gamma_step
    }

    pub fn efficiency(&self, mcs: usize) -> f64 {
        match &self.eff {
            Some(table) => table[mcs],
            None => linear_efficiency(mcs, self.mcs_count),
        }
    }

    pub fn efficiency_table(&self) -> Vec<f64> {
        (0..self.mcs_count).map(|m| self.efficiency(m)).collect()
    }

    pub fn max_attempts(&self) -> u32 {
        self.max_harq * self.max_rlc
    }
}

fn linear_efficiency(mcs: usize, count: usize) -> f64 {
    const LO: f64 = 0.2;
    const HI: f64 = 5.5;
    if count <= 1 {
        return LO;
    }
    LO + (HI - LO) * mcs as f64 / (count - 1) as f64
}

/// Block error probability at `snr` for `mcs`.
pub fn bler(snr: f64, mcs: usize, p: &LinkParams) -> f64 {
    1.0 / (1.0 + (p.k_slope * (snr - p.threshold(mcs))).exp())
}

/// Highest MCS meeting the BLER target, or 0 when none does.
pub fn select_mcs(snr: f64, p: &LinkParams) -> usize {
    (0..p.mcs_count).rev().find(|&m| bler(snr, m, p) <= p.target_bler).unwrap_or(0)
}

/// Air time of one transmission, seconds.
pub fn service_time(bytes: u32, mcs: usize, p: &LinkParams) -> f64 {
    8.0 * bytes as f64 / (p.efficiency(mcs) * p.bw_ue)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Leg {
    #[serde(rename = "UL")]
    Ul,
    #[serde(rename = "DL")]
    Dl,
}

impl fmt::Display for Leg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Leg::Ul => "UL",
            Leg::Dl => "DL",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Packet<T> {
    pub bytes: u32,
    pub enqueue_t: f64,
    pub payload: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkOutcome {
    pub delivered: bool,
    pub attempts: u32,
    pub enqueue_t: f64,
    /// Completion of the last attempt (success or final failure).
    pub deliver_t: f64,
    /// `deliver_t - enqueue_t + core_latency`.
    pub delay: f64,
    pub mcs_used: usize,
    pub leg: Leg,
}

/// Counters accumulated between two metric windows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinkCounters {
    pub attempts: u64,
    pub failures: u64,
    pub retx: u64,
    pub mcs_sum: u64,
    pub bler_sum: f64,
    pub delivered: u64,
    pub dropped: u64,
}

impl LinkCounters {
    pub fn merge(&mut self, o: &LinkCounters) {
        self.attempts += o.attempts;
        self.failures += o.failures;
        self.retx += o.retx;
        self.mcs_sum += o.mcs_sum;
        self.bler_sum += o.bler_sum;
        self.delivered += o.delivered;
        self.dropped += o.dropped;
    }

    pub fn avg_mcs(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.mcs_sum as f64 / self.attempts as f64)
    }

    /// Fraction of failed attempts.
    pub fn avg_bler(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.failures as f64 / self.attempts as f64)
    }
}

#[derive(Clone, Debug)]
struct InService<T> {
    packet: Packet<T>,
    attempts: u32,
    failures_in_cycle: u32,
    cycle: u32,
    next_start: f64,
    last_mcs: usize,
}

/// FIFO server for one UE and direction.
#[derive(Clone, Debug)]
pub struct LinkState<T> {
    pub leg: Leg,
    queue: VecDeque<Packet<T>>,
    current: Option<InService<T>>,
    busy_until: f64,
    current_mcs: usize,
    snr_history: VecDeque<f64>,
    window: LinkCounters,
    total: LinkCounters,
    enqueued: u64,
}

impl<T> LinkState<T> {
    pub fn new(leg: Leg) -> Self {
        LinkState {
            leg,
            queue: VecDeque::new(),
            current: None,
            busy_until: 0.0,
            current_mcs: 0,
            snr_history: VecDeque::new(),
            window: LinkCounters::default(),
            total: LinkCounters::default(),
            enqueued: 0,
        }
    }

    /// Packets must be enqueued in non-decreasing `enqueue_t` order.
    pub fn enqueue(&mut self, packet: Packet<T>) {
        debug_assert!(self.queue.back().map_or(true, |b| b.enqueue_t <= packet.enqueue_t));
        self.enqueued += 1;
        self.queue.push_back(packet);
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    pub fn current_mcs(&self) -> usize {
        self.current_mcs
    }

    /// Packets waiting or in service.
    pub fn backlog(&self) -> usize {
        self.queue.len() + usize::from(self.current.is_some())
    }

    pub fn enqueued(&self) -> u64 {
        self.enqueued
    }

    pub fn totals(&self) -> LinkCounters {
        self.total
    }

    /// Returns and resets the per-window counters.
    pub fn take_window(&mut self) -> LinkCounters {
        std::mem::take(&mut self.window)
    }

    /// Record the channel sample used by subsequent attempts.
    pub fn observe_snr(&mut self, snr: f64, p: &LinkParams) {
        self.snr_history.push_back(snr);
        while self.snr_history.len() > p.snr_avg_samples.max(1) {
            self.snr_history.pop_front();
        }
    }

    fn selection_snr(&self, fallback: f64) -> f64 {
        if self.snr_history.is_empty() {
            fallback
        } else {
            self.snr_history.iter().sum::<f64>() / self.snr_history.len() as f64
        }
    }

    /// Resolve every attempt that starts before `horizon`, using `snr` as the
    /// channel state. Completed packets are returned in FIFO order.
    pub fn service<R: Rng + ?Sized>(
        &mut self,
        horizon: f64,
        snr: f64,
        rng: &mut R,
        p: &LinkParams,
    ) -> Vec<(LinkOutcome, T)> {
        let mut done = Vec::new();
        let mcs = select_mcs(self.selection_snr(snr), p);
        let block_error = bler(snr, mcs, p);
        loop {
            let mut cur = match self.current.take() {
                Some(cur) => cur,
                None => {
                    let Some(packet) = self.queue.pop_front() else { break };
                    let start = packet.enqueue_t.max(self.busy_until);
                    InService { packet, attempts: 0, failures_in_cycle: 0, cycle: 0, next_start: start, last_mcs: 0 }
                }
            };
            if cur.next_start >= horizon {
                self.current = Some(cur);
                break;
            }

            let end = cur.next_start + service_time(cur.packet.bytes, mcs, p);
            let failed = rng.random::<f64>() < block_error;
            let is_retx = cur.attempts > 0;
            cur.attempts += 1;
            cur.last_mcs = mcs;
            self.current_mcs = mcs;
            self.busy_until = end;
            self.bump(|c| {
                c.attempts += 1;
                c.mcs_sum += mcs as u64;
                c.bler_sum += block_error;
                c.retx += u64::from(is_retx);
                c.failures += u64::from(failed);
            });

            if failed {
                cur.failures_in_cycle += 1;
                let retry_after = if cur.failures_in_cycle < p.max_harq {
                    Some(p.harq_rtt)
                } else if cur.cycle + 1 < p.max_rlc {
                    cur.cycle += 1;
                    cur.failures_in_cycle = 0;
                    Some(p.rlc_rtt)
                } else {
                    None
                };
                if let Some(wait) = retry_after {
                    cur.next_start = end + wait;
                    // Retransmission waits hold the server.
                    self.busy_until = cur.next_start;
                    self.current = Some(cur);
                    continue;
                }
            }

            self.bump(|c| {
                if failed {
                    c.dropped += 1;
                } else {
                    c.delivered += 1;
                }
            });
            let outcome = LinkOutcome {
                delivered: !failed,
                attempts: cur.attempts,
                enqueue_t: cur.packet.enqueue_t,
                deliver_t: end,
                delay: end - cur.packet.enqueue_t + p.core_latency,
                mcs_used: cur.last_mcs,
                leg: self.leg,
            };
            done.push((outcome, cur.packet.payload));
        }
        done
    }

    fn bump(&mut self, f: impl Fn(&mut LinkCounters)) {
        f(&mut self.window);
        f(&mut self.total);
    }
}

/// Enqueue `packet` at `now` and serve it to completion at a constant SNR.
pub fn transmit<T, R: Rng + ?Sized>(
    packet: Packet<T>,
    state: &mut LinkState<T>,
    snr_now: f64,
    now: f64,
    rng: &mut R,
    p: &LinkParams,
) -> LinkOutcome {
    let packet = Packet { enqueue_t: now, ..packet };
    state.enqueue(packet);
    let mut done = state.service(f64::INFINITY, snr_now, rng, p);
    done.pop().expect("infinite horizon completes the queue").0
}

/// End-to-end delay of a relayed packet; `None` if either leg dropped it.
pub fn e2e_delay(ul: &LinkOutcome, dl: &LinkOutcome) -> Option<f64> {
    (ul.delivered && dl.delivered).then(|| ul.delay + dl.delay)
}
