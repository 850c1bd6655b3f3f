//! Deterministic co-simulation of a vehicle platoon over a cellular link.

pub mod bus;
pub mod channel;
pub mod config;
pub mod control;
pub mod geometry;
pub mod link;
pub mod metrics;
pub mod mobility;
pub mod orchestrator;
pub mod rng;
