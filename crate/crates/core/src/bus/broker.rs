//! In-process broker core: subscriptions, QoS-0 fan-out, per-client inboxes.
//!
//! Iteration is over `BTreeMap`s so delivery order is a function of client
//! ids alone. The TCP broker wraps the same core.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use super::frame::{BusEnvelope, EnvelopeError, Kind};
use super::topic::{match_topic, validate_filter, validate_topic};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BrokerError {
    #[error("client `{0}` is already connected")]
    DuplicateClient(String),
    #[error("broker is full ({0} clients)")]
    Full(usize),
    #[error("client `{0}` is not connected")]
    NotConnected(String),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

#[derive(Debug, Default)]
struct ClientSlot {
    filters: BTreeSet<String>,
    inbox: VecDeque<BusEnvelope>,
}

#[derive(Debug)]
pub struct Broker {
    max_clients: usize,
    clients: BTreeMap<String, ClientSlot>,
    published: u64,
    delivered: u64,
}

impl Broker {
    pub fn new(max_clients: usize) -> Self {
        Broker { max_clients, clients: BTreeMap::new(), published: 0, delivered: 0 }
    }

    pub fn connect(&mut self, client_id: &str) -> Result<(), BrokerError> {
        if client_id.is_empty() {
            return Err(EnvelopeError::EmptyClientId.into());
        }
        if self.clients.contains_key(client_id) {
            return Err(BrokerError::DuplicateClient(client_id.to_string()));
        }
        if self.clients.len() >= self.max_clients {
            return Err(BrokerError::Full(self.max_clients));
        }
        self.clients.insert(client_id.to_string(), ClientSlot::default());
        Ok(())
    }

    /// Drops the client's subscriptions and any undelivered messages.
    pub fn disconnect(&mut self, client_id: &str) -> bool {
        self.clients.remove(client_id).is_some()
    }

    pub fn is_connected(&self, client_id: &str) -> bool {
        self.clients.contains_key(client_id)
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    fn slot(&mut self, client_id: &str) -> Result<&mut ClientSlot, BrokerError> {
        self.clients.get_mut(client_id).ok_or_else(|| BrokerError::NotConnected(client_id.to_string()))
    }

    /// Idempotent; returns the SUBACK to send back.
    pub fn subscribe(&mut self, client_id: &str, filter: &str, ts: u64) -> Result<BusEnvelope, BrokerError> {
        validate_filter(filter).map_err(EnvelopeError::from)?;
        self.slot(client_id)?.filters.insert(filter.to_string());
        Ok(BusEnvelope { kind: Kind::Suback, client_id: client_id.to_string(), topic: filter.to_string(), payload: Vec::new(), ts })
    }

    pub fn unsubscribe(&mut self, client_id: &str, filter: &str) -> Result<bool, BrokerError> {
        validate_filter(filter).map_err(EnvelopeError::from)?;
        Ok(self.slot(client_id)?.filters.remove(filter))
    }

    /// Queue `env` for every client with at least one matching filter, once
    /// per client. Returns the recipients in delivery order.
    pub fn publish(&mut self, env: &BusEnvelope) -> Result<Vec<String>, BrokerError> {
        if env.kind != Kind::Pub {
            return Err(EnvelopeError::UnexpectedPayload.into());
        }
        env.validate()?;
        validate_topic(&env.topic).map_err(EnvelopeError::from)?;
        if !self.clients.contains_key(&env.client_id) {
            return Err(BrokerError::NotConnected(env.client_id.clone()));
        }
        self.published += 1;
        let mut recipients = Vec::new();
        for (id, slot) in self.clients.iter_mut() {
            if slot.filters.iter().any(|f| match_topic(f, &env.topic)) {
                slot.inbox.push_back(env.clone());
                recipients.push(id.clone());
            }
        }
        self.delivered += recipients.len() as u64;
        Ok(recipients)
    }

    /// Dispatch an inbound envelope. Returns a reply for the sender, if any.
    pub fn handle(&mut self, env: &BusEnvelope) -> Result<Option<BusEnvelope>, BrokerError> {
        match env.kind {
            Kind::Connect => self.connect(&env.client_id).map(|_| None),
            Kind::Sub => self.subscribe(&env.client_id, &env.topic, env.ts).map(Some),
            Kind::Unsub => self.unsubscribe(&env.client_id, &env.topic).map(|_| None),
            Kind::Pub => self.publish(env).map(|_| None),
            Kind::Suback => Ok(None),
        }
    }

    pub fn poll(&mut self, client_id: &str) -> Option<BusEnvelope> {
        self.clients.get_mut(client_id)?.inbox.pop_front()
    }

    pub fn drain(&mut self, client_id: &str) -> Vec<BusEnvelope> {
        match self.clients.get_mut(client_id) {
            Some(slot) => slot.inbox.drain(..).collect(),
            None => Vec::new(),
        }
    }

    pub fn pending(&self) -> usize {
        self.clients.values().map(|s| s.inbox.len()).sum()
    }

    /// True when no message is waiting in any inbox.
    pub fn is_clean(&self) -> bool {
        self.pending() == 0
    }

    pub fn stats(&self) -> (u64, u64) {
        (self.published, self.delivered)
    }
}
