//! Simulated EV-EVSE cable links, packet accounting and the topic bus.
//!
//! Links implement an abstract reliable-delivery layer: every attempt is
//! either delivered after `latency_s` or lost, a loss is retried after
//! `rto_s`, and once `max_retransmits` retries are lost the envelope is
//! counted as errored and reported back to the sender.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::LinkSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: String,
    pub payload: Vec<u8>,
    /// Send time of this attempt, virtual seconds.
    pub sent_at: f64,
    pub attempt: u32,
}

impl Envelope {
    pub fn new(topic: impl Into<String>, payload: Vec<u8>, sent_at: f64) -> Self {
        Self {
            topic: topic.into(),
            payload,
            sent_at,
            attempt: 1,
        }
    }
}

/// Something the link wants the event loop to do later.
#[derive(Debug, Clone, PartialEq)]
pub enum LinkEvent {
    Arrive { at: f64, envelope: Envelope },
    Retransmit { at: f64, envelope: Envelope },
    /// Retransmission budget exhausted.
    Failed { at: f64, envelope: Envelope },
}

impl LinkEvent {
    pub fn at(&self) -> f64 {
        match self {
            LinkEvent::Arrive { at, .. }
            | LinkEvent::Retransmit { at, .. }
            | LinkEvent::Failed { at, .. } => *at,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketCounters {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub retransmitted: u64,
    pub errored: u64,
}

impl PacketCounters {
    fn add(&mut self, o: &PacketCounters) {
        self.sent += o.sent;
        self.delivered += o.delivered;
        self.lost += o.lost;
        self.retransmitted += o.retransmitted;
        self.errored += o.errored;
    }

    pub fn is_zero(&self) -> bool {
        *self == PacketCounters::default()
    }
}

/// Per-second packet counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PacketLog {
    buckets: BTreeMap<u64, PacketCounters>,
}

impl PacketLog {
    fn bucket(&mut self, t: f64) -> &mut PacketCounters {
        self.buckets.entry(t.max(0.0).floor() as u64).or_default()
    }

    pub fn buckets(&self) -> impl Iterator<Item = (u64, &PacketCounters)> {
        self.buckets.iter().map(|(t, c)| (*t, c))
    }

    pub fn insert_bucket(&mut self, t: u64, counters: PacketCounters) {
        self.buckets.entry(t).or_default().add(&counters);
    }

    pub fn totals(&self) -> PacketCounters {
        let mut total = PacketCounters::default();
        for c in self.buckets.values() {
            total.add(c);
        }
        total
    }

    pub fn last_second(&self) -> Option<u64> {
        self.buckets.keys().next_back().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PacketRow {
    pub t: u64,
    pub sent: u64,
    pub delivered: u64,
    pub retransmitted: u64,
    pub errored: u64,
}

/// One row per second in `[from_s, to_s]`, zero-filled.
pub fn packet_series(log: &PacketLog, from_s: u64, to_s: u64) -> Vec<PacketRow> {
    (from_s..=to_s)
        .map(|t| {
            let c = log.buckets.get(&t).copied().unwrap_or_default();
            PacketRow {
                t,
                sent: c.sent,
                delivered: c.delivered,
                retransmitted: c.retransmitted,
                errored: c.errored,
            }
        })
        .collect()
}

pub fn packet_series_csv(rows: &[PacketRow]) -> String {
    let mut out = String::from("t,sent,delivered,retransmitted,errored\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.t, r.sent, r.delivered, r.retransmitted, r.errored
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLink {
    pub id: String,
    pub endpoints: (String, String),
    pub latency_s: f64,
    pub loss_prob: f64,
    pub rto_s: f64,
    pub max_retransmits: u32,
    severed_since: Option<f64>,
    pub log: PacketLog,
}

impl SimLink {
    pub fn new(id: impl Into<String>, endpoints: (String, String), settings: &LinkSettings) -> Self {
        Self {
            id: id.into(),
            endpoints,
            latency_s: settings.latency_s,
            loss_prob: settings.loss_prob,
            rto_s: settings.rto_s,
            max_retransmits: settings.max_retransmits,
            severed_since: None,
            log: PacketLog::default(),
        }
    }

    pub fn severed(&self) -> bool {
        self.severed_since.is_some()
    }

    pub fn severed_since(&self) -> Option<f64> {
        self.severed_since
    }

    fn severed_at(&self, t: f64) -> bool {
        self.severed_since.is_some_and(|since| t >= since)
    }

    pub fn effective_loss_prob(&self, t: f64) -> f64 {
        if self.severed_at(t) {
            1.0
        } else {
            self.loss_prob
        }
    }

    /// Cuts the link from `at` on. Idempotent: the earliest cut wins.
    pub fn sever(&mut self, at: f64) {
        self.severed_since = Some(self.severed_since.map_or(at, |s| s.min(at)));
    }

    pub fn restore(&mut self) {
        self.severed_since = None;
    }

    /// Transmits one attempt of `env` at `now`.
    pub fn send<R: Rng>(&mut self, env: Envelope, rng: &mut R, now: f64) -> LinkEvent {
        debug_assert!(env.attempt >= 1 && env.attempt <= self.max_retransmits + 1);
        let mut env = env;
        env.sent_at = now;
        let counters = self.log.bucket(now);
        counters.sent += 1;
        if env.attempt > 1 {
            counters.retransmitted += 1;
        }
        let p = self.effective_loss_prob(now);
        let lost = if p >= 1.0 {
            true
        } else if p <= 0.0 {
            false
        } else {
            rng.gen_bool(p)
        };
        if lost {
            self.lose(env, now)
        } else {
            LinkEvent::Arrive {
                at: now + self.latency_s,
                envelope: env,
            }
        }
    }

    /// Called by the event loop when an `Arrive` fires. Returns `None` when
    /// the envelope is delivered, otherwise the follow-up event.
    pub fn arrive(&mut self, env: Envelope, now: f64) -> Option<LinkEvent> {
        if self.severed_at(now) {
            return Some(self.lose(env, now));
        }
        self.log.bucket(now).delivered += 1;
        None
    }

    fn lose(&mut self, env: Envelope, now: f64) -> LinkEvent {
        self.log.bucket(now).lost += 1;
        if env.attempt <= self.max_retransmits {
            let at = (env.sent_at + self.rto_s).max(now);
            LinkEvent::Retransmit {
                at,
                envelope: Envelope {
                    attempt: env.attempt + 1,
                    ..env
                },
            }
        } else {
            self.log.bucket(now).errored += 1;
            LinkEvent::Failed { at: now, envelope: env }
        }
    }
}

/// Where a topic's subscriber lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub endpoint: String,
    /// Link carrying traffic to this endpoint; `None` for in-process
    /// delivery.
    pub link: Option<String>,
}

/// In-process topic router between daemons.
#[derive(Debug, Clone, Default)]
pub struct Bus {
    routes: BTreeMap<String, Route>,
}

impl Bus {
    pub fn subscribe(&mut self, topic: impl Into<String>, route: Route) {
        self.routes.insert(topic.into(), route);
    }

    pub fn route(&self, topic: &str) -> Option<&Route> {
        self.routes.get(topic)
    }
}

pub fn ev_topic(ev_id: &str) -> String {
    format!("ev/{ev_id}/v2g")
}

pub fn evse_topic(evse_id: &str) -> String {
    format!("evse/{evse_id}/v2g")
}
