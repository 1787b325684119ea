//! Deterministic discrete-event loop driving EVs, EVSEs, links, the CSMS
//! and scheduled attacks, plus the reports built from a finished run.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::attack::{
    exec_broken_wire_l1, exec_broken_wire_l3, fuzz_summary_csv, schedule, summarize_fuzz,
    AttackKind, AttackPhase, FuzzCampaign, FuzzPlan, FuzzRecord, PowerDisruptionParams,
    PowerModifier, ScheduledAttack, ALL_EVSES_TARGET,
};
use crate::fsm::{
    advance, charging_tick, plug_out, respond, Advance, ChargingSession, EvseSlot, FsmError,
    SessionEvent, SessionState, V2gMessage,
};
use crate::model::{baseline_load, validate_scenario, BatteryState, EvConfig, Scenario, Violation};
use crate::net::{
    ev_topic, evse_topic, packet_series, packet_series_csv, Bus, Envelope, LinkEvent,
    PacketCounters, PacketLog, Route, SimLink,
};
use crate::ocpp::{csms_handle, CsmsState, OcppAction, OcppFrame};
use crate::telemetry::{
    Layer, Query, RecordKind, Source, TelemetryError, TelemetryRecord, TelemetryStore,
};
use crate::time::SimTime;

/// How EV and EVSE daemons are coupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimDriver {
    /// Messages pass directly between the state machines.
    Mock,
    /// Messages travel over the simulated cable link.
    #[default]
    Linked,
}

impl FromStr for SimDriver {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(SimDriver::Mock),
            "linked" => Ok(SimDriver::Linked),
            other => Err(format!("unknown driver {other:?} (expected mock or linked)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RunExit {
    Completed,
    /// The schedule ended with work outstanding.
    Interrupted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub store: TelemetryStore,
    pub packet_logs: BTreeMap<String, PacketLog>,
    pub fuzz_records: Option<Vec<FuzzRecord>>,
    pub exit: RunExit,
    pub end_s: f64,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario is invalid: {}", format_violations(.0))]
    ScenarioInvalid(Vec<Violation>),
    #[error("internal invariant violated: {0}")]
    InternalInvariantViolation(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("{}: {}", v.path, v.reason))
        .collect::<Vec<_>>()
        .join("; ")
}

impl From<FsmError> for RunError {
    fn from(e: FsmError) -> Self {
        RunError::InternalInvariantViolation(e.to_string())
    }
}

impl From<TelemetryError> for RunError {
    fn from(e: TelemetryError) -> Self {
        RunError::InternalInvariantViolation(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Sleep so virtual time tracks wall-clock time.
    pub realtime: bool,
}

#[derive(Debug, Clone)]
enum Event {
    ScenarioEnd,
    PlugIn(usize),
    Interrupt(usize),
    Tick(u64),
    PowerSample(u64),
    Attack(ScheduledAttack),
    FuzzStep(usize),
    Link { link: usize, event: LinkEvent },
    Deliver { topic: String, msg: V2gMessage },
    EvseReply { evse: usize, request: V2gMessage },
    Timer { evse: usize, session: String, deadline: f64 },
    RampEnd { evse: usize, session: String },
}

struct Queued {
    at: SimTime,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap and we pop the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.cmp(&self.at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endpoint {
    Ev(usize),
    Evse(usize),
}

struct EvseRt {
    slot: EvseSlot,
    session: Option<ChargingSession>,
    armed_deadline: Option<f64>,
    notifications: u64,
}

struct EvRt {
    cfg: EvConfig,
    battery: BatteryState,
    evse: usize,
}

struct Campaign {
    campaign: FuzzCampaign,
    plan_index: usize,
    done: bool,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    driver: SimDriver,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Queued>,
    store: TelemetryStore,
    evses: Vec<EvseRt>,
    evs: Vec<EvRt>,
    links: Vec<SimLink>,
    bus: Bus,
    endpoints: BTreeMap<String, Endpoint>,
    csms: CsmsState,
    modifiers: Vec<PowerModifier>,
    campaigns: Vec<Campaign>,
    fuzz_records: Vec<FuzzRecord>,
    pending_plug_ins: usize,
    link_rng: ChaCha8Rng,
    power_rng: ChaCha8Rng,
}

/// Runs `scenario` to its scheduled end.
pub fn run(scenario: &Scenario, driver: SimDriver) -> Result<RunResult, RunError> {
    run_with(scenario, driver, RunOptions::default())
}

pub fn run_with(scenario: &Scenario, driver: SimDriver, options: RunOptions) -> Result<RunResult, RunError> {
    let violations = validate_scenario(scenario);
    if !violations.is_empty() {
        return Err(RunError::ScenarioInvalid(violations));
    }
    let sim = Sim::new(scenario, driver)?;
    sim.run(options)
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario, driver: SimDriver) -> Result<Self, RunError> {
        let mut link_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        link_rng.set_stream(0);
        let mut power_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        power_rng.set_stream(2);

        let mut bus = Bus::default();
        let mut endpoints = BTreeMap::new();
        let mut links = Vec::new();
        let mut evses = Vec::new();
        for (i, cfg) in scenario.evses.iter().enumerate() {
            let link_id = cfg.link_id();
            links.push(SimLink::new(
                link_id.clone(),
                ("ev".into(), format!("evse:{}", cfg.id)),
                &scenario.sim.link,
            ));
            let endpoint = format!("evse:{}", cfg.id);
            bus.subscribe(
                evse_topic(&cfg.id),
                Route {
                    endpoint: endpoint.clone(),
                    link: Some(link_id),
                },
            );
            endpoints.insert(endpoint, Endpoint::Evse(i));
            evses.push(EvseRt {
                slot: EvseSlot::new(cfg.clone()),
                session: None,
                armed_deadline: None,
                notifications: 0,
            });
        }
        let mut evs = Vec::new();
        for (i, cfg) in scenario.evs.iter().enumerate() {
            let evse = scenario
                .evses
                .iter()
                .position(|e| e.id == cfg.target_evse)
                .ok_or_else(|| RunError::InternalInvariantViolation(format!("EV {} has no EVSE", cfg.id)))?;
            let endpoint = format!("ev:{}", cfg.id);
            bus.subscribe(
                ev_topic(&cfg.id),
                Route {
                    endpoint: endpoint.clone(),
                    link: Some(scenario.evses[evse].link_id()),
                },
            );
            endpoints.insert(endpoint, Endpoint::Ev(i));
            evs.push(EvRt {
                cfg: cfg.clone(),
                battery: BatteryState::new(cfg.initial_soc, cfg.battery_capacity_kwh),
                evse,
            });
        }

        let mut modifiers = Vec::new();
        for plan in &scenario.attacks {
            if plan.kind != AttackKind::BrokenWireL3 {
                continue;
            }
            let params = PowerDisruptionParams::from_plan(plan).map_err(RunError::InternalInvariantViolation)?;
            let window = (plan.start_s, plan.end_s().unwrap_or(f64::INFINITY));
            modifiers.push(PowerModifier {
                evse_ids: targeted_evses(scenario, &plan.target_id).into_iter().collect(),
                params,
                window,
            });
        }

        Ok(Self {
            scenario,
            driver,
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            store: TelemetryStore::new(),
            evses,
            evs,
            links,
            bus,
            endpoints,
            csms: CsmsState::new(),
            modifiers,
            campaigns: Vec::new(),
            fuzz_records: Vec::new(),
            pending_plug_ins: scenario.evs.len(),
            link_rng,
            power_rng,
        })
    }

    /// Event times are snapped to a nanosecond grid so sums of link and
    /// handshake delays stay readable in telemetry.
    fn push(&mut self, at: f64, event: Event) {
        self.seq += 1;
        let at = (at * 1e9).round() / 1e9;
        self.queue.push(Queued {
            at: SimTime::new(at, self.seq),
            event,
        });
    }

    fn record(&mut self, rec: TelemetryRecord) -> Result<(), RunError> {
        self.store.append(rec)?;
        Ok(())
    }

    fn run(mut self, options: RunOptions) -> Result<RunResult, RunError> {
        let s = self.scenario;
        self.record(TelemetryRecord::new(
            0.0,
            Source::Csms,
            RecordKind::ScenarioStart,
            json!({
                "seed": s.seed,
                "evs": s.evs.len(),
                "evses": s.evses.len(),
                "attacks": s.attacks.len(),
                "driver": format!("{:?}", self.driver).to_lowercase(),
                "schedule_end_s": s.schedule_end_s,
            }),
        ))?;

        self.push(s.schedule_end_s, Event::ScenarioEnd);
        let attacks = schedule(&s.attacks, s)
            .map_err(|e| RunError::ScenarioInvalid(vec![Violation::new("attacks", e.to_string())]))?;
        for a in attacks {
            self.push(a.at, Event::Attack(a));
        }
        for (i, ev) in s.evs.iter().enumerate() {
            self.push(ev.plug_in_time_s, Event::PlugIn(i));
            if let Some(at) = ev.interrupt_at_s {
                self.push(at, Event::Interrupt(i));
            }
        }
        self.push(0.0, Event::Tick(0));
        if !s.baseline_load_profile.is_empty() && !s.evses.is_empty() {
            self.push(0.0, Event::PowerSample(0));
        }

        let wall_start = Instant::now();
        while let Some(Queued { at, event }) = self.queue.pop() {
            self.now = at.seconds;
            if options.realtime {
                let target = Duration::from_secs_f64(self.now.max(0.0));
                if let Some(wait) = target.checked_sub(wall_start.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
            if let Event::ScenarioEnd = event {
                return self.finish();
            }
            self.handle(event)?;
        }
        Err(RunError::InternalInvariantViolation("event queue drained before scenario end".into()))
    }

    fn handle(&mut self, event: Event) -> Result<(), RunError> {
        let now = self.now;
        match event {
            Event::ScenarioEnd => unreachable!("handled by the loop"),
            Event::PlugIn(ev) => self.plug_in(ev),
            Event::Interrupt(ev) => self.interrupt(ev),
            Event::Tick(k) => {
                self.tick()?;
                self.push((k + 1) as f64 * self.scenario.sim.tick_s, Event::Tick(k + 1));
                Ok(())
            }
            Event::PowerSample(k) => {
                self.power_sample()?;
                self.push(
                    (k + 1) as f64 * self.scenario.sim.power_sample_interval_s,
                    Event::PowerSample(k + 1),
                );
                Ok(())
            }
            Event::Attack(a) => self.attack(a),
            Event::FuzzStep(c) => self.fuzz_step(c),
            Event::Link { link, event } => self.link_event(link, event),
            Event::Deliver { topic, msg } => self.deliver(&topic, msg),
            Event::EvseReply { evse, request } => self.evse_reply(evse, request),
            Event::Timer {
                evse,
                session,
                deadline,
            } => {
                let fire = self.evses[evse].session.as_ref().is_some_and(|s| {
                    s.id == session && s.is_active() && s.awaiting.is_some_and(|a| a.deadline.seconds == deadline)
                });
                if fire {
                    self.evses[evse].armed_deadline = None;
                    self.step_session(evse, SessionEvent::Timeout)?;
                }
                let _ = now;
                Ok(())
            }
            Event::RampEnd { evse, session } => {
                let due = self.evses[evse]
                    .session
                    .as_ref()
                    .is_some_and(|s| s.id == session && s.state == SessionState::PowerDown);
                if due {
                    let s = self.evses[evse].session.take().expect("checked above");
                    let adv = plug_out(s, SimTime::at(self.now));
                    self.apply(evse, adv)?;
                }
                Ok(())
            }
        }
    }

    fn plug_in(&mut self, ev: usize) -> Result<(), RunError> {
        self.pending_plug_ins -= 1;
        let evse = self.evs[ev].evse;
        let ramp = self.scenario.sim.power_down_ramp_s;
        let now = SimTime::at(self.now);
        match self.evses[evse].slot.plug_in(&self.evs[ev].cfg, now, ramp) {
            Ok(adv) => {
                self.send_status(evse, "Occupied")?;
                self.apply(evse, adv)
            }
            Err(e @ FsmError::EvseOccupied { .. }) => self.record(TelemetryRecord::new(
                self.now,
                Source::Ev(self.evs[ev].cfg.id.clone()),
                RecordKind::Error,
                json!({ "error": "evse-occupied", "message": e.to_string() }),
            )),
            Err(e) => Err(e.into()),
        }
    }

    fn interrupt(&mut self, ev: usize) -> Result<(), RunError> {
        let evse = self.evs[ev].evse;
        let Some(state) = self.evses[evse]
            .session
            .as_ref()
            .filter(|s| s.ev_id == self.evs[ev].cfg.id)
            .map(|s| s.state)
        else {
            return Ok(());
        };
        match state {
            SessionState::Charge => self.step_session(evse, SessionEvent::UserInterrupt),
            SessionState::Mated | SessionState::Initialize | SessionState::Check => {
                self.step_session(evse, SessionEvent::PlugOut)
            }
            SessionState::PowerDown | SessionState::Unmated => Ok(()),
        }
    }

    fn step_session(&mut self, evse: usize, event: SessionEvent) -> Result<(), RunError> {
        let Some(s) = self.evses[evse].session.take() else {
            return Ok(());
        };
        let adv = advance(s, event, SimTime::at(self.now))?;
        self.apply(evse, adv)
    }

    /// Commits a state-machine step: telemetry, outgoing requests, timers
    /// and EVSE release.
    fn apply(&mut self, evse: usize, adv: Advance) -> Result<(), RunError> {
        let Advance {
            session,
            messages,
            records,
        } = adv;
        let entered_power_down = records.iter().any(|r| r.payload["to"] == json!(SessionState::PowerDown))
            && session.state == SessionState::PowerDown;
        for r in records {
            self.record(r)?;
        }
        let ev = self.evs_index(&session.ev_id)?;
        for msg in messages {
            self.send_v2g(Endpoint::Ev(ev), evse_topic(&session.evse_id), msg)?;
        }
        if entered_power_down {
            self.push(
                session.ramp_end(),
                Event::RampEnd {
                    evse,
                    session: session.id.clone(),
                },
            );
        }
        if session.is_active() {
            if let Some(a) = session.awaiting {
                if self.evses[evse].armed_deadline != Some(a.deadline.seconds) {
                    self.evses[evse].armed_deadline = Some(a.deadline.seconds);
                    self.push(
                        a.deadline.seconds,
                        Event::Timer {
                            evse,
                            session: session.id.clone(),
                            deadline: a.deadline.seconds,
                        },
                    );
                }
            }
            self.evses[evse].session = Some(session);
        } else {
            let rt = &mut self.evses[evse];
            rt.slot.release(&session);
            rt.armed_deadline = None;
            self.send_status(evse, "Available")?;
        }
        Ok(())
    }

    fn evs_index(&self, ev_id: &str) -> Result<usize, RunError> {
        match self.endpoints.get(&format!("ev:{ev_id}")) {
            Some(Endpoint::Ev(i)) => Ok(*i),
            _ => Err(RunError::InternalInvariantViolation(format!("unknown EV {ev_id}"))),
        }
    }

    fn endpoint_source(&self, e: Endpoint) -> Source {
        match e {
            Endpoint::Ev(i) => Source::Ev(self.evs[i].cfg.id.clone()),
            Endpoint::Evse(i) => Source::Evse(self.scenario.evses[i].id.clone()),
        }
    }

    fn v2g_record(&self, from: Endpoint, direction: &str, msg: &V2gMessage) -> TelemetryRecord {
        TelemetryRecord::new(
            self.now,
            self.endpoint_source(from),
            RecordKind::V2gMsg,
            json!({ "direction": direction, "msg": msg.kind, "body": msg.payload }),
        )
        .session(msg.session_id.clone())
        .layer(Layer::L2)
    }

    fn send_v2g(&mut self, from: Endpoint, topic: String, msg: V2gMessage) -> Result<(), RunError> {
        self.record(self.v2g_record(from, "send", &msg))?;
        match self.driver {
            SimDriver::Mock => {
                self.push(self.now, Event::Deliver { topic, msg });
            }
            SimDriver::Linked => {
                let link_id = self
                    .bus
                    .route(&topic)
                    .and_then(|r| r.link.clone())
                    .ok_or_else(|| RunError::InternalInvariantViolation(format!("no route for {topic}")))?;
                let link = self
                    .links
                    .iter()
                    .position(|l| l.id == link_id)
                    .ok_or_else(|| RunError::InternalInvariantViolation(format!("no link {link_id}")))?;
                let bytes = serde_json::to_vec(&msg).expect("messages serialize");
                let event = self.links[link].send(Envelope::new(topic, bytes, self.now), &mut self.link_rng, self.now);
                self.push(event.at(), Event::Link { link, event });
            }
        }
        Ok(())
    }

    fn link_event(&mut self, link: usize, event: LinkEvent) -> Result<(), RunError> {
        match event {
            LinkEvent::Arrive { envelope, .. } => match self.links[link].arrive(envelope.clone(), self.now) {
                None => {
                    let msg: V2gMessage = serde_json::from_slice(&envelope.payload)
                        .map_err(|e| RunError::InternalInvariantViolation(format!("corrupt envelope: {e}")))?;
                    self.deliver(&envelope.topic, msg)
                }
                Some(next) => {
                    self.push(next.at(), Event::Link { link, event: next });
                    Ok(())
                }
            },
            LinkEvent::Retransmit { envelope, .. } => {
                let next = self.links[link].send(envelope, &mut self.link_rng, self.now);
                self.push(next.at(), Event::Link { link, event: next });
                Ok(())
            }
            LinkEvent::Failed { envelope, .. } => {
                let id = self.links[link].id.clone();
                self.record(
                    TelemetryRecord::new(
                        self.now,
                        Source::Link(id),
                        RecordKind::Error,
                        json!({
                            "error": "delivery-failed",
                            "topic": envelope.topic,
                            "attempts": envelope.attempt,
                        }),
                    )
                    .layer(Layer::L1),
                )
            }
        }
    }

    fn deliver(&mut self, topic: &str, msg: V2gMessage) -> Result<(), RunError> {
        let endpoint = self
            .bus
            .route(topic)
            .and_then(|r| self.endpoints.get(&r.endpoint))
            .copied()
            .ok_or_else(|| RunError::InternalInvariantViolation(format!("no subscriber for {topic}")))?;
        match endpoint {
            Endpoint::Evse(evse) => {
                let current = self.evses[evse]
                    .session
                    .as_ref()
                    .is_some_and(|s| s.id == msg.session_id && s.is_active());
                if current && msg.kind.is_request() {
                    self.record(self.v2g_record(endpoint, "recv", &msg))?;
                    self.push(
                        self.now + self.scenario.sim.handshake_delay_s,
                        Event::EvseReply { evse, request: msg },
                    );
                }
                Ok(())
            }
            Endpoint::Ev(ev) => {
                let evse = self.evs[ev].evse;
                let expected = self.evses[evse].session.as_ref().is_some_and(|s| {
                    s.id == msg.session_id && s.is_active() && s.awaiting.is_some_and(|a| a.kind == msg.kind)
                });
                if expected {
                    self.record(self.v2g_record(endpoint, "recv", &msg))?;
                    self.step_session(evse, SessionEvent::MsgArrived(msg))?;
                }
                Ok(())
            }
        }
    }

    fn evse_reply(&mut self, evse: usize, request: V2gMessage) -> Result<(), RunError> {
        let Some(session) = self.evses[evse]
            .session
            .as_ref()
            .filter(|s| s.id == request.session_id && s.is_active())
        else {
            return Ok(());
        };
        let output = session.output_kw(self.now);
        let ev_id = session.ev_id.clone();
        if let Some(reply) = respond(&request, &self.scenario.evses[evse], output) {
            self.send_v2g(Endpoint::Evse(evse), ev_topic(&ev_id), reply)?;
        }
        Ok(())
    }

    fn power_factor(&mut self, evse_id: &str) -> f64 {
        let now = self.now;
        let mut f = 1.0;
        for m in &self.modifiers {
            f *= m.factor(evse_id, now, &mut self.power_rng);
        }
        f
    }

    fn tick(&mut self) -> Result<(), RunError> {
        for evse in 0..self.evses.len() {
            let charging = self.evses[evse]
                .session
                .as_ref()
                .is_some_and(|s| s.state == SessionState::Charge);
            if !charging {
                continue;
            }
            let s = self.evses[evse].session.take().expect("checked above");
            let ev = self.evs_index(&s.ev_id)?;
            let factor = self.power_factor(&self.scenario.evses[evse].id.clone());
            let out = charging_tick(s, &self.evs[ev].cfg, self.evs[ev].battery, SimTime::at(self.now), factor)?;
            self.evs[ev].battery = out.battery;
            let session_evse = out.session.evse_id.clone();
            self.apply(
                evse,
                Advance {
                    session: out.session,
                    messages: Vec::new(),
                    records: Vec::new(),
                },
            )?;
            if let Some(msg) = out.message {
                self.send_v2g(Endpoint::Ev(ev), evse_topic(&session_evse), msg)?;
            }
            if out.soc_full {
                self.step_session(evse, SessionEvent::SocFull)?;
            }
        }
        Ok(())
    }

    fn power_sample(&mut self) -> Result<(), RunError> {
        let expected = baseline_load(&self.scenario.baseline_load_profile, self.now);
        let ids: Vec<String> = self.scenario.evses.iter().map(|e| e.id.clone()).collect();
        let mut sum = 0.0;
        for id in &ids {
            sum += self.power_factor(id);
        }
        let factor = sum / ids.len() as f64;
        let delivered = expected * factor;
        self.record(
            TelemetryRecord::new(
                self.now,
                Source::Evse(ALL_EVSES_TARGET.into()),
                RecordKind::PowerSample,
                json!({
                    "expected_mw": expected,
                    "delivered_mw": delivered,
                    "deviation_mw": expected - delivered,
                }),
            )
            .layer(Layer::L3),
        )
    }

    fn send_status(&mut self, evse: usize, status: &str) -> Result<(), RunError> {
        let rt = &mut self.evses[evse];
        rt.notifications += 1;
        let id = format!("{}-{}", rt.slot.config.id, rt.notifications);
        let frame = OcppFrame::call(
            id,
            OcppAction::StatusNotificationReq,
            json!({
                "timestamp": format!("{:.3}", self.now),
                "connectorStatus": status,
                "evseId": evse + 1,
                "connectorId": 1,
            }),
        );
        let reply = csms_handle(&mut self.csms, &self.scenario.csms, &frame, SimTime::at(self.now));
        let mut payload = json!({ "request": frame.to_value(), "latency_s": reply.latency_s });
        if let Some(resp) = &reply.response {
            payload["response"] = resp.to_value();
        }
        let source = Source::Evse(self.scenario.evses[evse].id.clone());
        self.record(TelemetryRecord::new(self.now, source, RecordKind::OcppMsg, payload).layer(Layer::L4))
    }

    fn attack(&mut self, a: ScheduledAttack) -> Result<(), RunError> {
        let plan = &a.plan;
        let now = SimTime::at(self.now);
        match (plan.kind, a.phase) {
            (AttackKind::BrokenWireL1, AttackPhase::Start) => {
                let link = self.link_index(&plan.target_id)?;
                let (severed, mut rec) = exec_broken_wire_l1(self.links[link].clone(), now);
                self.links[link] = severed;
                rec.payload["driver"] = json!(format!("{:?}", self.driver).to_lowercase());
                self.record(rec)
            }
            (AttackKind::BrokenWireL1, AttackPhase::End) => {
                let link = self.link_index(&plan.target_id)?;
                self.links[link].restore();
                self.attack_end(AttackKind::BrokenWireL1, json!({ "target": plan.target_id }))
            }
            (AttackKind::BrokenWireL3, AttackPhase::Start) => {
                let ids = targeted_evses(self.scenario, &plan.target_id);
                let params = PowerDisruptionParams::from_plan(plan).map_err(RunError::InternalInvariantViolation)?;
                let window = (plan.start_s, plan.end_s().unwrap_or(f64::INFINITY));
                let (modifier, rec) = exec_broken_wire_l3(&ids, params, window);
                self.record(rec)?;
                for evse in 0..self.evses.len() {
                    let hit = modifier.targets(&self.scenario.evses[evse].id)
                        && self.evses[evse].session.as_ref().is_some_and(ChargingSession::is_active);
                    if hit {
                        self.step_session(evse, modifier.fault_event())?;
                    }
                }
                Ok(())
            }
            (AttackKind::BrokenWireL3, AttackPhase::End) => {
                self.attack_end(AttackKind::BrokenWireL3, json!({ "target": plan.target_id }))
            }
            (AttackKind::Fuzzification, AttackPhase::Start) => {
                let mut fuzz = FuzzPlan::from_params(&plan.params).map_err(RunError::InternalInvariantViolation)?;
                if plan.params.get("seed").is_none() {
                    fuzz.seed = self.scenario.seed;
                }
                let campaign = FuzzCampaign::new(&fuzz, &self.scenario.csms);
                self.record(
                    TelemetryRecord::new(
                        self.now,
                        Source::Attack,
                        RecordKind::AttackStart,
                        json!({
                            "attack": AttackKind::Fuzzification.label(),
                            "target": plan.target_id,
                            "strategy": fuzz.strategy,
                            "requests": campaign.len(),
                        }),
                    )
                    .layer(Layer::L4),
                )?;
                self.campaigns.push(Campaign {
                    campaign,
                    plan_index: a.index,
                    done: false,
                });
                self.push(self.now, Event::FuzzStep(self.campaigns.len() - 1));
                Ok(())
            }
            (AttackKind::Fuzzification, AttackPhase::End) => {
                if let Some(c) = self.campaigns.iter_mut().find(|c| c.plan_index == a.index && !c.done) {
                    c.done = true;
                    self.attack_end(AttackKind::Fuzzification, json!({ "target": plan.target_id, "completed": false }))?;
                }
                Ok(())
            }
        }
    }

    fn attack_end(&mut self, kind: AttackKind, mut payload: Value) -> Result<(), RunError> {
        payload["attack"] = json!(kind.label());
        self.record(TelemetryRecord::new(self.now, Source::Attack, RecordKind::AttackEnd, payload).layer(kind.layer()))
    }

    fn link_index(&self, id: &str) -> Result<usize, RunError> {
        self.links
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| RunError::InternalInvariantViolation(format!("no link {id}")))
    }

    fn fuzz_step(&mut self, c: usize) -> Result<(), RunError> {
        if self.campaigns[c].done {
            return Ok(());
        }
        let now = SimTime::at(self.now);
        match self.campaigns[c].campaign.step(&mut self.csms, now) {
            Some(Ok(step)) => {
                let mut rec = step.record;
                rec.seq = self.fuzz_records.len() as u64;
                let payload = serde_json::to_value(&rec).expect("fuzz records serialize");
                self.record(
                    TelemetryRecord::new(self.now, Source::Attack, RecordKind::FuzzRecord, payload).layer(Layer::L4),
                )?;
                self.push(self.now + rec.latency_s, Event::FuzzStep(c));
                self.fuzz_records.push(rec);
                Ok(())
            }
            Some(Err(e)) => Err(RunError::InternalInvariantViolation(e.to_string())),
            None => {
                self.campaigns[c].done = true;
                let target = self.scenario.attacks[self.campaigns[c].plan_index].target_id.clone();
                self.attack_end(AttackKind::Fuzzification, json!({ "target": target, "completed": true }))
            }
        }
    }

    fn finish(mut self) -> Result<RunResult, RunError> {
        let active = self
            .evses
            .iter()
            .filter(|e| e.session.as_ref().is_some_and(ChargingSession::is_active))
            .count();
        let fuzz_pending = self.campaigns.iter().any(|c| !c.done);
        let exit = if active == 0 && self.pending_plug_ins == 0 && !fuzz_pending {
            RunExit::Completed
        } else {
            RunExit::Interrupted
        };
        if self.driver == SimDriver::Linked {
            for link in &self.links {
                let buckets: Vec<Value> = link
                    .log
                    .buckets()
                    .map(|(t, c)| json!([t, c.sent, c.delivered, c.lost, c.retransmitted, c.errored]))
                    .collect();
                self.store.append(
                    TelemetryRecord::new(
                        self.now,
                        Source::Link(link.id.clone()),
                        RecordKind::Packet,
                        json!({ "link": link.id, "buckets": buckets }),
                    )
                    .layer(Layer::L1),
                )?;
            }
        }
        self.record(TelemetryRecord::new(
            self.now,
            Source::Csms,
            RecordKind::ScenarioEnd,
            json!({
                "exit": exit,
                "active_sessions": active,
                "fuzz_records": self.fuzz_records.len(),
            }),
        ))?;
        let packet_logs = match self.driver {
            SimDriver::Linked => self.links.into_iter().map(|l| (l.id, l.log)).collect(),
            SimDriver::Mock => BTreeMap::new(),
        };
        Ok(RunResult {
            store: self.store,
            packet_logs,
            fuzz_records: (!self.campaigns.is_empty()).then_some(self.fuzz_records),
            exit,
            end_s: self.now,
        })
    }
}

fn targeted_evses(scenario: &Scenario, target: &str) -> Vec<String> {
    if target == ALL_EVSES_TARGET {
        scenario.evses.iter().map(|e| e.id.clone()).collect()
    } else {
        vec![target.to_owned()]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("no link {0:?} in this run")]
    UnknownLink(String),
    #[error("run has no fuzz records")]
    NoFuzzData,
    #[error("telemetry does not describe a finished run: {0}")]
    Incomplete(String),
}

/// Per-second packet CSV for one link.
pub fn report_packets(result: &RunResult, link_id: &str) -> Result<String, ReportError> {
    let log = result
        .packet_logs
        .get(link_id)
        .ok_or_else(|| ReportError::UnknownLink(link_id.to_owned()))?;
    let last = log.last_second().unwrap_or(0).max(result.end_s.floor() as u64);
    Ok(packet_series_csv(&packet_series(log, 0, last)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerRow {
    pub hour: u64,
    pub expected_mw: f64,
    pub delivered_mw: f64,
    pub deviation_mw: f64,
}

/// Hourly means of the power samples.
pub fn report_power(result: &RunResult) -> Vec<PowerRow> {
    let mut hours: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in result.store.query(&Query::kind(RecordKind::PowerSample)) {
        let hour = (r.ts / crate::model::SECONDS_PER_HOUR).floor() as u64;
        let e = hours.entry(hour).or_default();
        e.0 += r.payload["expected_mw"].as_f64().unwrap_or(0.0);
        e.1 += r.payload["delivered_mw"].as_f64().unwrap_or(0.0);
        e.2 += 1;
    }
    hours
        .into_iter()
        .map(|(hour, (exp, del, n))| {
            let (expected_mw, delivered_mw) = (exp / n as f64, del / n as f64);
            PowerRow {
                hour,
                expected_mw,
                delivered_mw,
                deviation_mw: expected_mw - delivered_mw,
            }
        })
        .collect()
}

pub fn power_csv(rows: &[PowerRow]) -> String {
    let mut out = String::from("hour,expected_mw,delivered_mw,deviation_mw\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.hour, r.expected_mw, r.delivered_mw, r.deviation_mw
        );
    }
    out
}

/// Fuzz outcome table as CSV.
pub fn report_fuzz(result: &RunResult) -> Result<String, ReportError> {
    let records = result.fuzz_records.as_ref().ok_or(ReportError::NoFuzzData)?;
    Ok(fuzz_summary_csv(&summarize_fuzz(records)))
}

impl RunResult {
    /// Rebuilds a result from its exported telemetry.
    pub fn from_store(store: TelemetryStore) -> Result<Self, ReportError> {
        let end = store
            .query(&Query::kind(RecordKind::ScenarioEnd))
            .last()
            .map(|r| (r.ts, r.payload["exit"].clone()))
            .ok_or_else(|| ReportError::Incomplete("missing scenario-end record".into()))?;
        let exit = match end.1.as_str() {
            Some("Completed") => RunExit::Completed,
            Some("Interrupted") => RunExit::Interrupted,
            other => return Err(ReportError::Incomplete(format!("unknown exit {other:?}"))),
        };
        let mut packet_logs = BTreeMap::new();
        for r in store.query(&Query::kind(RecordKind::Packet)) {
            let id = r.payload["link"]
                .as_str()
                .ok_or_else(|| ReportError::Incomplete("packet record without link".into()))?;
            let log: &mut PacketLog = packet_logs.entry(id.to_owned()).or_default();
            for b in r.payload["buckets"].as_array().into_iter().flatten() {
                let n = |i: usize| b.get(i).and_then(Value::as_u64).unwrap_or(0);
                log.insert_bucket(
                    n(0),
                    PacketCounters {
                        sent: n(1),
                        delivered: n(2),
                        lost: n(3),
                        retransmitted: n(4),
                        errored: n(5),
                    },
                );
            }
        }
        let fuzz: Vec<FuzzRecord> = store
            .query(&Query::kind(RecordKind::FuzzRecord))
            .into_iter()
            .map(|r| serde_json::from_value(r.payload.clone()))
            .collect::<Result<_, _>>()
            .map_err(|e| ReportError::Incomplete(format!("bad fuzz record: {e}")))?;
        let fuzz_started = !store
            .query(&Query::kind(RecordKind::AttackStart))
            .iter()
            .all(|r| r.payload["attack"] != json!(AttackKind::Fuzzification.label()));
        Ok(RunResult {
            fuzz_records: fuzz_started.then_some(fuzz),
            store,
            packet_logs,
            exit,
            end_s: end.0,
        })
    }

    /// Writes telemetry and every applicable report into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> std::io::Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let mut written = vec!["telemetry.jsonl".to_owned()];
        self.store
            .export_jsonl(&dir.join("telemetry.jsonl"))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        for link in self.packet_logs.keys() {
            let name = format!("packets_{link}.csv");
            fs::write(dir.join(&name), report_packets(self, link).expect("link exists"))?;
            written.push(name);
        }
        let power = report_power(self);
        if !power.is_empty() {
            fs::write(dir.join("power.csv"), power_csv(&power))?;
            written.push("power.csv".into());
        }
        if let Ok(csv) = report_fuzz(self) {
            fs::write(dir.join("fuzz.csv"), csv)?;
            written.push("fuzz.csv".into());
        }
        Ok(written)
    }
}
