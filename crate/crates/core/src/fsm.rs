//! Charging session state machine.
//!
//! A session binds one EV to one EVSE and walks
//! `Mated -> Initialize -> Check -> Charge -> PowerDown -> Unmated`, with
//! fault, timeout and unplug edges back to earlier states. Each forward phase
//! is one request/response round trip:
//!
//! | state      | EV sends           | response moves to |
//! |------------|--------------------|-------------------|
//! | Mated      | `SessionSetupReq`  | Initialize        |
//! | Initialize | `CableCheckReq`    | Check             |
//! | Check      | `PowerDeliveryReq` | Charge            |
//! | Charge     | `ChargingStatusReq`| Charge (loop)     |
//! | PowerDown  | `SessionStopReq`   | PowerDown         |
//!
//! The machine is a pure function over session values; the runner owns all
//! mutation and scheduling.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{battery_step, BatteryState, EvConfig, EvseConfig};
use crate::telemetry::{Layer, RecordKind, Source, TelemetryRecord};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Unmated,
    Mated,
    Initialize,
    Check,
    Charge,
    PowerDown,
}

impl SessionState {
    pub const ALL: [SessionState; 6] = [
        SessionState::Unmated,
        SessionState::Mated,
        SessionState::Initialize,
        SessionState::Check,
        SessionState::Charge,
        SessionState::PowerDown,
    ];

    /// Request the EV issues while in this state, if any.
    pub fn request(self) -> Option<V2gKind> {
        match self {
            SessionState::Mated => Some(V2gKind::SessionSetupReq),
            SessionState::Initialize => Some(V2gKind::CableCheckReq),
            SessionState::Check => Some(V2gKind::PowerDeliveryReq),
            SessionState::Charge => Some(V2gKind::ChargingStatusReq),
            SessionState::PowerDown => Some(V2gKind::SessionStopReq),
            SessionState::Unmated => None,
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum V2gKind {
    SessionSetupReq,
    SessionSetupRes,
    CableCheckReq,
    CableCheckRes,
    PowerDeliveryReq,
    PowerDeliveryRes,
    ChargingStatusReq,
    ChargingStatusRes,
    SessionStopReq,
    SessionStopRes,
}

impl V2gKind {
    pub fn is_request(self) -> bool {
        matches!(
            self,
            V2gKind::SessionSetupReq
                | V2gKind::CableCheckReq
                | V2gKind::PowerDeliveryReq
                | V2gKind::ChargingStatusReq
                | V2gKind::SessionStopReq
        )
    }

    pub fn response(self) -> Option<V2gKind> {
        match self {
            V2gKind::SessionSetupReq => Some(V2gKind::SessionSetupRes),
            V2gKind::CableCheckReq => Some(V2gKind::CableCheckRes),
            V2gKind::PowerDeliveryReq => Some(V2gKind::PowerDeliveryRes),
            V2gKind::ChargingStatusReq => Some(V2gKind::ChargingStatusRes),
            V2gKind::SessionStopReq => Some(V2gKind::SessionStopRes),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2gMessage {
    pub kind: V2gKind,
    pub session_id: String,
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    /// Fall back one phase and retry.
    Recoverable,
    /// Terminate the session.
    Abort,
    /// Cut power immediately.
    Emergency,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    PlugIn,
    PlugOut,
    MsgArrived(V2gMessage),
    Timeout,
    FaultRaised { code: String, severity: Severity },
    SocFull,
    UserInterrupt,
}

impl SessionEvent {
    pub fn fault(code: impl Into<String>, severity: Severity) -> Self {
        SessionEvent::FaultRaised {
            code: code.into(),
            severity,
        }
    }

    fn label(&self) -> String {
        match self {
            SessionEvent::PlugIn => "PlugIn".into(),
            SessionEvent::PlugOut => "PlugOut".into(),
            SessionEvent::MsgArrived(m) => format!("MsgArrived({:?})", m.kind),
            SessionEvent::Timeout => "Timeout".into(),
            SessionEvent::FaultRaised { code, severity } => {
                format!("FaultRaised({code}, {severity:?})")
            }
            SessionEvent::SocFull => "SocFull".into(),
            SessionEvent::UserInterrupt => "UserInterrupt".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Awaiting {
    pub kind: V2gKind,
    pub deadline: SimTime,
}

#[derive(Debug, Error, PartialEq)]
pub enum FsmError {
    #[error("event {event} is illegal in state {state} (session {session})")]
    IllegalEvent {
        session: String,
        state: SessionState,
        event: String,
    },
    #[error("EVSE {evse} is occupied by session {session}")]
    EvseOccupied { evse: String, session: String },
}

pub const ABRUPT_DISCONNECT: &str = "abrupt-disconnect";

#[derive(Debug, Clone, PartialEq)]
pub struct ChargingSession {
    pub id: String,
    pub state: SessionState,
    pub ev_id: String,
    pub evse_id: String,
    pub state_entered_at: SimTime,
    pub awaiting: Option<Awaiting>,
    pub delivered_kw: f64,
    pub error_flag: Option<String>,
    /// min(EV max rate, EVSE max power).
    pub power_limit_kw: f64,
    pub timeout_s: f64,
    pub heartbeat_interval_s: f64,
    pub power_down_ramp_s: f64,
    /// Power at the moment PowerDown was entered, for the ramp profile.
    pub ramp_from_kw: f64,
    energy_cursor: f64,
    last_status_req: Option<f64>,
}

/// Result of feeding one event to a session.
#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    pub session: ChargingSession,
    pub messages: Vec<V2gMessage>,
    pub records: Vec<TelemetryRecord>,
}

impl ChargingSession {
    pub fn is_active(&self) -> bool {
        self.state != SessionState::Unmated
    }

    /// Power shown by the EVSE during the power-down ramp. Zero elsewhere
    /// except in Charge, where it is `delivered_kw`.
    pub fn output_kw(&self, now: f64) -> f64 {
        match self.state {
            SessionState::Charge => self.delivered_kw,
            SessionState::PowerDown if self.power_down_ramp_s > 0.0 => {
                let elapsed = now - self.state_entered_at.seconds;
                self.ramp_from_kw * (1.0 - elapsed / self.power_down_ramp_s).clamp(0.0, 1.0)
            }
            _ => 0.0,
        }
    }

    /// Instant the power-down ramp completes.
    pub fn ramp_end(&self) -> f64 {
        self.state_entered_at.seconds + self.power_down_ramp_s
    }

    fn message(&self, kind: V2gKind, payload: Value) -> V2gMessage {
        V2gMessage {
            kind,
            session_id: self.id.clone(),
            payload,
        }
    }

    fn request(&mut self, kind: V2gKind, now: SimTime) -> V2gMessage {
        let expects = kind.response().expect("requests have responses");
        self.awaiting = Some(Awaiting {
            kind: expects,
            deadline: SimTime::at(now.seconds + self.timeout_s),
        });
        if kind == V2gKind::ChargingStatusReq {
            self.last_status_req = Some(now.seconds);
        }
        let payload = match kind {
            V2gKind::SessionSetupReq => json!({ "evcc_id": self.ev_id }),
            V2gKind::PowerDeliveryReq => json!({ "charge_progress": "Start" }),
            V2gKind::SessionStopReq => json!({ "charging_session": "Terminate" }),
            _ => json!({}),
        };
        self.message(kind, payload)
    }

    fn enter(&mut self, to: SessionState, now: SimTime) {
        self.state = to;
        self.state_entered_at = now;
        if to != SessionState::Charge {
            self.delivered_kw = 0.0;
        }
        if to == SessionState::Unmated {
            self.awaiting = None;
        }
    }
}

fn transition_record(
    s: &ChargingSession,
    from: SessionState,
    cause: &str,
    now: SimTime,
) -> TelemetryRecord {
    let mut payload = json!({
        "from": from,
        "to": s.state,
        "cause": cause,
        "ev_id": s.ev_id,
    });
    if let Some(flag) = &s.error_flag {
        payload["error_flag"] = json!(flag);
    }
    TelemetryRecord::new(
        now.seconds,
        Source::Evse(s.evse_id.clone()),
        RecordKind::StateTransition,
        payload,
    )
    .session(s.id.clone())
    .layer(Layer::L2)
}

/// Occupancy and session-id bookkeeping for one EVSE.
#[derive(Debug, Clone, PartialEq)]
pub struct EvseSlot {
    pub config: EvseConfig,
    occupant: Option<String>,
    sessions_started: u32,
}

impl EvseSlot {
    pub fn new(config: EvseConfig) -> Self {
        Self {
            config,
            occupant: None,
            sessions_started: 0,
        }
    }

    pub fn occupant(&self) -> Option<&str> {
        self.occupant.as_deref()
    }

    /// Frees the EVSE once its session has reached Unmated.
    pub fn release(&mut self, session: &ChargingSession) {
        if !session.is_active() && self.occupant.as_deref() == Some(session.id.as_str()) {
            self.occupant = None;
        }
    }

    /// Attaches `ev`, producing a new session in Mated that has already
    /// issued its `SessionSetupReq`.
    pub fn plug_in(
        &mut self,
        ev: &EvConfig,
        now: SimTime,
        power_down_ramp_s: f64,
    ) -> Result<Advance, FsmError> {
        if let Some(session) = &self.occupant {
            return Err(FsmError::EvseOccupied {
                evse: self.config.id.clone(),
                session: session.clone(),
            });
        }
        self.sessions_started += 1;
        let id = format!("{}-s{}", self.config.id, self.sessions_started);
        let mut session = ChargingSession {
            id: id.clone(),
            state: SessionState::Mated,
            ev_id: ev.id.clone(),
            evse_id: self.config.id.clone(),
            state_entered_at: now,
            awaiting: None,
            delivered_kw: 0.0,
            error_flag: None,
            power_limit_kw: ev.max_charge_rate_kw.min(self.config.max_power_kw),
            timeout_s: self.config.charge_status_timeout_s,
            heartbeat_interval_s: self.config.heartbeat_interval_s,
            power_down_ramp_s,
            ramp_from_kw: 0.0,
            energy_cursor: now.seconds,
            last_status_req: None,
        };
        let msg = session.request(V2gKind::SessionSetupReq, now);
        let record = transition_record(&session, SessionState::Unmated, "PlugIn", now);
        self.occupant = Some(id);
        Ok(Advance {
            session,
            messages: vec![msg],
            records: vec![record],
        })
    }
}

/// Applies one event to a session.
pub fn advance(
    mut s: ChargingSession,
    ev: SessionEvent,
    now: SimTime,
) -> Result<Advance, FsmError> {
    use SessionState::*;

    let from = s.state;
    let label = ev.label();
    let illegal = |s: &ChargingSession| FsmError::IllegalEvent {
        session: s.id.clone(),
        state: s.state,
        event: label.clone(),
    };
    let mut messages = Vec::new();

    match (from, &ev) {
        (Unmated, SessionEvent::PlugOut) => {
            return Ok(Advance {
                session: s,
                messages,
                records: Vec::new(),
            })
        }
        (Unmated, _) | (_, SessionEvent::PlugIn) => return Err(illegal(&s)),

        (_, SessionEvent::Timeout) => {
            let Some(awaiting) = s.awaiting else {
                return Err(illegal(&s));
            };
            s.error_flag = Some(format!("timeout:{:?}", awaiting.kind));
            s.enter(Unmated, now);
        }
        (_, SessionEvent::PlugOut) => {
            if !matches!(from, Mated | PowerDown) {
                s.error_flag = Some(ABRUPT_DISCONNECT.into());
            }
            s.enter(Unmated, now);
        }

        (_, SessionEvent::MsgArrived(msg)) => {
            let expected = s.awaiting.map(|a| a.kind);
            if expected != Some(msg.kind) || msg.session_id != s.id {
                return Err(illegal(&s));
            }
            s.awaiting = None;
            match from {
                Mated => {
                    s.enter(Initialize, now);
                    messages.push(s.request(V2gKind::CableCheckReq, now));
                }
                Initialize => {
                    s.enter(Check, now);
                    messages.push(s.request(V2gKind::PowerDeliveryReq, now));
                }
                Check => {
                    s.enter(Charge, now);
                    s.delivered_kw = s.power_limit_kw;
                    s.energy_cursor = now.seconds;
                    messages.push(s.request(V2gKind::ChargingStatusReq, now));
                }
                Charge | PowerDown => {
                    // Loop acknowledgement; no state change.
                    return Ok(Advance {
                        session: s,
                        messages,
                        records: Vec::new(),
                    });
                }
                Unmated => unreachable!(),
            }
        }

        (Charge, SessionEvent::SocFull | SessionEvent::UserInterrupt) => {
            s.ramp_from_kw = s.delivered_kw;
            s.enter(PowerDown, now);
            messages.push(s.request(V2gKind::SessionStopReq, now));
        }
        (_, SessionEvent::SocFull | SessionEvent::UserInterrupt) => return Err(illegal(&s)),

        (_, SessionEvent::FaultRaised { code, severity }) => match (from, severity) {
            (PowerDown, Severity::Recoverable) => {
                return Ok(Advance {
                    session: s,
                    messages,
                    records: Vec::new(),
                });
            }
            (_, Severity::Abort | Severity::Emergency) => {
                s.error_flag = Some(code.clone());
                s.enter(Unmated, now);
            }
            (Mated | Initialize | Charge, Severity::Recoverable) => {
                s.error_flag = Some(code.clone());
                s.enter(Mated, now);
                messages.push(s.request(V2gKind::SessionSetupReq, now));
            }
            (Check, Severity::Recoverable) => {
                s.error_flag = Some(code.clone());
                s.enter(Initialize, now);
                messages.push(s.request(V2gKind::CableCheckReq, now));
            }
            (Unmated, _) => unreachable!(),
        },
    }

    let records = vec![transition_record(&s, from, &label, now)];
    Ok(Advance {
        session: s,
        messages,
        records,
    })
}

/// Unplugs the cable. Total over all states.
pub fn plug_out(s: ChargingSession, now: SimTime) -> Advance {
    advance(s, SessionEvent::PlugOut, now).expect("PlugOut is legal in every state")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutcome {
    pub session: ChargingSession,
    /// `ChargingStatusReq`, when the heartbeat interval has elapsed.
    pub message: Option<V2gMessage>,
    pub battery: BatteryState,
    /// The battery reached 100 %; the caller should feed `SocFull`.
    pub soc_full: bool,
}

/// One charging-loop step: integrates energy since the previous step and
/// emits the status heartbeat.
///
/// `power_factor` scales the delivered power (1.0 when undisturbed). A
/// heartbeat sent while an older one is still unanswered keeps the older
/// deadline.
pub fn charging_tick(
    mut s: ChargingSession,
    ev_cfg: &EvConfig,
    b: BatteryState,
    now: SimTime,
    power_factor: f64,
) -> Result<TickOutcome, FsmError> {
    if s.state != SessionState::Charge {
        return Err(FsmError::IllegalEvent {
            session: s.id.clone(),
            state: s.state,
            event: "ChargingTick".into(),
        });
    }
    debug_assert_eq!(ev_cfg.id, s.ev_id);
    let dt = now.seconds - s.energy_cursor;
    let mut battery = b;
    if dt > 0.0 {
        let kw = (s.delivered_kw * power_factor).clamp(0.0, s.power_limit_kw);
        if kw > 0.0 {
            battery = battery_step(b, kw, dt);
        }
        s.energy_cursor = now.seconds;
    }

    let due = s
        .last_status_req
        .map_or(true, |last| now.seconds - last >= s.heartbeat_interval_s - 1e-9);
    let message = if due {
        let previous = s.awaiting;
        let mut msg = s.request(V2gKind::ChargingStatusReq, now);
        msg.payload = json!({ "soc": battery.soc });
        if let Some(prev) = previous.filter(|a| a.kind == V2gKind::ChargingStatusRes) {
            s.awaiting = Some(prev);
        }
        Some(msg)
    } else {
        None
    };

    Ok(TickOutcome {
        session: s,
        message,
        soc_full: battery.is_full(),
        battery,
    })
}

/// EVSE-side answer to an EV request.
pub fn respond(req: &V2gMessage, evse: &EvseConfig, output_kw: f64) -> Option<V2gMessage> {
    let kind = req.kind.response()?;
    let payload = match kind {
        V2gKind::SessionSetupRes => json!({ "response_code": "OK", "evse_id": evse.id }),
        V2gKind::ChargingStatusRes => json!({
            "response_code": "OK",
            "evse_max_power_kw": evse.max_power_kw,
            "delivered_kw": output_kw,
        }),
        _ => json!({ "response_code": "OK" }),
    };
    Some(V2gMessage {
        kind,
        session_id: req.session_id.clone(),
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev() -> EvConfig {
        EvConfig {
            id: "EV1".into(),
            battery_capacity_kwh: 50.0,
            initial_soc: 0.5,
            max_charge_rate_kw: 22.0,
            plug_in_time_s: 0.0,
            target_evse: "A".into(),
            interrupt_at_s: None,
        }
    }

    fn slot() -> EvseSlot {
        EvseSlot::new(EvseConfig::new("A", 22.0))
    }

    fn t(s: f64) -> SimTime {
        SimTime::at(s)
    }

    fn reply(s: &ChargingSession) -> SessionEvent {
        let kind = s.awaiting.expect("awaiting").kind;
        SessionEvent::MsgArrived(V2gMessage {
            kind,
            session_id: s.id.clone(),
            payload: json!({}),
        })
    }

    /// Drives a fresh session up to Charge.
    fn charging_session() -> ChargingSession {
        let mut slot = slot();
        let mut s = slot.plug_in(&ev(), t(0.0), 5.0).unwrap().session;
        for k in 1..=3 {
            let e = reply(&s);
            s = advance(s, e, t(k as f64)).unwrap().session;
        }
        assert_eq!(s.state, SessionState::Charge);
        s
    }

    #[test]
    fn plug_in_enters_mated() {
        let mut slot = slot();
        let a = slot.plug_in(&ev(), t(5.0), 5.0).unwrap();
        assert_eq!(a.session.state, SessionState::Mated);
        assert_eq!(a.session.state_entered_at.seconds, 5.0);
        assert_eq!(a.messages[0].kind, V2gKind::SessionSetupReq);
        assert_eq!(a.records.len(), 1);
    }

    #[test]
    fn occupied_evse_rejects_plug_in() {
        let mut slot = slot();
        slot.plug_in(&ev(), t(0.0), 5.0).unwrap();
        assert!(matches!(
            slot.plug_in(&ev(), t(1.0), 5.0),
            Err(FsmError::EvseOccupied { .. })
        ));
    }

    #[test]
    fn sequential_sessions_get_fresh_ids() {
        let mut slot = slot();
        let first = slot.plug_in(&ev(), t(0.0), 5.0).unwrap().session;
        let first = plug_out(first, t(1.0)).session;
        slot.release(&first);
        let second = slot.plug_in(&ev(), t(2.0), 5.0).unwrap().session;
        assert_ne!(first.id, second.id);
    }

    #[test]
    fn check_to_charge_arms_status_deadline() {
        let s = charging_session();
        let a = s.awaiting.unwrap();
        assert_eq!(a.kind, V2gKind::ChargingStatusRes);
        assert_eq!(a.deadline.seconds, 3.0 + 2.0);
        assert_eq!(s.delivered_kw, 22.0);
    }

    #[test]
    fn recoverable_fault_in_charge_returns_to_mated() {
        let s = charging_session();
        let a = advance(s, SessionEvent::fault("overheat", Severity::Recoverable), t(4.0)).unwrap();
        assert_eq!(a.session.state, SessionState::Mated);
        assert_eq!(a.session.delivered_kw, 0.0);
        assert_eq!(a.messages[0].kind, V2gKind::SessionSetupReq);
    }

    #[test]
    fn plug_out_during_charge_is_abrupt() {
        let s = charging_session();
        let a = advance(s, SessionEvent::PlugOut, t(4.0)).unwrap();
        assert_eq!(a.session.state, SessionState::Unmated);
        assert_eq!(a.session.error_flag.as_deref(), Some(ABRUPT_DISCONNECT));
        assert_eq!(a.records.len(), 1);
        assert_eq!(a.records[0].payload["error_flag"], ABRUPT_DISCONNECT);
    }

    #[test]
    fn emergency_skips_power_down() {
        let s = charging_session();
        let a = advance(s, SessionEvent::fault("fire", Severity::Emergency), t(4.0)).unwrap();
        assert_eq!(a.session.state, SessionState::Unmated);
    }

    #[test]
    fn check_faults_retry_or_abort() {
        let mut slot = slot();
        let mut s = slot.plug_in(&ev(), t(0.0), 5.0).unwrap().session;
        for k in 1..=2 {
            let e = reply(&s);
            s = advance(s, e, t(k as f64)).unwrap().session;
        }
        assert_eq!(s.state, SessionState::Check);
        let retry = advance(s.clone(), SessionEvent::fault("ground", Severity::Recoverable), t(3.0))
            .unwrap();
        assert_eq!(retry.session.state, SessionState::Initialize);
        let abort = advance(s, SessionEvent::fault("ground", Severity::Abort), t(3.0)).unwrap();
        assert_eq!(abort.session.state, SessionState::Unmated);
    }

    #[test]
    fn spoofed_auth_in_initialize_reverts_to_mated() {
        let mut slot = slot();
        let s = slot.plug_in(&ev(), t(0.0), 5.0).unwrap().session;
        let e = reply(&s);
        let s = advance(s, e, t(1.0)).unwrap().session;
        assert_eq!(s.state, SessionState::Initialize);
        let a = advance(s, SessionEvent::fault("spoofed-auth", Severity::Recoverable), t(2.0)).unwrap();
        assert_eq!(a.session.state, SessionState::Mated);
    }

    #[test]
    fn timeout_requires_awaiting() {
        let mut s = charging_session();
        s.awaiting = None;
        assert!(matches!(
            advance(s, SessionEvent::Timeout, t(9.0)),
            Err(FsmError::IllegalEvent { .. })
        ));
    }

    #[test]
    fn timeout_terminates_with_flag() {
        let s = charging_session();
        let a = advance(s, SessionEvent::Timeout, t(5.0)).unwrap();
        assert_eq!(a.session.state, SessionState::Unmated);
        assert!(a.session.error_flag.unwrap().starts_with("timeout"));
    }

    #[test]
    fn unexpected_message_is_illegal() {
        let s = charging_session();
        let stray = SessionEvent::MsgArrived(V2gMessage {
            kind: V2gKind::SessionSetupRes,
            session_id: s.id.clone(),
            payload: json!({}),
        });
        assert!(advance(s, stray, t(4.0)).is_err());
    }

    #[test]
    fn tick_near_full_reaches_clamp() {
        let mut s = charging_session();
        let b = BatteryState::new(0.999, 50.0);
        // Cursor sits at Charge entry (t=3); one second of 22 kW adds 0.000122.
        let out = charging_tick(s.clone(), &ev(), b, t(4.0), 1.0).unwrap();
        assert!(!out.soc_full);
        s = out.session;
        let mut b = out.battery;
        let mut now = 4.0;
        while !b.is_full() {
            now += 1.0;
            let out = charging_tick(s, &ev(), b, t(now), 1.0).unwrap();
            s = out.session;
            b = out.battery;
            if out.soc_full {
                break;
            }
        }
        assert_eq!(b.soc, 1.0);
        // 0.001 * 50 kWh / 22 kW = 8.18 s
        assert_eq!(now, 3.0 + 9.0);
    }

    #[test]
    fn zero_power_tick_still_sends_heartbeat() {
        let mut s = charging_session();
        s.delivered_kw = 0.0;
        let b = BatteryState::new(0.4, 50.0);
        let out = charging_tick(s, &ev(), b, t(4.0), 1.0).unwrap();
        assert_eq!(out.battery.soc, 0.4);
        assert_eq!(out.message.unwrap().kind, V2gKind::ChargingStatusReq);
    }

    #[test]
    fn unanswered_heartbeat_keeps_first_deadline() {
        let s = charging_session();
        let b = BatteryState::new(0.4, 50.0);
        let out = charging_tick(s, &ev(), b, t(4.0), 1.0).unwrap();
        assert_eq!(out.session.awaiting.unwrap().deadline.seconds, 5.0);
        let out = charging_tick(out.session, &ev(), out.battery, t(5.0), 1.0).unwrap();
        assert_eq!(out.session.awaiting.unwrap().deadline.seconds, 5.0);
    }

    #[test]
    fn plug_out_examples() {
        let s = charging_session();
        let a = advance(s, SessionEvent::SocFull, t(10.0)).unwrap();
        assert_eq!(a.session.state, SessionState::PowerDown);
        assert_eq!(a.session.delivered_kw, 0.0);
        assert!((a.session.output_kw(12.5) - 11.0).abs() < 1e-12);
        let done = plug_out(a.session, t(15.0));
        assert_eq!(done.session.state, SessionState::Unmated);
        assert_eq!(done.session.error_flag, None);
        let again = plug_out(done.session.clone(), t(16.0));
        assert_eq!(again.session, done.session);
        assert!(again.records.is_empty());
    }
}
