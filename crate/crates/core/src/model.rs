//! Scenario configuration, validation and the battery / load primitives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackKind, AttackPlan, CSMS_TARGET, ALL_EVSES_TARGET};
use crate::ocpp::CsmsPolicy;

pub const SECONDS_PER_HOUR: f64 = 3600.0;
pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Hourly MW profile with an afternoon/evening peak between 30 and 37 MW.
pub const DAILY_BASELINE_MW: [f64; 24] = [
    14.0, 12.0, 11.0, 10.0, 10.0, 12.0, 16.0, 20.0, 24.0, 26.0, 28.0, 29.0, 31.0, 33.0, 34.0,
    35.0, 36.0, 37.0, 36.0, 34.0, 30.0, 25.0, 20.0, 16.0,
];

fn default_timeout_s() -> f64 {
    2.0
}

fn default_heartbeat_s() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvConfig {
    pub id: String,
    pub battery_capacity_kwh: f64,
    pub initial_soc: f64,
    pub max_charge_rate_kw: f64,
    pub plug_in_time_s: f64,
    pub target_evse: String,
    /// Absolute virtual time at which the driver interrupts charging.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interrupt_at_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvseConfig {
    pub id: String,
    pub max_power_kw: f64,
    #[serde(default)]
    pub location: String,
    #[serde(default = "default_timeout_s")]
    pub charge_status_timeout_s: f64,
    #[serde(default = "default_heartbeat_s")]
    pub heartbeat_interval_s: f64,
}

impl EvseConfig {
    pub fn new(id: impl Into<String>, max_power_kw: f64) -> Self {
        Self {
            id: id.into(),
            max_power_kw,
            location: String::new(),
            charge_status_timeout_s: default_timeout_s(),
            heartbeat_interval_s: default_heartbeat_s(),
        }
    }

    /// Id of the cable link between this EVSE and whichever EV is plugged in.
    pub fn link_id(&self) -> String {
        cable_link_id(&self.id)
    }
}

pub fn cable_link_id(evse_id: &str) -> String {
    format!("cable-{evse_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSettings {
    pub latency_s: f64,
    pub loss_prob: f64,
    pub rto_s: f64,
    pub max_retransmits: u32,
}

impl Default for LinkSettings {
    fn default() -> Self {
        Self {
            latency_s: 0.05,
            loss_prob: 0.0,
            rto_s: 0.2,
            max_retransmits: 5,
        }
    }
}

/// Loop timing knobs. Every field has a default, so the whole block is
/// optional in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub tick_s: f64,
    pub handshake_delay_s: f64,
    pub power_down_ramp_s: f64,
    pub power_sample_interval_s: f64,
    pub link: LinkSettings,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            tick_s: 1.0,
            handshake_delay_s: 0.2,
            power_down_ramp_s: 5.0,
            power_sample_interval_s: 60.0,
            link: LinkSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub evs: Vec<EvConfig>,
    pub evses: Vec<EvseConfig>,
    #[serde(default)]
    pub csms: CsmsPolicy,
    #[serde(default)]
    pub attacks: Vec<AttackPlan>,
    pub schedule_end_s: f64,
    #[serde(default)]
    pub seed: u64,
    /// 24 hourly MW values; empty disables power sampling.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baseline_load_profile: Vec<f64>,
    #[serde(default)]
    pub sim: SimSettings,
}

impl Scenario {
    pub fn empty(schedule_end_s: f64) -> Self {
        Self {
            evs: Vec::new(),
            evses: Vec::new(),
            csms: CsmsPolicy::default(),
            attacks: Vec::new(),
            schedule_end_s,
            seed: 0,
            baseline_load_profile: Vec::new(),
            sim: SimSettings::default(),
        }
    }

    pub fn evse(&self, id: &str) -> Option<&EvseConfig> {
        self.evses.iter().find(|e| e.id == id)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

/// A single broken invariant, located by a JSON-ish path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub reason: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

/// Parses a scenario document, fills defaults and checks per-field ranges.
///
/// Cross-reference checks (ids, occupancy) are left to
/// [`validate_scenario`].
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        match inner.classify() {
            serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
                ScenarioError::Syntax {
                    line: inner.line(),
                    column: inner.column(),
                    message: inner.to_string(),
                }
            }
            _ => ScenarioError::Schema {
                path,
                message: inner.to_string(),
            },
        }
    })?;
    if let Some(v) = range_violations(&scenario).into_iter().next() {
        return Err(ScenarioError::Schema {
            path: v.path,
            message: v.reason,
        });
    }
    Ok(scenario)
}

pub fn serialize_scenario(s: &Scenario) -> String {
    serde_json::to_string_pretty(s).expect("scenario serializes")
}

fn range_violations(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut positive = |path: String, v: f64| {
        if !(v > 0.0 && v.is_finite()) {
            out.push(Violation::new(path, format!("must be positive, got {v}")));
        }
    };
    for (i, ev) in s.evs.iter().enumerate() {
        positive(format!("evs[{i}].battery_capacity_kwh"), ev.battery_capacity_kwh);
        positive(format!("evs[{i}].max_charge_rate_kw"), ev.max_charge_rate_kw);
    }
    for (i, evse) in s.evses.iter().enumerate() {
        positive(format!("evses[{i}].max_power_kw"), evse.max_power_kw);
        positive(
            format!("evses[{i}].charge_status_timeout_s"),
            evse.charge_status_timeout_s,
        );
        positive(
            format!("evses[{i}].heartbeat_interval_s"),
            evse.heartbeat_interval_s,
        );
    }
    positive("schedule_end_s".into(), s.schedule_end_s);
    positive("sim.tick_s".into(), s.sim.tick_s);
    positive("sim.power_sample_interval_s".into(), s.sim.power_sample_interval_s);
    positive("sim.link.rto_s".into(), s.sim.link.rto_s);

    for (i, ev) in s.evs.iter().enumerate() {
        if !(0.0..=1.0).contains(&ev.initial_soc) {
            out.push(Violation::new(
                format!("evs[{i}].initial_soc"),
                format!("must lie in [0, 1], got {}", ev.initial_soc),
            ));
        }
        if !(ev.plug_in_time_s >= 0.0) {
            out.push(Violation::new(
                format!("evs[{i}].plug_in_time_s"),
                "must be nonnegative",
            ));
        }
    }
    if !(s.sim.handshake_delay_s >= 0.0) {
        out.push(Violation::new("sim.handshake_delay_s", "must be nonnegative"));
    }
    if !(s.sim.power_down_ramp_s >= 0.0) {
        out.push(Violation::new("sim.power_down_ramp_s", "must be nonnegative"));
    }
    if !(s.sim.link.latency_s >= 0.0) {
        out.push(Violation::new("sim.link.latency_s", "must be nonnegative"));
    }
    if !(0.0..=1.0).contains(&s.sim.link.loss_prob) {
        out.push(Violation::new("sim.link.loss_prob", "must lie in [0, 1]"));
    }
    if !s.baseline_load_profile.is_empty() {
        if s.baseline_load_profile.len() != 24 {
            out.push(Violation::new(
                "baseline_load_profile",
                format!("needs 24 hourly values, got {}", s.baseline_load_profile.len()),
            ));
        }
        for (h, v) in s.baseline_load_profile.iter().enumerate() {
            if !(*v >= 0.0) {
                out.push(Violation::new(
                    format!("baseline_load_profile[{h}]"),
                    "must be nonnegative",
                ));
            }
        }
    }
    if !(s.csms.cert_latency_s >= 0.0) {
        out.push(Violation::new("csms.cert_latency_s", "must be nonnegative"));
    }
    out
}

/// Returns every invariant breach in `s`; empty means the scenario can run.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = range_violations(s);

    let mut evse_ids = BTreeSet::new();
    for (i, evse) in s.evses.iter().enumerate() {
        if !evse_ids.insert(evse.id.as_str()) {
            out.push(Violation::new(
                format!("evses[{i}].id"),
                format!("duplicate EVSE id {:?}", evse.id),
            ));
        }
    }
    let mut ev_ids = BTreeSet::new();
    for (i, ev) in s.evs.iter().enumerate() {
        if !ev_ids.insert(ev.id.as_str()) {
            out.push(Violation::new(
                format!("evs[{i}].id"),
                format!("duplicate EV id {:?}", ev.id),
            ));
        }
        if !evse_ids.contains(ev.target_evse.as_str()) {
            out.push(Violation::new(
                format!("evs[{i}].target_evse"),
                format!("unresolved EVSE reference {:?}", ev.target_evse),
            ));
        }
    }

    // Occupancy: nominal session windows on one EVSE must not overlap.
    let mut by_evse: BTreeMap<&str, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for (i, ev) in s.evs.iter().enumerate() {
        if let Some(evse) = s.evse(&ev.target_evse) {
            let start = ev.plug_in_time_s;
            let end = start + nominal_session_s(ev, evse, &s.sim);
            by_evse.entry(&ev.target_evse).or_default().push((i, start, end));
        }
    }
    for windows in by_evse.values() {
        for (a, wa) in windows.iter().enumerate() {
            for wb in &windows[a + 1..] {
                if wa.1 <= wb.2 && wb.1 <= wa.2 {
                    let (ea, eb) = (&s.evs[wa.0], &s.evs[wb.0]);
                    out.push(Violation::new(
                        format!("evs[{}].plug_in_time_s", wb.0),
                        format!(
                            "EVs {:?} and {:?} occupy EVSE {:?} at overlapping times",
                            ea.id, eb.id, ea.target_evse
                        ),
                    ));
                }
            }
        }
    }

    let link_ids: BTreeSet<String> = s.evses.iter().map(EvseConfig::link_id).collect();
    for (i, plan) in s.attacks.iter().enumerate() {
        let path = format!("attacks[{i}]");
        let resolves = match plan.kind {
            AttackKind::BrokenWireL1 => link_ids.contains(&plan.target_id),
            AttackKind::BrokenWireL3 => {
                plan.target_id == ALL_EVSES_TARGET || evse_ids.contains(plan.target_id.as_str())
            }
            AttackKind::Fuzzification => plan.target_id == CSMS_TARGET,
        };
        if !resolves {
            out.push(Violation::new(
                format!("{path}.target_id"),
                format!("unresolved reference {:?}", plan.target_id),
            ));
        }
        for (field, reason) in plan.violations() {
            out.push(Violation::new(format!("{path}.{field}"), reason));
        }
    }
    out
}

/// Estimated plug-in-to-unplug duration of an undisturbed session.
pub fn nominal_session_s(ev: &EvConfig, evse: &EvseConfig, sim: &SimSettings) -> f64 {
    let rate = ev.max_charge_rate_kw.min(evse.max_power_kw);
    let charge_s = ev.battery_capacity_kwh * (1.0 - ev.initial_soc) / rate * SECONDS_PER_HOUR;
    let charge_s = match ev.interrupt_at_s {
        Some(at) => charge_s.min((at - ev.plug_in_time_s).max(0.0)),
        None => charge_s,
    };
    // Three handshake round trips, one tick of integration slack, the ramp.
    charge_s + 3.0 * (sim.handshake_delay_s + 2.0 * sim.link.latency_s)
        + sim.tick_s
        + sim.power_down_ramp_s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub soc: f64,
    pub capacity_kwh: f64,
}

impl BatteryState {
    pub fn new(soc: f64, capacity_kwh: f64) -> Self {
        Self {
            soc: soc.clamp(0.0, 1.0),
            capacity_kwh,
        }
    }

    pub fn is_full(&self) -> bool {
        self.soc >= 1.0
    }
}

/// Integrates `delivered_kw` over `dt_s` seconds into the battery.
pub fn battery_step(b: BatteryState, delivered_kw: f64, dt_s: f64) -> BatteryState {
    debug_assert!(delivered_kw >= 0.0 && dt_s > 0.0);
    let gained = delivered_kw * dt_s / (SECONDS_PER_HOUR * b.capacity_kwh);
    BatteryState {
        soc: (b.soc + gained).clamp(0.0, 1.0),
        capacity_kwh: b.capacity_kwh,
    }
}

/// Piecewise-linear hourly load in MW, wrapping every 24 h.
pub fn baseline_load(profile: &[f64], t_s: f64) -> f64 {
    if profile.is_empty() {
        return 0.0;
    }
    let n = profile.len();
    let t = t_s.rem_euclid(SECONDS_PER_DAY);
    let hours = t / SECONDS_PER_HOUR;
    let h = (hours.floor() as usize).min(n - 1);
    let frac = hours - h as f64;
    if frac == 0.0 {
        return profile[h];
    }
    let next = profile[(h + 1) % n];
    profile[h] + (next - profile[h]) * frac
}
