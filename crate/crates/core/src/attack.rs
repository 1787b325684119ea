//! Attack orchestration: broken-wire link and power attacks, OCPP fuzz
//! campaigns and the fuzz outcome classifier.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::fsm::{SessionEvent, Severity};
use crate::model::Scenario;
use crate::net::SimLink;
use crate::ocpp::{
    csms_handle_bytes, csms_restart, encode_frame, schema_for, CsmsPolicy, CsmsState, OcppAction,
    OcppFrame,
};
use crate::telemetry::{Layer, RecordKind, Source, TelemetryRecord};
use crate::time::SimTime;

/// Target id of fuzzification plans.
pub const CSMS_TARGET: &str = "csms";
/// BrokenWireL3 target selecting every EVSE.
pub const ALL_EVSES_TARGET: &str = "*";
/// Fault code raised on sessions hit by a power disruption.
pub const POWER_DISRUPTION: &str = "power-disruption";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    BrokenWireL1,
    BrokenWireL3,
    Fuzzification,
}

impl AttackKind {
    pub fn layer(self) -> Layer {
        match self {
            AttackKind::BrokenWireL1 => Layer::L1,
            AttackKind::BrokenWireL3 => Layer::L3,
            AttackKind::Fuzzification => Layer::L4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AttackKind::BrokenWireL1 => "broken-wire-l1",
            AttackKind::BrokenWireL3 => "broken-wire-l3",
            AttackKind::Fuzzification => "fuzzification",
        }
    }
}

fn empty_object() -> Value {
    json!({})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    pub kind: AttackKind,
    /// Link id, EVSE id (or `*`), or `csms`.
    pub target_id: String,
    pub start_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default = "empty_object")]
    pub params: Value,
}

impl AttackPlan {
    pub fn end_s(&self) -> Option<f64> {
        self.duration_s.map(|d| self.start_s + d)
    }

    /// Field-level problems as `(field, reason)` pairs.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |field: &str, reason: String| out.push((field.to_owned(), reason));
        if !(self.start_s.is_finite() && self.start_s >= 0.0) {
            push("start_s", format!("must be a nonnegative number, got {}", self.start_s));
        }
        if let Some(d) = self.duration_s {
            if !(d.is_finite() && d > 0.0) {
                push("duration_s", format!("must be positive, got {d}"));
            }
        }
        match self.kind {
            AttackKind::BrokenWireL1 => {}
            AttackKind::BrokenWireL3 => {
                if self.duration_s.is_none() {
                    push("duration_s", "required for broken-wire-l3".into());
                }
                match PowerDisruptionParams::from_plan(self) {
                    Ok(p) => {
                        for (field, reason) in p.violations() {
                            push(&format!("params.{field}"), reason);
                        }
                    }
                    Err(e) => push("params", e),
                }
            }
            AttackKind::Fuzzification => {
                if self.params.get("strategy").is_none() {
                    push("params.strategy", "required for fuzzification".into());
                } else {
                    match FuzzPlan::from_params(&self.params) {
                        Ok(p) => {
                            for (field, reason) in p.violations() {
                                push(&format!("params.{field}"), reason);
                            }
                        }
                        Err(e) => push("params", e),
                    }
                }
            }
        }
        out
    }
}

fn default_reduction() -> f64 {
    0.45
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerDisruptionParams {
    #[serde(default = "default_reduction")]
    pub reduction_factor: f64,
    #[serde(default)]
    pub jitter: f64,
}

impl Default for PowerDisruptionParams {
    fn default() -> Self {
        Self {
            reduction_factor: default_reduction(),
            jitter: 0.0,
        }
    }
}

impl PowerDisruptionParams {
    pub fn from_plan(plan: &AttackPlan) -> Result<Self, String> {
        serde_json::from_value(plan.params.clone()).map_err(|e| e.to_string())
    }

    fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.reduction_factor > 0.0 && self.reduction_factor < 1.0) {
            out.push((
                "reduction_factor".into(),
                format!("must lie in (0, 1), got {}", self.reduction_factor),
            ));
        }
        if !(0.0..=0.05).contains(&self.jitter) {
            out.push(("jitter".into(), format!("must lie in [0, 0.05], got {}", self.jitter)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuzzStrategy {
    Random,
    StateBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MutationMode {
    None,
    DropRequired,
    WrongType,
    EnumOutOfRange,
    UnknownField,
    TruncateJson,
}

impl MutationMode {
    pub const ALL: [MutationMode; 6] = [
        MutationMode::None,
        MutationMode::DropRequired,
        MutationMode::WrongType,
        MutationMode::EnumOutOfRange,
        MutationMode::UnknownField,
        MutationMode::TruncateJson,
    ];
}

fn default_repetitions() -> u32 {
    100
}

fn default_actions() -> Vec<OcppAction> {
    OcppAction::ALL.to_vec()
}

fn default_modes() -> BTreeSet<MutationMode> {
    [MutationMode::None].into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuzzPlan {
    pub strategy: FuzzStrategy,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_actions")]
    pub actions: Vec<OcppAction>,
    #[serde(default = "default_modes")]
    pub mutation_modes: BTreeSet<MutationMode>,
    /// Sequence indices (within one repetition) that receive a mutation.
    #[serde(default)]
    pub injection_points: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Tokens used for `idToken` fields; falls back to the CSMS's known
    /// tokens when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub id_tokens: Vec<String>,
}

impl FuzzPlan {
    pub fn new(strategy: FuzzStrategy) -> Self {
        Self {
            strategy,
            repetitions: default_repetitions(),
            actions: default_actions(),
            mutation_modes: default_modes(),
            injection_points: Vec::new(),
            seed: 0,
            id_tokens: Vec::new(),
        }
    }

    pub fn from_params(params: &Value) -> Result<Self, String> {
        serde_json::from_value(params.clone()).map_err(|e| e.to_string())
    }

    fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.repetitions == 0 {
            out.push(("repetitions".into(), "must be at least 1".into()));
        }
        if self.actions.is_empty() {
            out.push(("actions".into(), "must not be empty".into()));
        }
        if self.mutation_modes.is_empty() {
            out.push(("mutation_modes".into(), "must not be empty".into()));
        }
        out
    }
}

/// Fuzz outcome `(wire type, bucket)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OutcomeCode {
    /// (3,1)
    AcceptedClean,
    /// (3,2)
    AcceptedNotImplemented,
    /// (3,3)
    AcceptedJsonParseError,
    /// (3,4)
    AcceptedServerStopped,
    /// (4,5)
    RejectedFormat,
    /// (4,6)
    RejectedNonexistent,
    /// (4,7)
    RejectedUnprocessable,
}

impl OutcomeCode {
    pub const ALL: [OutcomeCode; 7] = [
        OutcomeCode::AcceptedClean,
        OutcomeCode::AcceptedNotImplemented,
        OutcomeCode::AcceptedJsonParseError,
        OutcomeCode::AcceptedServerStopped,
        OutcomeCode::RejectedFormat,
        OutcomeCode::RejectedNonexistent,
        OutcomeCode::RejectedUnprocessable,
    ];

    pub fn bucket(self) -> u8 {
        self as u8 + 1
    }

    pub fn wire_type(self) -> u8 {
        if self.bucket() <= 4 {
            3
        } else {
            4
        }
    }

    pub fn from_pair(wire_type: u8, bucket: u8) -> Option<Self> {
        let code = *Self::ALL.get(usize::from(bucket).checked_sub(1)?)?;
        (code.wire_type() == wire_type).then_some(code)
    }
}

impl fmt::Display for OutcomeCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.wire_type(), self.bucket())
    }
}

impl Serialize for OutcomeCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.wire_type(), self.bucket()].serialize(s)
    }
}

impl<'de> Deserialize<'de> for OutcomeCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [w, b] = <[u8; 2]>::deserialize(d)?;
        OutcomeCode::from_pair(w, b)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid outcome code ({w},{b})")))
    }
}

mod utf8_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzRecord {
    pub seq: u64,
    pub action: OcppAction,
    /// Mutation actually applied, after fallbacks.
    pub mutation: MutationMode,
    #[serde(with = "utf8_bytes")]
    pub sent: Vec<u8>,
    pub outcome: OutcomeCode,
    pub latency_s: f64,
    pub server_alive_after: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("attack {index} ({kind}) targets unknown id {target:?}")]
    UnresolvedTarget {
        index: usize,
        kind: &'static str,
        target: String,
    },
    #[error("attack {index}: {message}")]
    InvalidParams { index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("CSMS answered with a CALL frame")]
    Unclassifiable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttackPhase {
    End,
    Start,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledAttack {
    pub at: f64,
    pub phase: AttackPhase,
    /// Index into the scenario's attack list.
    pub index: usize,
    pub plan: AttackPlan,
}

/// Timed start/end events for `plans`, ordered by time. At equal times an
/// end precedes a start, so windows are half-open.
pub fn schedule(plans: &[AttackPlan], scenario: &Scenario) -> Result<Vec<ScheduledAttack>, AttackError> {
    let mut events = Vec::new();
    for (index, plan) in plans.iter().enumerate() {
        let resolves = match plan.kind {
            AttackKind::BrokenWireL1 => scenario.evses.iter().any(|e| e.link_id() == plan.target_id),
            AttackKind::BrokenWireL3 => {
                plan.target_id == ALL_EVSES_TARGET || scenario.evse(&plan.target_id).is_some()
            }
            AttackKind::Fuzzification => plan.target_id == CSMS_TARGET,
        };
        if !resolves {
            return Err(AttackError::UnresolvedTarget {
                index,
                kind: plan.kind.label(),
                target: plan.target_id.clone(),
            });
        }
        events.push(ScheduledAttack {
            at: plan.start_s,
            phase: AttackPhase::Start,
            index,
            plan: plan.clone(),
        });
        if let Some(end) = plan.end_s() {
            events.push(ScheduledAttack {
                at: end,
                phase: AttackPhase::End,
                index,
                plan: plan.clone(),
            });
        }
    }
    events.sort_by(|a, b| {
        a.at.total_cmp(&b.at)
            .then(a.phase.cmp(&b.phase))
            .then(a.index.cmp(&b.index))
    });
    Ok(events)
}

fn attack_record(kind: RecordKind, plan_kind: AttackKind, at: SimTime, payload: Value) -> TelemetryRecord {
    TelemetryRecord::new(at.seconds, Source::Attack, kind, payload).layer(plan_kind.layer())
}

/// Severs `link` from `at` and returns the attack-start record.
pub fn exec_broken_wire_l1(mut link: SimLink, at: SimTime) -> (SimLink, TelemetryRecord) {
    link.sever(at.seconds);
    let record = attack_record(
        RecordKind::AttackStart,
        AttackKind::BrokenWireL1,
        at,
        json!({ "attack": AttackKind::BrokenWireL1.label(), "target": link.id }),
    );
    (link, record)
}

/// Active power disruption on a set of EVSEs.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerModifier {
    pub evse_ids: BTreeSet<String>,
    pub params: PowerDisruptionParams,
    /// Half-open `[start, end)` window in seconds.
    pub window: (f64, f64),
}

impl PowerModifier {
    pub fn targets(&self, evse_id: &str) -> bool {
        self.evse_ids.contains(evse_id)
    }

    pub fn active_at(&self, t: f64) -> bool {
        t >= self.window.0 && t < self.window.1
    }

    /// Power multiplier for one EVSE at `t`. Draws one jitter sample when
    /// the modifier applies and the jitter is nonzero.
    pub fn factor<R: Rng>(&self, evse_id: &str, t: f64, rng: &mut R) -> f64 {
        if !self.active_at(t) || !self.targets(evse_id) {
            return 1.0;
        }
        (1.0 - self.params.reduction_factor + self.jitter(rng)).clamp(0.0, 1.0)
    }

    pub fn jitter<R: Rng>(&self, rng: &mut R) -> f64 {
        let j = self.params.jitter;
        if j > 0.0 {
            rng.gen_range(-j..=j)
        } else {
            0.0
        }
    }

    /// Event delivered once to each session on a targeted EVSE at window
    /// start.
    pub fn fault_event(&self) -> SessionEvent {
        SessionEvent::fault(POWER_DISRUPTION, Severity::Recoverable)
    }
}

/// Starts a power disruption over `window` and returns the modifier plus
/// its attack-start record.
pub fn exec_broken_wire_l3(
    evse_ids: &[String],
    p: PowerDisruptionParams,
    window: (f64, f64),
) -> (PowerModifier, TelemetryRecord) {
    debug_assert!(window.0 < window.1);
    let modifier = PowerModifier {
        evse_ids: evse_ids.iter().cloned().collect(),
        params: p,
        window,
    };
    let record = attack_record(
        RecordKind::AttackStart,
        AttackKind::BrokenWireL3,
        SimTime::at(window.0),
        json!({
            "attack": AttackKind::BrokenWireL3.label(),
            "targets": modifier.evse_ids,
            "reduction_factor": p.reduction_factor,
            "jitter": p.jitter,
            "window": [window.0, window.1],
        }),
    );
    (modifier, record)
}

const TOKEN_CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

fn random_string<R: Rng>(rng: &mut R, max_len: usize) -> String {
    let len = rng.gen_range(1..=max_len.clamp(1, 16));
    (0..len)
        .map(|_| char::from(TOKEN_CHARS[rng.gen_range(0..TOKEN_CHARS.len())]))
        .collect()
}

/// Schema-conforming random instance. Optional object members appear with
/// probability one half.
fn gen_value<R: Rng>(schema: &Value, key: &str, tokens: &[String], rng: &mut R) -> Value {
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        return options[rng.gen_range(0..options.len())].clone();
    }
    match schema.get("type").and_then(Value::as_str) {
        Some("object") => {
            let required: BTreeSet<&str> = schema
                .get("required")
                .and_then(Value::as_array)
                .map(|r| r.iter().filter_map(Value::as_str).collect())
                .unwrap_or_default();
            let mut obj = Map::new();
            if let Some(props) = schema.get("properties").and_then(Value::as_object) {
                for (name, sub) in props {
                    if required.contains(name.as_str()) || rng.gen_bool(0.5) {
                        obj.insert(name.clone(), gen_value(sub, name, tokens, rng));
                    }
                }
            }
            Value::Object(obj)
        }
        Some("array") => {
            let n = rng.gen_range(0..=3);
            let items = schema.get("items").cloned().unwrap_or(Value::Null);
            Value::Array((0..n).map(|_| gen_value(&items, key, tokens, rng)).collect())
        }
        Some("string") => {
            let max = schema.get("maxLength").and_then(Value::as_u64).unwrap_or(16) as usize;
            match tokens {
                [_, ..] if key == "idToken" => json!(tokens[rng.gen_range(0..tokens.len())]),
                _ => json!(random_string(rng, max)),
            }
        }
        Some("integer") => json!(rng.gen_range(0..10)),
        Some("number") => json!(rng.gen_range(0.0..100.0)),
        Some("boolean") => json!(rng.gen_bool(0.5)),
        _ => Value::Null,
    }
}

/// Pointer paths (RFC 6901) of every nested position in `v`, excluding the
/// root.
fn positions(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let p = format!("{prefix}/{k}");
                out.push(p.clone());
                positions(child, &p, out);
            }
        }
        Value::Array(a) => {
            for (i, child) in a.iter().enumerate() {
                let p = format!("{prefix}/{i}");
                out.push(p.clone());
                positions(child, &p, out);
            }
        }
        _ => {}
    }
}

/// Sub-schema addressing the value at a pointer.
fn schema_at<'a>(schema: &'a Value, pointer: &str) -> Option<&'a Value> {
    let mut s = schema;
    for part in pointer.split('/').skip(1) {
        s = if s.get("type").and_then(Value::as_str) == Some("array") {
            s.get("items")?
        } else {
            s.get("properties")?.get(part)?
        };
    }
    Some(s)
}

fn split_pointer(pointer: &str) -> (&str, &str) {
    pointer.rsplit_once('/').expect("non-root pointer")
}

fn wrong_type_for(schema: &Value) -> Value {
    match schema.get("type").and_then(Value::as_str) {
        Some("string") => json!(42),
        Some("integer") | Some("number") => json!("not-a-number"),
        Some("boolean") => json!("true"),
        Some("array") => json!({}),
        _ => json!([]),
    }
}

fn mutate<R: Rng>(schema: &Value, payload: &mut Value, mode: MutationMode, rng: &mut R) -> MutationMode {
    let mut all = Vec::new();
    positions(payload, "", &mut all);
    match mode {
        MutationMode::None | MutationMode::TruncateJson => mode,
        MutationMode::DropRequired => {
            let droppable: Vec<&String> = all
                .iter()
                .filter(|p| {
                    let (parent, key) = split_pointer(p);
                    schema_at(schema, parent)
                        .and_then(|s| s.get("required"))
                        .and_then(Value::as_array)
                        .is_some_and(|r| r.iter().any(|n| n == key))
                })
                .collect();
            match droppable.choose(rng) {
                Some(p) => {
                    let (parent, key) = split_pointer(p);
                    if let Some(Value::Object(m)) = payload.pointer_mut(parent) {
                        m.remove(key);
                    }
                    mode
                }
                None => mutate(schema, payload, MutationMode::UnknownField, rng),
            }
        }
        MutationMode::WrongType => match all.choose(rng) {
            Some(p) => {
                let replacement = wrong_type_for(schema_at(schema, p).unwrap_or(&Value::Null));
                *payload.pointer_mut(p).expect("position exists") = replacement;
                mode
            }
            None => mutate(schema, payload, MutationMode::UnknownField, rng),
        },
        MutationMode::EnumOutOfRange => {
            let enums: Vec<&String> = all
                .iter()
                .filter(|p| schema_at(schema, p).is_some_and(|s| s.get("enum").is_some()))
                .collect();
            match enums.choose(rng) {
                Some(p) => {
                    *payload.pointer_mut(p).expect("position exists") =
                        json!(format!("Fuzz{}", random_string(rng, 8)));
                    mode
                }
                None => mutate(schema, payload, MutationMode::WrongType, rng),
            }
        }
        MutationMode::UnknownField => {
            if let Value::Object(m) = payload {
                m.insert(format!("fuzz_{}", random_string(rng, 8)), json!(random_string(rng, 8)));
            }
            mode
        }
    }
}

/// One generated request.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMessage {
    pub bytes: Vec<u8>,
    /// Mode applied after fallbacks for inapplicable mutations.
    pub mode: MutationMode,
}

/// Seeded schema-driven request generator.
#[derive(Debug, Clone)]
pub struct MessageGenerator {
    rng: ChaCha8Rng,
    tokens: Vec<String>,
}

impl MessageGenerator {
    pub fn new(seed: u64, tokens: Vec<String>) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            tokens,
        }
    }

    pub fn from_rng(rng: ChaCha8Rng, tokens: Vec<String>) -> Self {
        Self { rng, tokens }
    }

    pub fn generate(&mut self, action: OcppAction, mode: MutationMode) -> GeneratedMessage {
        let rng = &mut self.rng;
        let schema = schema_for(action);
        let mut payload = gen_value(schema, "", &self.tokens, rng);
        let mode = mutate(schema, &mut payload, mode, rng);
        let id = format!("{:08x}", rng.gen::<u32>());
        let header_len = format!("[2,\"{id}\",\"{}\",", action.wire_name()).len();
        let mut bytes = encode_frame(&OcppFrame::call(id, action, payload));
        if mode == MutationMode::TruncateJson {
            let cut = rng.gen_range(header_len..bytes.len());
            bytes.truncate(cut);
        }
        GeneratedMessage { bytes, mode }
    }
}

/// Single generated request, see [`MessageGenerator`].
pub fn gen_message<R: Rng>(action: OcppAction, mode: MutationMode, rng: &mut R) -> Vec<u8> {
    let rng = ChaCha8Rng::from_rng(rng).expect("seeding from an RNG does not fail");
    MessageGenerator::from_rng(rng, Vec::new()).generate(action, mode).bytes
}

const FORMAT_FAMILY: &[&str] = &[
    "FormatViolation",
    "FormationViolation",
    "OccurrenceConstraintViolation",
    "PropertyConstraintViolation",
    "TypeConstraintViolation",
    "ProtocolError",
    "SecurityError",
    "MessageTypeNotSupported",
    "RpcFrameworkError",
];

const NONEXISTENT_FAMILY: &[&str] = &["NotImplemented", "NotSupported"];

fn has_json_parse_marker(p: &Value) -> bool {
    p.get("error").and_then(Value::as_str) == Some("JsonParse")
        || p.pointer("/statusInfo/reasonCode").and_then(Value::as_str) == Some("JsonParseError")
}

fn has_not_implemented_marker(p: &Value) -> bool {
    p.get("error").and_then(Value::as_str) == Some("NotImplemented")
        || p.pointer("/statusInfo/reasonCode").and_then(Value::as_str) == Some("NotImplemented")
        || matches!(
            p.get("status").and_then(Value::as_str),
            Some("UnknownVendorId" | "UnknownMessageId")
        )
        || p.pointer("/idTokenInfo/status").and_then(Value::as_str) == Some("Unknown")
}

fn sent_message_id(sent: &[u8]) -> Option<String> {
    serde_json::from_slice::<Value>(sent)
        .ok()
        .and_then(|v| v.get(1).and_then(Value::as_str).map(str::to_owned))
}

/// Maps one request/response exchange to its outcome code.
pub fn classify(
    sent: &[u8],
    response: Option<&OcppFrame>,
    latency_s: f64,
    server_alive_after: bool,
) -> Result<OutcomeCode, ClassifyError> {
    debug_assert!(latency_s >= 0.0);
    match response {
        Some(OcppFrame::Call { .. }) => Err(ClassifyError::Unclassifiable),
        None | Some(OcppFrame::CallResult { .. }) if !server_alive_after => {
            Ok(OutcomeCode::AcceptedServerStopped)
        }
        None => Ok(OutcomeCode::RejectedUnprocessable),
        Some(OcppFrame::CallResult { payload, .. }) => Ok(if has_json_parse_marker(payload) {
            OutcomeCode::AcceptedJsonParseError
        } else if has_not_implemented_marker(payload) {
            OutcomeCode::AcceptedNotImplemented
        } else {
            OutcomeCode::AcceptedClean
        }),
        Some(OcppFrame::CallError {
            message_id,
            error_code,
            error_details,
            ..
        }) => Ok(if FORMAT_FAMILY.contains(&error_code.as_str()) {
            OutcomeCode::RejectedFormat
        } else if NONEXISTENT_FAMILY.contains(&error_code.as_str())
            || error_details.get("unknownEntity").is_some()
            || sent_message_id(sent).is_some_and(|id| id != *message_id)
        {
            OutcomeCode::RejectedNonexistent
        } else {
            OutcomeCode::RejectedUnprocessable
        }),
    }
}

/// Message groups walked in order by the state-based strategy.
pub const STATE_SEQUENCE: [(&str, &[OcppAction]); 4] = [
    ("StartUp", &[OcppAction::BootNotification, OcppAction::StatusNotificationReq]),
    (
        "Operational",
        &[
            OcppAction::Heartbeat,
            OcppAction::AuthorizeReq,
            OcppAction::ClearCacheReq,
            OcppAction::DataTransferReq,
        ],
    ),
    (
        "UserInteraction",
        &[OcppAction::Get15118EVCertificateReq, OcppAction::NotifyCustomerInformation],
    ),
    (
        "FirmwareCustom",
        &[
            OcppAction::FirmwareStatusNotification,
            OcppAction::PublishFirmwareStatusNotificationReq,
        ],
    ),
];

/// One repetition of the state-based sequence restricted to `actions`.
pub fn state_sequence(actions: &[OcppAction]) -> Vec<OcppAction> {
    STATE_SEQUENCE
        .iter()
        .flat_map(|(_, group)| group.iter().copied())
        .filter(|a| actions.contains(a))
        .collect()
}

/// Result of one campaign step.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzStep {
    pub record: FuzzRecord,
    pub response: Option<OcppFrame>,
}

/// A fuzz plan unrolled into a request queue, executed one request at a
/// time against a CSMS value.
#[derive(Debug, Clone)]
pub struct FuzzCampaign {
    policy: CsmsPolicy,
    queue: Vec<(OcppAction, MutationMode)>,
    next: usize,
    generator: MessageGenerator,
}

impl FuzzCampaign {
    pub fn new(plan: &FuzzPlan, policy: &CsmsPolicy) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let modes: Vec<MutationMode> = plan.mutation_modes.iter().copied().collect();
        let pick = |rng: &mut ChaCha8Rng| *modes.choose(rng).unwrap_or(&MutationMode::None);
        let queue = match plan.strategy {
            FuzzStrategy::Random => {
                let mut actions: Vec<OcppAction> = (0..plan.repetitions)
                    .flat_map(|_| plan.actions.iter().copied())
                    .collect();
                actions.shuffle(&mut rng);
                actions.into_iter().map(|a| (a, pick(&mut rng))).collect()
            }
            FuzzStrategy::StateBased => {
                let sequence = state_sequence(&plan.actions);
                let injected: BTreeSet<usize> = plan.injection_points.iter().copied().collect();
                let mut queue = Vec::new();
                for _ in 0..plan.repetitions {
                    for (i, &a) in sequence.iter().enumerate() {
                        let mode = if injected.contains(&i) {
                            pick(&mut rng)
                        } else {
                            MutationMode::None
                        };
                        queue.push((a, mode));
                    }
                }
                queue
            }
        };
        let tokens = if plan.id_tokens.is_empty() {
            policy.known_id_tokens.iter().cloned().collect()
        } else {
            plan.id_tokens.clone()
        };
        let mut gen_rng = rng.clone();
        gen_rng.set_stream(1);
        Self {
            policy: policy.clone(),
            queue,
            next: 0,
            generator: MessageGenerator::from_rng(gen_rng, tokens),
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn is_finished(&self) -> bool {
        self.next >= self.queue.len()
    }

    /// Sends the next request. A stopped CSMS is restarted first.
    pub fn step(&mut self, st: &mut CsmsState, now: SimTime) -> Option<Result<FuzzStep, ClassifyError>> {
        let (action, requested) = *self.queue.get(self.next)?;
        let seq = self.next as u64;
        self.next += 1;
        if !st.alive {
            csms_restart(st);
        }
        let msg = self.generator.generate(action, requested);
        let reply = csms_handle_bytes(st, &self.policy, &msg.bytes, now);
        let outcome = match classify(&msg.bytes, reply.response.as_ref(), reply.latency_s, st.alive) {
            Ok(o) => o,
            Err(e) => return Some(Err(e)),
        };
        Some(Ok(FuzzStep {
            record: FuzzRecord {
                seq,
                action,
                mutation: msg.mode,
                sent: msg.bytes,
                outcome,
                latency_s: reply.latency_s,
                server_alive_after: st.alive,
            },
            response: reply.response,
        }))
    }

    /// Runs the remaining queue back to back in virtual time.
    pub fn run_to_end(&mut self, st: &mut CsmsState) -> Result<Vec<FuzzRecord>, ClassifyError> {
        let mut now = 0.0;
        let mut out = Vec::with_capacity(self.queue.len() - self.next);
        while let Some(step) = self.step(st, SimTime::at(now)) {
            let record = step?.record;
            now += record.latency_s;
            out.push(record);
        }
        Ok(out)
    }
}

/// Random-order campaign: `|actions| * repetitions` records.
pub fn run_random_fuzz(
    plan: &FuzzPlan,
    st: &mut CsmsState,
    policy: &CsmsPolicy,
) -> Result<Vec<FuzzRecord>, ClassifyError> {
    let plan = FuzzPlan {
        strategy: FuzzStrategy::Random,
        ..plan.clone()
    };
    FuzzCampaign::new(&plan, policy).run_to_end(st)
}

/// Protocol-order campaign with mutations at the plan's injection points.
pub fn run_state_fuzz(
    plan: &FuzzPlan,
    st: &mut CsmsState,
    policy: &CsmsPolicy,
) -> Result<Vec<FuzzRecord>, ClassifyError> {
    let plan = FuzzPlan {
        strategy: FuzzStrategy::StateBased,
        ..plan.clone()
    };
    FuzzCampaign::new(&plan, policy).run_to_end(st)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuzzSummaryRow {
    pub action: OcppAction,
    pub count: usize,
    /// Percentages for buckets 1..=7.
    pub pct: [f64; 7],
    pub mean_latency_s: f64,
}

impl FuzzSummaryRow {
    pub fn pct_of(&self, code: OutcomeCode) -> f64 {
        self.pct[usize::from(code.bucket() - 1)]
    }
}

/// Per-action outcome distribution, rows in canonical action order.
pub fn summarize_fuzz(records: &[FuzzRecord]) -> Vec<FuzzSummaryRow> {
    OcppAction::ALL
        .into_iter()
        .filter_map(|action| {
            let mine: Vec<&FuzzRecord> = records.iter().filter(|r| r.action == action).collect();
            if mine.is_empty() {
                return None;
            }
            let n = mine.len() as f64;
            let mut pct = [0.0; 7];
            for r in &mine {
                pct[usize::from(r.outcome.bucket() - 1)] += 100.0 / n;
            }
            Some(FuzzSummaryRow {
                action,
                count: mine.len(),
                pct,
                mean_latency_s: mine.iter().map(|r| r.latency_s).sum::<f64>() / n,
            })
        })
        .collect()
}

pub fn fuzz_summary_csv(rows: &[FuzzSummaryRow]) -> String {
    let mut out =
        String::from("action,pct_3_1,pct_3_2,pct_3_3,pct_3_4,pct_4_5,pct_4_6,pct_4_7,mean_latency_ms\n");
    for r in rows {
        let _ = write!(out, "{}", r.action.name());
        for p in r.pct {
            let _ = write!(out, ",{p:.2}");
        }
        let _ = writeln!(out, ",{:.3}", r.mean_latency_s * 1000.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EvConfig, EvseConfig};
    use crate::ocpp::{decode_frame, validate_frame_bytes, validate_payload, BootShutdownPolicy, DecodeError, ValidationResult};

    fn scenario() -> Scenario {
        let mut s = Scenario::empty(100.0);
        s.evses.push(EvseConfig::new("EVSE1", 22.0));
        s.evs.push(EvConfig {
            id: "EV1".into(),
            battery_capacity_kwh: 50.0,
            initial_soc: 0.2,
            max_charge_rate_kw: 7.0,
            plug_in_time_s: 5.0,
            target_evse: "EVSE1".into(),
            interrupt_at_s: None,
        });
        s
    }

    fn plan(kind: AttackKind, target: &str, start: f64, duration: Option<f64>) -> AttackPlan {
        AttackPlan {
            kind,
            target_id: target.into(),
            start_s: start,
            duration_s: duration,
            params: json!({}),
        }
    }

    #[test]
    fn schedule_examples() {
        let s = scenario();
        assert!(schedule(&[], &s).unwrap().is_empty());
        let l1 = schedule(&[plan(AttackKind::BrokenWireL1, "cable-EVSE1", 18.0, None)], &s).unwrap();
        assert_eq!(l1.len(), 1);
        assert_eq!((l1[0].at, l1[0].phase), (18.0, AttackPhase::Start));
        let l3 = schedule(&[plan(AttackKind::BrokenWireL3, "*", 43_200.0, Some(28_800.0))], &s).unwrap();
        assert_eq!(l3.iter().map(|e| e.at / 3600.0).collect::<Vec<_>>(), vec![12.0, 20.0]);
    }

    #[test]
    fn schedule_orders_end_before_start_and_rejects_ghosts() {
        let s = scenario();
        let plans = [
            plan(AttackKind::BrokenWireL3, "EVSE1", 10.0, Some(5.0)),
            plan(AttackKind::BrokenWireL3, "EVSE1", 15.0, Some(5.0)),
        ];
        let ev = schedule(&plans, &s).unwrap();
        let at15: Vec<_> = ev.iter().filter(|e| e.at == 15.0).map(|e| e.phase).collect();
        assert_eq!(at15, vec![AttackPhase::End, AttackPhase::Start]);
        assert!(matches!(
            schedule(&[plan(AttackKind::BrokenWireL1, "ghost", 1.0, None)], &s),
            Err(AttackError::UnresolvedTarget { .. })
        ));
    }

    #[test]
    fn plan_invariants() {
        let mut l3 = plan(AttackKind::BrokenWireL3, "*", 1.0, None);
        assert!(l3.violations().iter().any(|(f, _)| f == "duration_s"));
        l3.duration_s = Some(2.0);
        l3.params = json!({"reduction_factor": 0.0});
        assert!(l3.violations().iter().any(|(f, _)| f == "params.reduction_factor"));
        let fuzz = plan(AttackKind::Fuzzification, "csms", 0.0, None);
        assert!(fuzz.violations().iter().any(|(f, _)| f == "params.strategy"));
        let fuzz = AttackPlan {
            params: json!({"strategy": "Random"}),
            ..fuzz
        };
        assert!(fuzz.violations().is_empty());
    }

    #[test]
    fn broken_wire_l1_severs_and_records() {
        let link = SimLink::new("cable-EVSE1", ("EV1".into(), "EVSE1".into()), &Default::default());
        let (link, rec) = exec_broken_wire_l1(link, SimTime::at(18.0));
        assert!(link.severed());
        assert_eq!(rec.ts, 18.0);
        assert_eq!(rec.kind, RecordKind::AttackStart);
        assert_eq!(rec.layer, Some(Layer::L1));
    }

    #[test]
    fn broken_wire_l3_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PowerDisruptionParams {
            reduction_factor: 0.45,
            jitter: 0.0,
        };
        let (m, rec) = exec_broken_wire_l3(&["A".into()], p, (43_200.0, 72_000.0));
        assert_eq!(rec.layer, Some(Layer::L3));
        assert!((35.0 * m.factor("A", 57_600.0, &mut rng) - 19.25).abs() < 1e-9);
        assert_eq!(m.factor("A", 80_000.0, &mut rng), 1.0);
        assert_eq!(m.factor("B", 57_600.0, &mut rng), 1.0);
        assert_eq!(m.factor("A", 72_000.0, &mut rng), 1.0);
        let half = PowerModifier {
            params: PowerDisruptionParams {
                reduction_factor: 0.5,
                jitter: 0.0,
            },
            ..m.clone()
        };
        assert_eq!(30.0 * half.factor("A", 50_000.0, &mut rng), 15.0);
        let jittery = PowerModifier {
            params: PowerDisruptionParams {
                reduction_factor: 0.45,
                jitter: 0.03,
            },
            ..m
        };
        for _ in 0..100 {
            let f = jittery.factor("A", 50_000.0, &mut rng);
            assert!((0.52..=0.58).contains(&f));
        }
    }

    #[test]
    fn gen_message_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hb = gen_message(OcppAction::Heartbeat, MutationMode::None, &mut rng);
        let text = String::from_utf8(hb).unwrap();
        assert!(text.starts_with("[2,\"") && text.ends_with("\",\"Heartbeat\",{}]"), "{text}");
        let auth = gen_message(OcppAction::AuthorizeReq, MutationMode::DropRequired, &mut rng);
        assert!(matches!(validate_frame_bytes(&auth), ValidationResult::FormatViolation { .. }));
        let boot = gen_message(OcppAction::BootNotification, MutationMode::TruncateJson, &mut rng);
        assert!(matches!(decode_frame(&boot), Err(DecodeError::MalformedJson(_))));
    }

    #[test]
    fn generated_messages_honour_their_mode() {
        let mut g = MessageGenerator::new(11, vec!["TAG1".into()]);
        for _ in 0..20 {
            for action in OcppAction::ALL {
                for mode in MutationMode::ALL {
                    let m = g.generate(action, mode);
                    match m.mode {
                        MutationMode::None => {
                            let Ok(OcppFrame::Call { payload, .. }) = decode_frame(&m.bytes) else {
                                panic!("undecodable: {:?}", String::from_utf8_lossy(&m.bytes))
                            };
                            assert_eq!(validate_payload(action, &payload), ValidationResult::Valid);
                        }
                        MutationMode::TruncateJson => {
                            assert!(matches!(decode_frame(&m.bytes), Err(DecodeError::MalformedJson(_))));
                        }
                        _ => assert!(
                            matches!(validate_frame_bytes(&m.bytes), ValidationResult::FormatViolation { .. }),
                            "{action} {mode:?}->{:?}: {}",
                            m.mode,
                            String::from_utf8_lossy(&m.bytes)
                        ),
                    }
                }
            }
        }
    }

    #[test]
    fn outcome_code_pairs() {
        for c in OutcomeCode::ALL {
            assert_eq!(OutcomeCode::from_pair(c.wire_type(), c.bucket()), Some(c));
            let v = serde_json::to_value(c).unwrap();
            assert_eq!(serde_json::from_value::<OutcomeCode>(v).unwrap(), c);
        }
        assert_eq!(OutcomeCode::from_pair(3, 5), None);
        assert_eq!(OutcomeCode::AcceptedClean.to_string(), "(3,1)");
    }

    #[test]
    fn classify_examples() {
        let sent = br#"[2,"m1","Heartbeat",{}]"#;
        let ok = OcppFrame::result("m1", json!({"currentTime": "T"}));
        assert_eq!(classify(sent, Some(&ok), 0.01, true), Ok(OutcomeCode::AcceptedClean));
        assert_eq!(classify(sent, None, 0.01, false), Ok(OutcomeCode::AcceptedServerStopped));
        let fv = OcppFrame::error("m1", "FormationViolation", "", json!({}));
        assert_eq!(classify(sent, Some(&fv), 0.01, true), Ok(OutcomeCode::RejectedFormat));
        let call = OcppFrame::call("m1", OcppAction::Heartbeat, json!({}));
        assert_eq!(classify(sent, Some(&call), 0.01, true), Err(ClassifyError::Unclassifiable));
        let wrong_id = OcppFrame::error("zz", "InternalError", "", json!({}));
        assert_eq!(classify(sent, Some(&wrong_id), 0.01, true), Ok(OutcomeCode::RejectedNonexistent));
    }

    #[test]
    fn random_fuzz_cardinality_and_determinism() {
        let plan = FuzzPlan::new(FuzzStrategy::Random);
        let policy = CsmsPolicy::default();
        let a = run_random_fuzz(&plan, &mut CsmsState::new(), &policy).unwrap();
        let b = run_random_fuzz(&plan, &mut CsmsState::new(), &policy).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.outcome != OutcomeCode::AcceptedServerStopped || !r.server_alive_after));
    }

    #[test]
    fn single_heartbeat_is_clean() {
        let plan = FuzzPlan {
            repetitions: 1,
            actions: vec![OcppAction::Heartbeat],
            ..FuzzPlan::new(FuzzStrategy::Random)
        };
        let r = run_random_fuzz(&plan, &mut CsmsState::new(), &CsmsPolicy::default()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].outcome, OutcomeCode::AcceptedClean);
    }

    fn accept_boot() -> CsmsPolicy {
        CsmsPolicy {
            boot_shutdown_policy: BootShutdownPolicy::AcceptBoot,
            known_id_tokens: ["TAG1".to_owned()].into(),
            ..CsmsPolicy::default()
        }
    }

    #[test]
    fn state_fuzz_authorizes_after_boot() {
        let plan = FuzzPlan::new(FuzzStrategy::StateBased);
        let r = run_state_fuzz(&plan, &mut CsmsState::new(), &accept_boot()).unwrap();
        assert_eq!(r.len(), 1000);
        assert!(r
            .iter()
            .filter(|r| r.action == OcppAction::AuthorizeReq)
            .all(|r| r.outcome == OutcomeCode::AcceptedClean));
    }

    #[test]
    fn state_fuzz_injection_at_first_index() {
        for (strict, bucket) in [(false, 3), (true, 5)] {
            let plan = FuzzPlan {
                mutation_modes: [MutationMode::TruncateJson].into(),
                injection_points: vec![0],
                repetitions: 5,
                ..FuzzPlan::new(FuzzStrategy::StateBased)
            };
            let policy = CsmsPolicy {
                strict_parsing: strict,
                ..accept_boot()
            };
            let r = run_state_fuzz(&plan, &mut CsmsState::new(), &policy).unwrap();
            for rep in r.chunks(10) {
                assert_eq!(rep[0].mutation, MutationMode::TruncateJson);
                assert_eq!(rep[0].outcome.bucket(), bucket);
                assert!(rep[1..].iter().all(|x| x.mutation == MutationMode::None));
            }
        }
    }

    fn record(action: OcppAction, outcome: OutcomeCode, latency_s: f64) -> FuzzRecord {
        FuzzRecord {
            seq: 0,
            action,
            mutation: MutationMode::None,
            sent: Vec::new(),
            outcome,
            latency_s,
            server_alive_after: true,
        }
    }

    #[test]
    fn summarize_examples() {
        assert!(summarize_fuzz(&[]).is_empty());
        let hb: Vec<_> = (0..100)
            .map(|_| record(OcppAction::Heartbeat, OutcomeCode::AcceptedClean, 0.010))
            .collect();
        let rows = summarize_fuzz(&hb);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].pct_of(OutcomeCode::AcceptedClean) - 100.0).abs() < 1e-9);
        assert!((rows[0].mean_latency_s * 1000.0 - 10.0).abs() < 1e-9);
        let a = OcppAction::PublishFirmwareStatusNotificationReq;
        let mixed: Vec<_> = (0..100)
            .map(|i| {
                let o = if i < 34 {
                    OutcomeCode::AcceptedNotImplemented
                } else {
                    OutcomeCode::RejectedFormat
                };
                record(a, o, 0.01)
            })
            .collect();
        let row = &summarize_fuzz(&mixed)[0];
        assert!((row.pct_of(OutcomeCode::AcceptedNotImplemented) - 34.0).abs() < 1e-9);
        assert!((row.pct_of(OutcomeCode::RejectedFormat) - 66.0).abs() < 1e-9);
    }

    #[test]
    fn summary_csv_layout() {
        let rows = summarize_fuzz(&[record(OcppAction::Heartbeat, OutcomeCode::AcceptedClean, 0.010)]);
        assert_eq!(
            fuzz_summary_csv(&rows),
            "action,pct_3_1,pct_3_2,pct_3_3,pct_3_4,pct_4_5,pct_4_6,pct_4_7,mean_latency_ms\n\
             Heartbeat,100.00,0.00,0.00,0.00,0.00,0.00,0.00,10.000\n"
        );
    }

    #[test]
    fn fuzz_record_round_trips_through_json() {
        let mut r = record(OcppAction::AuthorizeReq, OutcomeCode::AcceptedNotImplemented, 0.011);
        r.sent = br#"[2,"a","Authorize",{"#.to_vec();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["outcome"], json!([3, 2]));
        assert_eq!(serde_json::from_value::<FuzzRecord>(v).unwrap(), r);
    }
}
