//! Stateful reference CSMS used as the fuzzing target.
//!
//! Responses and latencies are fixed functions of the request, the policy
//! and the CSMS state; there is no hidden randomness.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::frame::{decode_frame, salvage_call_header, DecodeError, OcppAction, OcppFrame};
use super::schema::{validate_payload, ValidationResult};
use crate::attack::OutcomeCode;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootShutdownPolicy {
    /// Answer the BootNotification, then stop serving.
    ShutdownOnBoot,
    AcceptBoot,
}

fn yes() -> bool {
    true
}

fn default_cert_latency() -> f64 {
    0.573
}

fn default_internal_error_every() -> u32 {
    12
}

fn default_evse_count() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsmsPolicy {
    #[serde(default = "yes")]
    pub require_boot_first: bool,
    #[serde(default)]
    pub known_id_tokens: BTreeSet<String>,
    #[serde(default)]
    pub allow_clear_cache: bool,
    #[serde(default = "default_boot_policy")]
    pub boot_shutdown_policy: BootShutdownPolicy,
    #[serde(default = "default_cert_latency")]
    pub cert_latency_s: f64,
    #[serde(default)]
    pub strict_parsing: bool,
    /// Every n-th pre-boot ClearCache request fails with InternalError
    /// instead of SecurityError. Zero disables.
    #[serde(default = "default_internal_error_every")]
    pub clear_cache_internal_error_every: u32,
    /// StatusNotification for an evseId above this count names an unknown
    /// EVSE.
    #[serde(default = "default_evse_count")]
    pub known_evse_count: u32,
}

fn default_boot_policy() -> BootShutdownPolicy {
    BootShutdownPolicy::ShutdownOnBoot
}

impl Default for CsmsPolicy {
    fn default() -> Self {
        Self {
            require_boot_first: true,
            known_id_tokens: BTreeSet::new(),
            allow_clear_cache: false,
            boot_shutdown_policy: default_boot_policy(),
            cert_latency_s: default_cert_latency(),
            strict_parsing: false,
            clear_cache_internal_error_every: default_internal_error_every(),
            known_evse_count: default_evse_count(),
        }
    }
}

impl CsmsPolicy {
    /// Fixed processing latency for `action`.
    pub fn latency_s(&self, action: OcppAction) -> f64 {
        match action {
            OcppAction::Heartbeat => 0.010,
            OcppAction::AuthorizeReq => 0.011,
            OcppAction::BootNotification => 0.048,
            OcppAction::ClearCacheReq => 0.003,
            OcppAction::FirmwareStatusNotification => 0.026,
            OcppAction::DataTransferReq => 0.008,
            OcppAction::Get15118EVCertificateReq => self.cert_latency_s,
            OcppAction::NotifyCustomerInformation => 0.008,
            OcppAction::StatusNotificationReq => 0.016,
            OcppAction::PublishFirmwareStatusNotificationReq => 0.010,
        }
    }
}

const UNPARSED_LATENCY_S: f64 = 0.010;

#[derive(Debug, Clone, PartialEq)]
pub struct CsmsState {
    pub booted: bool,
    pub alive: bool,
    /// Authorization cache: token -> status.
    pub cache: Value,
    pub token_registry: BTreeSet<String>,
    pub request_log: Vec<(f64, OcppAction)>,
}

impl Default for CsmsState {
    fn default() -> Self {
        Self {
            booted: false,
            alive: true,
            cache: json!({}),
            token_registry: BTreeSet::new(),
            request_log: Vec::new(),
        }
    }
}

impl CsmsState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// What the CSMS did with one request.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmsReply {
    pub response: Option<OcppFrame>,
    pub latency_s: f64,
    /// The CSMS's own view of the outcome. Kept out of the wire frame; it is
    /// ground truth for testing the classifier.
    pub outcome_hint: Option<OutcomeCode>,
}

impl CsmsReply {
    fn silent(latency_s: f64) -> Self {
        Self {
            response: None,
            latency_s,
            outcome_hint: None,
        }
    }

    fn answer(frame: OcppFrame, latency_s: f64, hint: OutcomeCode) -> Self {
        Self {
            response: Some(frame),
            latency_s,
            outcome_hint: Some(hint),
        }
    }
}

fn timestamp(now: SimTime) -> String {
    let total = now.seconds.max(0.0);
    let whole = total.floor() as u64;
    let millis = ((total - whole as f64) * 1000.0).round().min(999.0) as u64;
    let day = 1 + whole / 86_400;
    let rem = whole % 86_400;
    format!(
        "2025-01-{day:02}T{:02}:{:02}:{:02}.{millis:03}Z",
        rem / 3600,
        (rem / 60) % 60,
        rem % 60
    )
}

fn violation_error_code(reason: &str) -> &'static str {
    match reason {
        "required" => "OccurrenceConstraintViolation",
        "type" => "TypeConstraintViolation",
        "enum" | "maxLength" => "PropertyConstraintViolation",
        _ => "FormationViolation",
    }
}

/// Handles one decoded CALL.
pub fn csms_handle(
    st: &mut CsmsState,
    policy: &CsmsPolicy,
    f: &OcppFrame,
    now: SimTime,
) -> CsmsReply {
    let OcppFrame::Call {
        message_id,
        action,
        payload,
    } = f
    else {
        if !st.alive {
            return CsmsReply::silent(UNPARSED_LATENCY_S);
        }
        return CsmsReply::answer(
            OcppFrame::error(
                f.message_id(),
                "MessageTypeNotSupported",
                "CSMS only accepts CALL frames",
                json!({}),
            ),
            UNPARSED_LATENCY_S,
            OutcomeCode::RejectedFormat,
        );
    };
    let action = *action;
    let latency = policy.latency_s(action);
    if !st.alive {
        return CsmsReply::silent(latency);
    }
    st.request_log.push((now.seconds, action));

    if let ValidationResult::FormatViolation { path, reason } = validate_payload(action, payload) {
        return CsmsReply::answer(
            OcppFrame::error(
                message_id.clone(),
                violation_error_code(&reason),
                format!("{path}: {reason}"),
                json!({ "path": path }),
            ),
            latency,
            OutcomeCode::RejectedFormat,
        );
    }

    let id = message_id.clone();
    let ok = |payload: Value| CsmsReply::answer(OcppFrame::result(id.clone(), payload), latency, OutcomeCode::AcceptedClean);
    match action {
        OcppAction::Heartbeat => ok(json!({ "currentTime": timestamp(now) })),
        OcppAction::AuthorizeReq => {
            let token = payload["idToken"]["idToken"].as_str().unwrap_or_default();
            let known = if policy.require_boot_first {
                st.token_registry.contains(token)
            } else {
                policy.known_id_tokens.contains(token)
            };
            if known {
                st.cache[token] = json!("Accepted");
                ok(json!({ "idTokenInfo": { "status": "Accepted" } }))
            } else {
                CsmsReply::answer(
                    OcppFrame::result(id, json!({ "idTokenInfo": { "status": "Unknown" } })),
                    latency,
                    OutcomeCode::AcceptedNotImplemented,
                )
            }
        }
        OcppAction::BootNotification => {
            let body = json!({
                "currentTime": timestamp(now),
                "interval": 300,
                "status": "Accepted",
            });
            match policy.boot_shutdown_policy {
                BootShutdownPolicy::ShutdownOnBoot => {
                    st.alive = false;
                    CsmsReply::answer(
                        OcppFrame::result(id, body),
                        latency,
                        OutcomeCode::AcceptedServerStopped,
                    )
                }
                BootShutdownPolicy::AcceptBoot => {
                    st.booted = true;
                    st.token_registry = policy.known_id_tokens.clone();
                    ok(body)
                }
            }
        }
        OcppAction::ClearCacheReq => {
            if policy.allow_clear_cache {
                st.cache = json!({});
                return ok(json!({ "status": "Accepted" }));
            }
            let seen = st
                .request_log
                .iter()
                .filter(|(_, a)| *a == OcppAction::ClearCacheReq)
                .count() as u32;
            let every = policy.clear_cache_internal_error_every;
            if !st.booted && every > 0 && seen % every == 0 {
                CsmsReply::answer(
                    OcppFrame::error(id, "InternalError", "cache store unavailable", json!({})),
                    latency,
                    OutcomeCode::RejectedUnprocessable,
                )
            } else {
                CsmsReply::answer(
                    OcppFrame::error(
                        id,
                        "SecurityError",
                        "cache manipulation not permitted",
                        json!({}),
                    ),
                    latency,
                    OutcomeCode::RejectedFormat,
                )
            }
        }
        OcppAction::DataTransferReq => CsmsReply::answer(
            OcppFrame::result(
                id,
                json!({
                    "status": "UnknownVendorId",
                    "statusInfo": { "reasonCode": "NotImplemented" },
                }),
            ),
            latency,
            OutcomeCode::AcceptedNotImplemented,
        ),
        OcppAction::Get15118EVCertificateReq => CsmsReply::answer(
            OcppFrame::result(
                id,
                json!({
                    "status": "Failed",
                    "exiResponse": "",
                    "statusInfo": {
                        "reasonCode": "JsonParseError",
                        "additionalInfo": "certificate chain",
                    },
                }),
            ),
            latency,
            OutcomeCode::AcceptedJsonParseError,
        ),
        OcppAction::FirmwareStatusNotification | OcppAction::NotifyCustomerInformation => {
            ok(json!({}))
        }
        OcppAction::StatusNotificationReq => {
            let evse = payload["evseId"].as_u64().unwrap_or(0);
            if evse == 0 || evse > u64::from(policy.known_evse_count) {
                CsmsReply::answer(
                    OcppFrame::error(
                        id,
                        "NotSupported",
                        "unknown EVSE",
                        json!({ "unknownEntity": "evseId", "value": evse }),
                    ),
                    latency,
                    OutcomeCode::RejectedNonexistent,
                )
            } else {
                ok(json!({}))
            }
        }
        OcppAction::PublishFirmwareStatusNotificationReq => {
            let has_locations = payload
                .get("location")
                .and_then(Value::as_array)
                .is_some_and(|l| !l.is_empty());
            if has_locations {
                CsmsReply::answer(
                    OcppFrame::result(id, json!({ "statusInfo": { "reasonCode": "NotImplemented" } })),
                    latency,
                    OutcomeCode::AcceptedNotImplemented,
                )
            } else {
                CsmsReply::answer(
                    OcppFrame::error(
                        id,
                        "FormationViolation",
                        "publish status without location",
                        json!({}),
                    ),
                    latency,
                    OutcomeCode::RejectedFormat,
                )
            }
        }
    }
}

/// Handles raw bytes off the wire, including frames that fail to decode.
pub fn csms_handle_bytes(
    st: &mut CsmsState,
    policy: &CsmsPolicy,
    bytes: &[u8],
    now: SimTime,
) -> CsmsReply {
    match decode_frame(bytes) {
        Ok(frame) => csms_handle(st, policy, &frame, now),
        Err(err) => {
            let (id, action_name) = salvage_call_header(bytes);
            let action = action_name.as_deref().and_then(OcppAction::from_wire);
            let latency = action.map_or(UNPARSED_LATENCY_S, |a| policy.latency_s(a));
            if !st.alive {
                return CsmsReply::silent(latency);
            }
            if let Some(a) = action {
                st.request_log.push((now.seconds, a));
            }
            let id = id
                .filter(|i| i.len() <= 36)
                .unwrap_or_else(|| "unknown".to_owned());
            match err {
                DecodeError::UnknownAction(name) => CsmsReply::answer(
                    OcppFrame::error(
                        id,
                        "NotImplemented",
                        format!("unknown action {name}"),
                        json!({ "unknownEntity": "action", "value": name }),
                    ),
                    latency,
                    OutcomeCode::RejectedNonexistent,
                ),
                DecodeError::MalformedJson(reason) if policy.strict_parsing => CsmsReply::answer(
                    OcppFrame::error(id, "FormationViolation", reason, json!({})),
                    latency,
                    OutcomeCode::RejectedFormat,
                ),
                DecodeError::MalformedJson(_) => CsmsReply::answer(
                    OcppFrame::result(id, json!({ "status": "Accepted", "error": "JsonParse" })),
                    latency,
                    OutcomeCode::AcceptedJsonParseError,
                ),
            }
        }
    }
}

/// Brings a stopped CSMS back. The request log survives.
pub fn csms_restart(st: &mut CsmsState) {
    st.alive = true;
    st.booted = false;
    st.cache = json!({});
    st.token_registry.clear();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(action: OcppAction, payload: Value) -> OcppFrame {
        OcppFrame::call("m1", action, payload)
    }

    fn boot() -> OcppFrame {
        call(
            OcppAction::BootNotification,
            json!({"reason": "PowerUp", "chargingStation": {"model": "M", "vendorName": "V"}}),
        )
    }

    fn authorize(token: &str) -> OcppFrame {
        call(
            OcppAction::AuthorizeReq,
            json!({"idToken": {"idToken": token, "type": "ISO14443"}}),
        )
    }

    #[test]
    fn heartbeat_is_clean_with_fixed_latency() {
        let mut st = CsmsState::new();
        let r = csms_handle(&mut st, &CsmsPolicy::default(), &call(OcppAction::Heartbeat, json!({})), SimTime::at(18.0));
        assert_eq!(r.latency_s, 0.010);
        let Some(OcppFrame::CallResult { payload, .. }) = r.response else { panic!() };
        assert_eq!(payload["currentTime"], "2025-01-01T00:00:18.000Z");
        assert_eq!(st.request_log.len(), 1);
    }

    #[test]
    fn boot_under_shutdown_policy_stops_server() {
        let mut st = CsmsState::new();
        let r = csms_handle(&mut st, &CsmsPolicy::default(), &boot(), SimTime::ZERO);
        assert!(matches!(r.response, Some(OcppFrame::CallResult { .. })));
        assert!(!st.alive);
        let r = csms_handle(&mut st, &CsmsPolicy::default(), &call(OcppAction::Heartbeat, json!({})), SimTime::ZERO);
        assert_eq!(r.response, None);
        assert!(!st.alive);
        assert_eq!(st.request_log.len(), 1);
    }

    #[test]
    fn restart_revives_and_keeps_log() {
        let mut st = CsmsState::new();
        csms_handle(&mut st, &CsmsPolicy::default(), &boot(), SimTime::ZERO);
        csms_restart(&mut st);
        assert!(st.alive && !st.booted);
        assert_eq!(st.request_log.len(), 1);
        let mut alive = CsmsState::new();
        alive.booted = true;
        csms_restart(&mut alive);
        assert!(alive.alive && !alive.booted);
    }

    #[test]
    fn authorize_depends_on_boot_order() {
        let policy = CsmsPolicy {
            boot_shutdown_policy: BootShutdownPolicy::AcceptBoot,
            known_id_tokens: ["TAG1".to_owned()].into(),
            ..CsmsPolicy::default()
        };
        let mut st = CsmsState::new();
        let before = csms_handle(&mut st, &policy, &authorize("TAG1"), SimTime::ZERO);
        assert_eq!(before.outcome_hint, Some(OutcomeCode::AcceptedNotImplemented));
        csms_handle(&mut st, &policy, &boot(), SimTime::ZERO);
        let after = csms_handle(&mut st, &policy, &authorize("TAG1"), SimTime::ZERO);
        assert_eq!(after.outcome_hint, Some(OutcomeCode::AcceptedClean));
        let stranger = csms_handle(&mut st, &policy, &authorize("NOPE"), SimTime::ZERO);
        assert_eq!(stranger.outcome_hint, Some(OutcomeCode::AcceptedNotImplemented));
    }

    #[test]
    fn clear_cache_split_is_deterministic() {
        let policy = CsmsPolicy::default();
        let mut st = CsmsState::new();
        let mut internal = 0;
        for _ in 0..100 {
            let r = csms_handle(&mut st, &policy, &call(OcppAction::ClearCacheReq, json!({})), SimTime::ZERO);
            if r.outcome_hint == Some(OutcomeCode::RejectedUnprocessable) {
                internal += 1;
            }
            assert_eq!(r.latency_s, 0.003);
        }
        assert_eq!(internal, 8);
    }

    #[test]
    fn malformed_bytes_follow_strictness() {
        let bytes = br#"[2,"m9","BootNotification",{"rea"#;
        let mut st = CsmsState::new();
        let lax = csms_handle_bytes(&mut st, &CsmsPolicy::default(), bytes, SimTime::ZERO);
        assert_eq!(lax.outcome_hint, Some(OutcomeCode::AcceptedJsonParseError));
        assert_eq!(lax.response.unwrap().message_id(), "m9");
        assert!(st.alive, "a boot that never parsed must not stop the server");
        let strict = CsmsPolicy {
            strict_parsing: true,
            ..CsmsPolicy::default()
        };
        let r = csms_handle_bytes(&mut st, &strict, bytes, SimTime::ZERO);
        assert!(matches!(r.response, Some(OcppFrame::CallError { ref error_code, .. }) if error_code == "FormationViolation"));
    }

    #[test]
    fn schema_violations_are_rejected() {
        let mut st = CsmsState::new();
        let r = csms_handle(&mut st, &CsmsPolicy::default(), &call(OcppAction::AuthorizeReq, json!({})), SimTime::ZERO);
        assert!(matches!(r.response, Some(OcppFrame::CallError { ref error_code, .. }) if error_code == "OccurrenceConstraintViolation"));
    }

    #[test]
    fn unknown_evse_is_nonexistent() {
        let mut st = CsmsState::new();
        let p = json!({"timestamp": "t", "connectorStatus": "Available", "evseId": 99, "connectorId": 1});
        let r = csms_handle(&mut st, &CsmsPolicy::default(), &call(OcppAction::StatusNotificationReq, p), SimTime::ZERO);
        assert_eq!(r.outcome_hint, Some(OutcomeCode::RejectedNonexistent));
    }
}
