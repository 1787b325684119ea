//! Minimal JSON-schema interpreter for the shipped per-action schemas.
//!
//! Supports the subset those files use: `type`, `properties`, `required`,
//! `additionalProperties: false`, `enum`, `maxLength` and `items`.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde_json::Value;

use super::frame::{decode_frame, DecodeError, OcppAction, OcppFrame};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationResult {
    Valid,
    FormatViolation { path: String, reason: String },
    UnknownAction,
    MalformedJson,
}

impl ValidationResult {
    pub fn is_valid(&self) -> bool {
        matches!(self, ValidationResult::Valid)
    }

    fn violation(path: &str, reason: &str) -> Self {
        ValidationResult::FormatViolation {
            path: path.to_owned(),
            reason: reason.to_owned(),
        }
    }
}

fn schema_source(action: OcppAction) -> &'static str {
    match action {
        OcppAction::Heartbeat => include_str!("../../schemas/Heartbeat.json"),
        OcppAction::AuthorizeReq => include_str!("../../schemas/Authorize.json"),
        OcppAction::BootNotification => include_str!("../../schemas/BootNotification.json"),
        OcppAction::ClearCacheReq => include_str!("../../schemas/ClearCache.json"),
        OcppAction::FirmwareStatusNotification => {
            include_str!("../../schemas/FirmwareStatusNotification.json")
        }
        OcppAction::DataTransferReq => include_str!("../../schemas/DataTransfer.json"),
        OcppAction::Get15118EVCertificateReq => {
            include_str!("../../schemas/Get15118EVCertificate.json")
        }
        OcppAction::NotifyCustomerInformation => {
            include_str!("../../schemas/NotifyCustomerInformation.json")
        }
        OcppAction::StatusNotificationReq => include_str!("../../schemas/StatusNotification.json"),
        OcppAction::PublishFirmwareStatusNotificationReq => {
            include_str!("../../schemas/PublishFirmwareStatusNotification.json")
        }
    }
}

/// Parsed schema of an action's request payload.
pub fn schema_for(action: OcppAction) -> &'static Value {
    static SCHEMAS: OnceLock<HashMap<OcppAction, Value>> = OnceLock::new();
    let map = SCHEMAS.get_or_init(|| {
        OcppAction::ALL
            .into_iter()
            .map(|a| {
                let v = serde_json::from_str(schema_source(a))
                    .unwrap_or_else(|e| panic!("shipped schema for {a} is invalid: {e}"));
                (a, v)
            })
            .collect()
    });
    &map[&action]
}

pub fn validate_payload(action: OcppAction, payload: &Value) -> ValidationResult {
    check(schema_for(action), payload, "")
}

/// Validates raw bytes as an outgoing CALL.
pub fn validate_frame_bytes(bytes: &[u8]) -> ValidationResult {
    match decode_frame(bytes) {
        Ok(OcppFrame::Call {
            action, payload, ..
        }) => validate_payload(action, &payload),
        Ok(_) => ValidationResult::violation("", "not a CALL"),
        Err(DecodeError::UnknownAction(_)) => ValidationResult::UnknownAction,
        Err(DecodeError::MalformedJson(_)) => ValidationResult::MalformedJson,
    }
}

fn type_matches(expected: &str, v: &Value) -> bool {
    match expected {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "integer" => v.is_i64() || v.is_u64(),
        "number" => v.is_number(),
        "boolean" => v.is_boolean(),
        _ => true,
    }
}

fn check(schema: &Value, v: &Value, path: &str) -> ValidationResult {
    if let Some(ty) = schema.get("type").and_then(Value::as_str) {
        if !type_matches(ty, v) {
            return ValidationResult::violation(path, "type");
        }
    }
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(v) {
            return ValidationResult::violation(path, "enum");
        }
    }
    if let (Some(max), Some(s)) = (schema.get("maxLength").and_then(Value::as_u64), v.as_str()) {
        if s.chars().count() as u64 > max {
            return ValidationResult::violation(path, "maxLength");
        }
    }
    if let Some(obj) = v.as_object() {
        let props = schema.get("properties").and_then(Value::as_object);
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for name in required.iter().filter_map(Value::as_str) {
                if !obj.contains_key(name) {
                    return ValidationResult::violation(&format!("{path}.{name}"), "required");
                }
            }
        }
        let closed = schema.get("additionalProperties") == Some(&Value::Bool(false));
        for (key, child) in obj {
            let child_path = format!("{path}.{key}");
            match props.and_then(|p| p.get(key)) {
                Some(child_schema) => {
                    let r = check(child_schema, child, &child_path);
                    if !r.is_valid() {
                        return r;
                    }
                }
                None if closed => {
                    return ValidationResult::violation(&child_path, "additionalProperties")
                }
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, item) in arr.iter().enumerate() {
            let r = check(items, item, &format!("{path}[{i}]"));
            if !r.is_valid() {
                return r;
            }
        }
    }
    ValidationResult::Valid
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn every_schema_parses() {
        for a in OcppAction::ALL {
            assert!(schema_for(a).is_object());
        }
    }

    #[test]
    fn authorize_examples() {
        let ok = json!({"idToken": {"idToken": "TAG1", "type": "ISO14443"}});
        assert_eq!(validate_payload(OcppAction::AuthorizeReq, &ok), ValidationResult::Valid);
        assert_eq!(
            validate_payload(OcppAction::AuthorizeReq, &json!({})),
            ValidationResult::violation(".idToken", "required")
        );
    }

    #[test]
    fn boot_reason_enum_is_checked() {
        let p = json!({"reason": "NotAReason", "chargingStation": {"model": "M", "vendorName": "V"}});
        assert_eq!(
            validate_payload(OcppAction::BootNotification, &p),
            ValidationResult::violation(".reason", "enum")
        );
    }

    #[test]
    fn nested_type_length_and_extra_fields() {
        let p = json!({"idToken": {"idToken": 7, "type": "Local"}});
        assert_eq!(
            validate_payload(OcppAction::AuthorizeReq, &p),
            ValidationResult::violation(".idToken.idToken", "type")
        );
        let p = json!({"idToken": {"idToken": "x".repeat(37), "type": "Local"}});
        assert_eq!(
            validate_payload(OcppAction::AuthorizeReq, &p),
            ValidationResult::violation(".idToken.idToken", "maxLength")
        );
        assert_eq!(
            validate_payload(OcppAction::Heartbeat, &json!({"x": 1})),
            ValidationResult::violation(".x", "additionalProperties")
        );
        let p = json!({"status": "Idle", "location": ["a", 3]});
        assert_eq!(
            validate_payload(OcppAction::PublishFirmwareStatusNotificationReq, &p),
            ValidationResult::violation(".location[1]", "type")
        );
    }

    #[test]
    fn non_object_payload_is_a_type_violation() {
        assert_eq!(
            validate_payload(OcppAction::Heartbeat, &json!([])),
            ValidationResult::violation("", "type")
        );
    }

    #[test]
    fn frame_level_results() {
        assert_eq!(validate_frame_bytes(br#"[2,"a","Heartbeat",{}]"#), ValidationResult::Valid);
        assert_eq!(validate_frame_bytes(br#"[2,"a","Reset",{}]"#), ValidationResult::UnknownAction);
        assert_eq!(validate_frame_bytes(br#"[2,"a","Heart"#), ValidationResult::MalformedJson);
    }
}
