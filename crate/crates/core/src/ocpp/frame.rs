use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const CALL: u64 = 2;
pub const CALLRESULT: u64 = 3;
pub const CALLERROR: u64 = 4;

const MAX_MESSAGE_ID_LEN: usize = 36;

/// The ten CSMS-bound actions exercised by the fuzzer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OcppAction {
    Heartbeat,
    AuthorizeReq,
    BootNotification,
    ClearCacheReq,
    FirmwareStatusNotification,
    DataTransferReq,
    Get15118EVCertificateReq,
    NotifyCustomerInformation,
    StatusNotificationReq,
    PublishFirmwareStatusNotificationReq,
}

impl OcppAction {
    pub const ALL: [OcppAction; 10] = [
        OcppAction::Heartbeat,
        OcppAction::AuthorizeReq,
        OcppAction::BootNotification,
        OcppAction::ClearCacheReq,
        OcppAction::FirmwareStatusNotification,
        OcppAction::DataTransferReq,
        OcppAction::Get15118EVCertificateReq,
        OcppAction::NotifyCustomerInformation,
        OcppAction::StatusNotificationReq,
        OcppAction::PublishFirmwareStatusNotificationReq,
    ];

    /// Action name as it appears in a CALL frame.
    pub fn wire_name(self) -> &'static str {
        match self {
            OcppAction::Heartbeat => "Heartbeat",
            OcppAction::AuthorizeReq => "Authorize",
            OcppAction::BootNotification => "BootNotification",
            OcppAction::ClearCacheReq => "ClearCache",
            OcppAction::FirmwareStatusNotification => "FirmwareStatusNotification",
            OcppAction::DataTransferReq => "DataTransfer",
            OcppAction::Get15118EVCertificateReq => "Get15118EVCertificate",
            OcppAction::NotifyCustomerInformation => "NotifyCustomerInformation",
            OcppAction::StatusNotificationReq => "StatusNotification",
            OcppAction::PublishFirmwareStatusNotificationReq => "PublishFirmwareStatusNotification",
        }
    }

    pub fn from_wire(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.wire_name() == name)
    }

    /// Report label, e.g. `AuthorizeReq`.
    pub fn name(self) -> &'static str {
        match self {
            OcppAction::Heartbeat => "Heartbeat",
            OcppAction::AuthorizeReq => "AuthorizeReq",
            OcppAction::BootNotification => "BootNotification",
            OcppAction::ClearCacheReq => "ClearCacheReq",
            OcppAction::FirmwareStatusNotification => "FirmwareStatusNotification",
            OcppAction::DataTransferReq => "DataTransferReq",
            OcppAction::Get15118EVCertificateReq => "Get15118EVCertificateReq",
            OcppAction::NotifyCustomerInformation => "NotifyCustomerInformation",
            OcppAction::StatusNotificationReq => "StatusNotificationReq",
            OcppAction::PublishFirmwareStatusNotificationReq => {
                "PublishFirmwareStatusNotificationReq"
            }
        }
    }
}

impl fmt::Display for OcppAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OcppAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s || a.wire_name() == s)
            .ok_or_else(|| format!("unknown OCPP action {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OcppFrame {
    Call {
        message_id: String,
        action: OcppAction,
        payload: Value,
    },
    CallResult {
        message_id: String,
        payload: Value,
    },
    CallError {
        message_id: String,
        error_code: String,
        error_description: String,
        error_details: Value,
    },
}

impl OcppFrame {
    pub fn call(message_id: impl Into<String>, action: OcppAction, payload: Value) -> Self {
        OcppFrame::Call {
            message_id: message_id.into(),
            action,
            payload,
        }
    }

    pub fn result(message_id: impl Into<String>, payload: Value) -> Self {
        OcppFrame::CallResult {
            message_id: message_id.into(),
            payload,
        }
    }

    pub fn error(
        message_id: impl Into<String>,
        code: impl Into<String>,
        description: impl Into<String>,
        details: Value,
    ) -> Self {
        OcppFrame::CallError {
            message_id: message_id.into(),
            error_code: code.into(),
            error_description: description.into(),
            error_details: details,
        }
    }

    pub fn type_id(&self) -> u64 {
        match self {
            OcppFrame::Call { .. } => CALL,
            OcppFrame::CallResult { .. } => CALLRESULT,
            OcppFrame::CallError { .. } => CALLERROR,
        }
    }

    pub fn message_id(&self) -> &str {
        match self {
            OcppFrame::Call { message_id, .. }
            | OcppFrame::CallResult { message_id, .. }
            | OcppFrame::CallError { message_id, .. } => message_id,
        }
    }

    pub fn to_value(&self) -> Value {
        match self {
            OcppFrame::Call {
                message_id,
                action,
                payload,
            } => json!([CALL, message_id, action.wire_name(), payload]),
            OcppFrame::CallResult {
                message_id,
                payload,
            } => json!([CALLRESULT, message_id, payload]),
            OcppFrame::CallError {
                message_id,
                error_code,
                error_description,
                error_details,
            } => json!([CALLERROR, message_id, error_code, error_description, error_details]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed OCPP-J frame: {0}")]
    MalformedJson(String),
    #[error("unknown action {0:?}")]
    UnknownAction(String),
}

/// Canonical UTF-8 JSON array, object keys sorted.
pub fn encode_frame(f: &OcppFrame) -> Vec<u8> {
    serde_json::to_vec(&f.to_value()).expect("frame values serialize")
}

pub fn decode_frame(bytes: &[u8]) -> Result<OcppFrame, DecodeError> {
    let malformed = |m: &str| DecodeError::MalformedJson(m.to_owned());
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::MalformedJson(e.to_string()))?;
    let items = value.as_array().ok_or_else(|| malformed("not an array"))?;
    let type_id = items
        .first()
        .and_then(Value::as_u64)
        .ok_or_else(|| malformed("missing message type id"))?;
    let expected_len = match type_id {
        CALL => 4,
        CALLRESULT => 3,
        CALLERROR => 5,
        other => return Err(DecodeError::MalformedJson(format!("bad message type id {other}"))),
    };
    if items.len() != expected_len {
        return Err(DecodeError::MalformedJson(format!(
            "type {type_id} frame needs {expected_len} elements, got {}",
            items.len()
        )));
    }
    let message_id = items[1]
        .as_str()
        .filter(|id| !id.is_empty() && id.len() <= MAX_MESSAGE_ID_LEN)
        .ok_or_else(|| malformed("message id must be a 1..=36 char string"))?
        .to_owned();
    let object = |v: &Value, what: &str| -> Result<Value, DecodeError> {
        if v.is_object() {
            Ok(v.clone())
        } else {
            Err(DecodeError::MalformedJson(format!("{what} must be an object")))
        }
    };
    match type_id {
        CALL => {
            let name = items[2].as_str().ok_or_else(|| malformed("action must be a string"))?;
            let action =
                OcppAction::from_wire(name).ok_or_else(|| DecodeError::UnknownAction(name.into()))?;
            Ok(OcppFrame::Call {
                message_id,
                action,
                payload: object(&items[3], "payload")?,
            })
        }
        CALLRESULT => Ok(OcppFrame::CallResult {
            message_id,
            payload: object(&items[2], "payload")?,
        }),
        _ => Ok(OcppFrame::CallError {
            message_id,
            error_code: items[2]
                .as_str()
                .ok_or_else(|| malformed("error code must be a string"))?
                .to_owned(),
            error_description: items[3]
                .as_str()
                .ok_or_else(|| malformed("error description must be a string"))?
                .to_owned(),
            error_details: object(&items[4], "error details")?,
        }),
    }
}

/// Best-effort `(message_id, action)` recovery from bytes that failed to
/// decode, so the CSMS can still correlate its answer.
pub(crate) fn salvage_call_header(bytes: &[u8]) -> (Option<String>, Option<String>) {
    let text = String::from_utf8_lossy(bytes);
    let mut strings = Vec::new();
    let mut rest = text.as_ref();
    while strings.len() < 2 {
        let Some(start) = rest.find('"') else { break };
        let after = &rest[start + 1..];
        let Some(end) = after.find('"') else { break };
        strings.push(after[..end].to_owned());
        rest = &after[end + 1..];
    }
    let mut it = strings.into_iter();
    (it.next().filter(|s| !s.is_empty()), it.next())
}
