//! OCPP-J framing, per-action payload schemas and the reference CSMS.

mod csms;
mod frame;
mod schema;

pub use csms::{
    csms_handle, csms_handle_bytes, csms_restart, BootShutdownPolicy, CsmsPolicy, CsmsReply,
    CsmsState,
};
pub use frame::{decode_frame, encode_frame, DecodeError, OcppAction, OcppFrame, CALL, CALLERROR, CALLRESULT};
pub use schema::{schema_for, validate_frame_bytes, validate_payload, ValidationResult};
