//! Deterministic simulator for the EV charging ecosystem (EV, EVSE and CSMS)
//! with an attack orchestrator for broken-wire and OCPP fuzzing campaigns.
//!
//! The crate is organised around a virtual-time event loop ([`runner`]) that
//! drives charging sessions ([`fsm`]) over simulated links ([`net`]), talks
//! OCPP-J to a reference backend ([`ocpp`]), executes attack plans
//! ([`attack`]) and writes every event to an append-only store
//! ([`telemetry`]).

pub mod attack;
pub mod fsm;
pub mod model;
pub mod net;
pub mod ocpp;
pub mod runner;
pub mod telemetry;
pub mod time;

pub use attack::{AttackKind, AttackPlan, FuzzPlan, FuzzRecord, OutcomeCode};
pub use fsm::{ChargingSession, SessionEvent, SessionState};
pub use model::{parse_scenario, validate_scenario, EvConfig, EvseConfig, Scenario};
pub use ocpp::{CsmsPolicy, CsmsState, OcppAction, OcppFrame};
pub use runner::{run, RunError, RunExit, RunResult, SimDriver};
pub use telemetry::{Query, TelemetryRecord, TelemetryStore};
pub use time::SimTime;
