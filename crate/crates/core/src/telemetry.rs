//! Append-only event store with JSONL persistence.
//!
//! Every record carries a virtual timestamp, a tagged source, a kind from a
//! closed vocabulary and a free-form payload. Records are never removed or
//! rewritten once appended.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Ev(String),
    Evse(String),
    Csms,
    Attack,
    Link(String),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Ev(id) => write!(f, "ev:{id}"),
            Source::Evse(id) => write!(f, "evse:{id}"),
            Source::Csms => f.write_str("csms"),
            Source::Attack => f.write_str("attack"),
            Source::Link(id) => write!(f, "link:{id}"),
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csms" => return Ok(Source::Csms),
            "attack" => return Ok(Source::Attack),
            _ => {}
        }
        let (tag, id) = s
            .split_once(':')
            .ok_or_else(|| format!("unknown source {s:?}"))?;
        if id.is_empty() {
            return Err(format!("empty id in source {s:?}"));
        }
        match tag {
            "ev" => Ok(Source::Ev(id.into())),
            "evse" => Ok(Source::Evse(id.into())),
            "link" => Ok(Source::Link(id.into())),
            _ => Err(format!("unknown source tag {tag:?}")),
        }
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    ScenarioStart,
    ScenarioEnd,
    StateTransition,
    V2gMsg,
    OcppMsg,
    Packet,
    AttackStart,
    AttackEnd,
    FuzzRecord,
    PowerSample,
    Error,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::ScenarioStart => "scenario-start",
            RecordKind::ScenarioEnd => "scenario-end",
            RecordKind::StateTransition => "state-transition",
            RecordKind::V2gMsg => "v2g-msg",
            RecordKind::OcppMsg => "ocpp-msg",
            RecordKind::Packet => "packet",
            RecordKind::AttackStart => "attack-start",
            RecordKind::AttackEnd => "attack-end",
            RecordKind::FuzzRecord => "fuzz-record",
            RecordKind::PowerSample => "power-sample",
            RecordKind::Error => "error",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_owned())).map_err(|_| format!("unknown kind {s:?}"))
    }
}

/// Layer of the charging stack an event belongs to: network, protocol,
/// charging, energy management.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    L1,
    L2,
    L3,
    L4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryRecord {
    pub ts: f64,
    /// Position in the store; assigned by [`TelemetryStore::append`].
    #[serde(default)]
    pub seq: u64,
    pub source: Source,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<Layer>,
    pub payload: Value,
}

impl TelemetryRecord {
    pub fn new(ts: f64, source: Source, kind: RecordKind, payload: Value) -> Self {
        Self {
            ts,
            seq: 0,
            source,
            kind,
            session_id: None,
            layer: None,
            payload,
        }
    }

    pub fn session(mut self, id: impl Into<String>) -> Self {
        self.session_id = Some(id.into());
        self
    }

    pub fn layer(mut self, layer: Layer) -> Self {
        self.layer = Some(layer);
        self
    }
}

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("record at ts {ts} precedes last appended ts {last}")]
    OutOfOrder { ts: f64, last: f64 },
    #[error("telemetry i/o: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Filter over the store. Absent fields match everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Query {
    /// Inclusive on both ends.
    pub time_range: Option<(f64, f64)>,
    pub source: Option<SourceFilter>,
    pub kind: Option<RecordKind>,
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceFilter {
    Exact(Source),
    /// Every source with this tag, e.g. `"ev"` or `"link"`.
    Tag(String),
}

impl SourceFilter {
    fn matches(&self, s: &Source) -> bool {
        match self {
            SourceFilter::Exact(src) => src == s,
            SourceFilter::Tag(tag) => {
                let text = s.to_string();
                text == *tag || text.strip_prefix(tag.as_str()).is_some_and(|r| r.starts_with(':'))
            }
        }
    }
}

impl Query {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn kind(kind: RecordKind) -> Self {
        Self {
            kind: Some(kind),
            ..Self::default()
        }
    }

    pub fn with_session(mut self, id: impl Into<String>) -> Self {
        self.session_id = Some(id.into());
        self
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = Some(SourceFilter::Exact(source));
        self
    }

    pub fn with_range(mut self, from: f64, to: f64) -> Self {
        self.time_range = Some((from, to));
        self
    }

    pub fn matches(&self, r: &TelemetryRecord) -> bool {
        if let Some((from, to)) = self.time_range {
            if r.ts < from || r.ts > to {
                return false;
            }
        }
        if let Some(f) = &self.source {
            if !f.matches(&r.source) {
                return false;
            }
        }
        if self.kind.is_some_and(|k| k != r.kind) {
            return false;
        }
        if let Some(id) = &self.session_id {
            if r.session_id.as_ref() != Some(id) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TelemetryStore {
    records: Vec<TelemetryRecord>,
}

impl TelemetryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TelemetryRecord] {
        &self.records
    }

    pub fn last_ts(&self) -> Option<f64> {
        self.records.last().map(|r| r.ts)
    }

    /// Appends `rec`, assigning its sequence position. Returns that position.
    pub fn append(&mut self, mut rec: TelemetryRecord) -> Result<u64, TelemetryError> {
        if let Some(last) = self.last_ts() {
            if rec.ts < last {
                return Err(TelemetryError::OutOfOrder { ts: rec.ts, last });
            }
        }
        let seq = self.records.len() as u64;
        rec.seq = seq;
        self.records.push(rec);
        Ok(seq)
    }

    /// Matching records in store order, which is ts order.
    pub fn query(&self, q: &Query) -> Vec<&TelemetryRecord> {
        self.records.iter().filter(|r| q.matches(r)).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn export_jsonl(&self, path: &Path) -> Result<(), TelemetryError> {
        let f = File::create(path)?;
        self.write_jsonl(BufWriter::new(f))?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, TelemetryError> {
        let mut store = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TelemetryRecord =
                serde_json::from_str(&line).map_err(|e| TelemetryError::Format {
                    line: lineno,
                    message: e.to_string(),
                })?;
            let expected = store.len() as u64;
            if rec.seq != expected {
                return Err(TelemetryError::Format {
                    line: lineno,
                    message: format!("seq {} out of sequence, expected {expected}", rec.seq),
                });
            }
            store.append(rec).map_err(|e| TelemetryError::Format {
                line: lineno,
                message: e.to_string(),
            })?;
        }
        Ok(store)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, TelemetryError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn rec(ts: f64, kind: RecordKind) -> TelemetryRecord {
        TelemetryRecord::new(ts, Source::Csms, kind, json!({}))
    }

    #[test]
    fn append_to_empty_store() {
        let mut s = TelemetryStore::new();
        assert_eq!(s.append(rec(0.0, RecordKind::Error)).unwrap(), 0);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn ts_regression_is_rejected() {
        let mut s = TelemetryStore::new();
        s.append(rec(5.0, RecordKind::Error)).unwrap();
        assert!(matches!(
            s.append(rec(4.0, RecordKind::Error)),
            Err(TelemetryError::OutOfOrder { .. })
        ));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn ten_thousand_appends_keep_order() {
        let mut s = TelemetryStore::new();
        for i in 0..10_000 {
            s.append(rec(i as f64 * 0.5, RecordKind::Packet)).unwrap();
        }
        let all = s.query(&Query::all());
        assert_eq!(all.len(), 10_000);
        assert!(all.windows(2).all(|w| w[0].seq + 1 == w[1].seq && w[0].ts <= w[1].ts));
    }

    #[test]
    fn query_filters_combine() {
        let mut s = TelemetryStore::new();
        s.append(rec(1.0, RecordKind::AttackStart)).unwrap();
        s.append(TelemetryRecord::new(2.0, Source::Ev("EV1".into()), RecordKind::V2gMsg, json!({})).session("s1"))
            .unwrap();
        s.append(TelemetryRecord::new(3.0, Source::Link("cable-A".into()), RecordKind::Packet, json!({})))
            .unwrap();
        assert_eq!(s.query(&Query::all()).len(), 3);
        assert_eq!(s.query(&Query::kind(RecordKind::AttackStart)).len(), 1);
        assert_eq!(s.query(&Query::all().with_session("s1")).len(), 1);
        assert!(s.query(&Query::all().with_range(10.0, 20.0)).is_empty());
        let tag = Query {
            source: Some(SourceFilter::Tag("link".into())),
            ..Query::default()
        };
        assert_eq!(s.query(&tag).len(), 1);
    }

    #[test]
    fn source_round_trips_through_text() {
        for s in ["ev:EV1", "evse:A", "csms", "attack", "link:cable-A"] {
            assert_eq!(s.parse::<Source>().unwrap().to_string(), s);
        }
        assert!("plane:x".parse::<Source>().is_err());
    }

    #[test]
    fn absent_optionals_are_omitted() {
        let line = serde_json::to_string(&rec(1.0, RecordKind::Error)).unwrap();
        assert!(!line.contains("null"));
        assert!(!line.contains("session_id"));
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let mut s = TelemetryStore::new();
        s.append(rec(1.0, RecordKind::Error)).unwrap();
        s.append(rec(2.0, RecordKind::Error)).unwrap();
        let mut text = s.to_jsonl();
        text.truncate(text.len() - 10);
        match TelemetryStore::read_jsonl(text.as_bytes()) {
            Err(TelemetryError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_store_exports_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        TelemetryStore::new().export_jsonl(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(TelemetryStore::load_jsonl(&path).unwrap().is_empty());
    }
}
