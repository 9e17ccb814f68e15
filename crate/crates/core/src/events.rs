//! Streamed answer events and their server-sent-events wire form.
//!
//! A well-formed stream is `route (token | citation | table | chart |
//! sql_trace | warning)* (done | error)` with strictly increasing `seq`.
//! On the wire every event is `event: <name>\ndata: <json>\n\n`, where the
//! JSON is a single line and carries `seq` next to the payload fields.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Route,
    Token,
    Citation,
    Table,
    Chart,
    SqlTrace,
    Warning,
    Error,
    Done,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::Route,
        EventKind::Token,
        EventKind::Citation,
        EventKind::Table,
        EventKind::Chart,
        EventKind::SqlTrace,
        EventKind::Warning,
        EventKind::Error,
        EventKind::Done,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Route => "route",
            EventKind::Token => "token",
            EventKind::Citation => "citation",
            EventKind::Table => "table",
            EventKind::Chart => "chart",
            EventKind::SqlTrace => "sql_trace",
            EventKind::Warning => "warning",
            EventKind::Error => "error",
            EventKind::Done => "done",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, EventKind::Done | EventKind::Error)
    }

    fn is_body(self) -> bool {
        matches!(
            self,
            EventKind::Token
                | EventKind::Citation
                | EventKind::Table
                | EventKind::Chart
                | EventKind::SqlTrace
                | EventKind::Warning
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SseEvent {
    pub event: EventKind,
    pub data: Value,
    pub seq: u64,
}

impl SseEvent {
    /// `event:`/`data:` frame. Object payloads gain a `seq` field; other
    /// payloads are wrapped as `{"seq": .., "value": ..}`.
    pub fn to_wire(&self) -> String {
        let mut obj = match &self.data {
            Value::Object(m) => m.clone(),
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other.clone());
                m
            }
        };
        obj.insert("seq".into(), Value::from(self.seq));
        format!(
            "event: {}\ndata: {}\n\n",
            self.event.as_str(),
            Value::Object(obj)
        )
    }
}

/// SSE comment line used as a keep-alive.
pub const HEARTBEAT: &str = ": heartbeat\n\n";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StreamError {
    #[error("frame {index}: {message}")]
    Frame { index: usize, message: String },
    #[error("event {index} ({event}): {message}")]
    Grammar {
        index: usize,
        event: &'static str,
        message: String,
    },
    #[error("stream has no events")]
    Empty,
    #[error("stream ended without a done or error event")]
    Unterminated,
}

/// Parses a complete SSE body. Comment lines are skipped; `seq` is taken
/// out of the data object.
pub fn parse_wire(body: &str) -> Result<Vec<SseEvent>, StreamError> {
    let mut out = Vec::new();
    for (index, frame) in body.split("\n\n").enumerate() {
        let lines: Vec<&str> = frame
            .lines()
            .filter(|l| !l.is_empty() && !l.starts_with(':'))
            .collect();
        if lines.is_empty() {
            continue;
        }
        let err = |message: String| StreamError::Frame { index, message };
        let mut name = None;
        let mut data = None;
        for l in lines {
            if let Some(v) = l.strip_prefix("event: ") {
                name = Some(v);
            } else if let Some(v) = l.strip_prefix("data: ") {
                if data.is_some() {
                    return Err(err("more than one data line".into()));
                }
                data = Some(v);
            } else {
                return Err(err(format!("unexpected line {l:?}")));
            }
        }
        let name = name.ok_or_else(|| err("missing event line".into()))?;
        let event = EventKind::parse(name).ok_or_else(|| err(format!("unknown event {name:?}")))?;
        let mut value: Value = serde_json::from_str(data.ok_or_else(|| err("missing data line".into()))?)
            .map_err(|e| err(e.to_string()))?;
        let seq = value
            .as_object_mut()
            .and_then(|m| m.remove("seq"))
            .and_then(|s| s.as_u64())
            .ok_or_else(|| err("data has no seq".into()))?;
        out.push(SseEvent {
            event,
            data: value,
            seq,
        });
    }
    Ok(out)
}

/// Checks event order, terminal uniqueness and `seq` monotonicity.
pub fn check_grammar(events: &[SseEvent]) -> Result<(), StreamError> {
    let Some(first) = events.first() else {
        return Err(StreamError::Empty);
    };
    let bad = |index: usize, message: &str| StreamError::Grammar {
        index,
        event: events[index].event.as_str(),
        message: message.to_string(),
    };
    if first.event != EventKind::Route {
        return Err(bad(0, "stream must start with route"));
    }
    for (i, e) in events.iter().enumerate().skip(1) {
        if e.seq <= events[i - 1].seq {
            return Err(bad(i, "seq is not strictly increasing"));
        }
        let last = i + 1 == events.len();
        if e.event.is_terminal() && !last {
            return Err(bad(i, "terminal event before end of stream"));
        }
        if !e.event.is_terminal() && !e.event.is_body() {
            return Err(bad(i, "route may only appear first"));
        }
    }
    if !events.last().unwrap().event.is_terminal() {
        return Err(StreamError::Unterminated);
    }
    Ok(())
}

/// Numbers events in emission order and forwards them to a sink. After a
/// terminal event further emissions are dropped.
pub struct Emitter<'a> {
    next_seq: u64,
    terminated: bool,
    sink: Box<dyn FnMut(SseEvent) + Send + 'a>,
}

impl<'a> Emitter<'a> {
    pub fn new(sink: impl FnMut(SseEvent) + Send + 'a) -> Self {
        Self {
            next_seq: 0,
            terminated: false,
            sink: Box::new(sink),
        }
    }

    /// Emitter that discards everything.
    pub fn discard() -> Self {
        Self::new(|_| {})
    }

    pub fn emit(&mut self, event: EventKind, data: Value) -> bool {
        if self.terminated {
            return false;
        }
        self.terminated = event.is_terminal();
        let seq = self.next_seq;
        self.next_seq += 1;
        (self.sink)(SseEvent { event, data, seq });
        true
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn emitted(&self) -> u64 {
        self.next_seq
    }
}
