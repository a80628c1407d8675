//! Event-log data model: cases, events and the attribute schema inferred
//! from them.
//!
//! An [`EventLog`] is only constructed through [`EventLog::new`], which
//! derives the activity alphabet and attribute schema so that both always
//! agree with the traces.

mod xes;

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use xes::{parse_xes, serialize_xes, ParseReport, ParseWarning, XesError};

/// A literal attribute value as carried by XES.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum AttributeValue {
    String(String),
    Int(i64),
    Float(f64),
    Boolean(bool),
    Date(DateTime<Utc>),
}

impl AttributeValue {
    /// Numeric reading of the value, if it has one. Strings count when they
    /// parse as a finite number.
    pub fn as_number(&self) -> Option<f64> {
        match self {
            AttributeValue::Int(v) => Some(*v as f64),
            AttributeValue::Float(v) if v.is_finite() => Some(*v),
            AttributeValue::String(s) => s.trim().parse::<f64>().ok().filter(|v| v.is_finite()),
            _ => None,
        }
    }
}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::String(s) => f.write_str(s),
            AttributeValue::Int(v) => write!(f, "{v}"),
            AttributeValue::Float(v) => write!(f, "{v}"),
            AttributeValue::Boolean(v) => write!(f, "{v}"),
            AttributeValue::Date(d) => f.write_str(&d.to_rfc3339_opts(SecondsFormat::AutoSi, true)),
        }
    }
}

pub type AttributeMap = BTreeMap<String, AttributeValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub activity: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub attributes: AttributeMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub case_id: String,
    #[serde(default)]
    pub case_attributes: AttributeMap,
    pub events: Vec<Event>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeLevel {
    Case,
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttributeKind {
    /// Distinct values in first-occurrence order.
    Categorical {
        domain: Vec<String>,
    },
    Numeric {
        min: f64,
        max: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    #[serde(flatten)]
    pub kind: AttributeKind,
    pub level: AttributeLevel,
}

impl AttributeSpec {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, AttributeKind::Categorical { .. })
    }
}

pub type AttributeSchema = BTreeMap<String, AttributeSpec>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogError {
    #[error("trace {trace_index} has an event with an empty activity label")]
    EmptyActivity { trace_index: usize },
    #[error("case id {0:?} occurs more than once")]
    DuplicateCaseId(String),
    #[error("trace {trace_index} has events with decreasing timestamps")]
    UnorderedEvents { trace_index: usize },
    #[error("attribute {0:?} is used at case and event level with different kinds")]
    MixedLevelAttribute(String),
}

/// A validated collection of traces together with its derived alphabet and
/// attribute schema.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventLog {
    traces: Vec<Trace>,
    activity_alphabet: Vec<String>,
    attribute_schema: AttributeSchema,
}

impl EventLog {
    pub fn new(traces: Vec<Trace>) -> Result<Self, LogError> {
        let mut seen_cases = std::collections::HashSet::new();
        let mut alphabet: Vec<String> = Vec::new();
        for (trace_index, trace) in traces.iter().enumerate() {
            if !seen_cases.insert(trace.case_id.as_str()) {
                return Err(LogError::DuplicateCaseId(trace.case_id.clone()));
            }
            for window in trace.events.windows(2) {
                if window[1].timestamp < window[0].timestamp {
                    return Err(LogError::UnorderedEvents { trace_index });
                }
            }
            for event in &trace.events {
                if event.activity.is_empty() {
                    return Err(LogError::EmptyActivity { trace_index });
                }
                if !alphabet.iter().any(|a| a == &event.activity) {
                    alphabet.push(event.activity.clone());
                }
            }
        }
        let attribute_schema = infer_schema(&traces)?;
        Ok(EventLog {
            traces,
            activity_alphabet: alphabet,
            attribute_schema,
        })
    }

    pub fn empty() -> Self {
        EventLog {
            traces: Vec::new(),
            activity_alphabet: Vec::new(),
            attribute_schema: AttributeSchema::new(),
        }
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn activity_alphabet(&self) -> &[String] {
        &self.activity_alphabet
    }

    pub fn attribute_schema(&self) -> &AttributeSchema {
        &self.attribute_schema
    }

    pub fn num_events(&self) -> usize {
        self.traces.iter().map(Trace::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn into_traces(self) -> Vec<Trace> {
        self.traces
    }
}

#[derive(Default)]
struct Observed {
    all_numeric: bool,
    values: Vec<String>,
    min: f64,
    max: f64,
    seen: bool,
}

impl Observed {
    fn record(&mut self, value: &AttributeValue) {
        if !self.seen {
            self.seen = true;
            self.all_numeric = true;
            self.min = f64::INFINITY;
            self.max = f64::NEG_INFINITY;
        }
        match value.as_number() {
            Some(v) => {
                self.min = self.min.min(v);
                self.max = self.max.max(v);
            }
            None => self.all_numeric = false,
        }
        let rendered = value.to_string();
        if !self.values.contains(&rendered) {
            self.values.push(rendered);
        }
    }
}

/// Infers the attribute schema of a set of traces.
///
/// An attribute is numeric iff every observed value reads as a number;
/// otherwise it is categorical over its distinct values in first-occurrence
/// order (cases in order, case attributes before the case's events).
pub fn infer_schema(traces: &[Trace]) -> Result<AttributeSchema, LogError> {
    // (case-level observations, event-level observations, merged order)
    let mut case_obs: BTreeMap<&str, Observed> = BTreeMap::new();
    let mut event_obs: BTreeMap<&str, Observed> = BTreeMap::new();
    let mut merged: BTreeMap<&str, Observed> = BTreeMap::new();
    for trace in traces {
        for (name, value) in &trace.case_attributes {
            case_obs.entry(name).or_default().record(value);
            merged.entry(name).or_default().record(value);
        }
        for event in &trace.events {
            for (name, value) in &event.attributes {
                event_obs.entry(name).or_default().record(value);
                merged.entry(name).or_default().record(value);
            }
        }
    }

    let mut schema = AttributeSchema::new();
    for (name, obs) in merged {
        let level = match (case_obs.get(name), event_obs.get(name)) {
            (Some(c), Some(e)) => {
                if c.all_numeric != e.all_numeric {
                    return Err(LogError::MixedLevelAttribute(name.to_string()));
                }
                AttributeLevel::Event
            }
            (Some(_), None) => AttributeLevel::Case,
            _ => AttributeLevel::Event,
        };
        let kind = if obs.all_numeric {
            AttributeKind::Numeric {
                min: obs.min,
                max: obs.max,
            }
        } else {
            AttributeKind::Categorical { domain: obs.values }
        };
        schema.insert(name.to_string(), AttributeSpec { kind, level });
    }
    Ok(schema)
}
