//! Reading and writing the literal-attribute subset of XES.
//!
//! `<log>`, `<trace>`, `<event>` and the `string`, `date`, `int`, `float`
//! and `boolean` attribute elements are understood. Extensions, globals,
//! classifiers, lists, containers and meta-attributes are skipped.

use std::fmt::Write as _;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, TimeZone, Utc};
use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event as XmlEvent};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AttributeMap, AttributeValue, Event, EventLog, LogError, Trace};

const CONCEPT_NAME: &str = "concept:name";
const TIME_TIMESTAMP: &str = "time:timestamp";

#[derive(Debug, Error)]
pub enum XesError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("event {event_index} of trace {trace_index} has no concept:name")]
    MissingConceptName { trace_index: usize, event_index: usize },
    #[error("attribute {key:?} has invalid {kind} value {value:?}")]
    InvalidValue {
        key: String,
        kind: &'static str,
        value: String,
    },
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ParseWarning {
    /// Events of this trace had no `time:timestamp`; epoch + event index
    /// seconds was used instead.
    SynthesizedTimestamps {
        trace_index: usize,
        events: usize,
    },
    SynthesizedCaseId {
        trace_index: usize,
        case_id: String,
    },
    IgnoredElement {
        element: String,
        count: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub traces: usize,
    pub events: usize,
    pub activities: Vec<String>,
    pub warnings: Vec<ParseWarning>,
}

impl ParseReport {
    fn ignored(&mut self, element: &str) {
        for w in &mut self.warnings {
            if let ParseWarning::IgnoredElement { element: e, count } = w {
                if e == element {
                    *count += 1;
                    return;
                }
            }
        }
        self.warnings.push(ParseWarning::IgnoredElement {
            element: element.to_string(),
            count: 1,
        });
    }
}

#[derive(Default)]
struct EventBuilder {
    activity: Option<String>,
    timestamp: Option<DateTime<Utc>>,
    attributes: AttributeMap,
}

#[derive(Default)]
struct TraceBuilder {
    case_id: Option<String>,
    attributes: AttributeMap,
    events: Vec<EventBuilder>,
}

fn malformed(e: impl std::fmt::Display) -> XesError {
    XesError::MalformedXml(e.to_string())
}

fn parse_date(text: &str) -> Option<DateTime<Utc>> {
    if let Ok(d) = DateTime::parse_from_rfc3339(text) {
        return Some(d.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(text, fmt).ok())
        .map(|naive| Utc.from_utc_datetime(&naive))
}

fn typed_value(tag: &str, key: &str, raw: String) -> Result<AttributeValue, XesError> {
    let invalid = |kind: &'static str, raw: String| XesError::InvalidValue {
        key: key.to_string(),
        kind,
        value: raw,
    };
    Ok(match tag {
        "string" => AttributeValue::String(raw),
        "int" => match raw.trim().parse() {
            Ok(v) => AttributeValue::Int(v),
            Err(_) => return Err(invalid("int", raw)),
        },
        "float" => match raw.trim().parse() {
            Ok(v) => AttributeValue::Float(v),
            Err(_) => return Err(invalid("float", raw)),
        },
        "boolean" => match raw.trim().to_ascii_lowercase().as_str() {
            "true" => AttributeValue::Boolean(true),
            "false" => AttributeValue::Boolean(false),
            _ => return Err(invalid("boolean", raw)),
        },
        "date" => match parse_date(raw.trim()) {
            Some(d) => AttributeValue::Date(d),
            None => return Err(invalid("date", raw)),
        },
        _ => unreachable!("not a literal attribute tag"),
    })
}

fn is_literal(tag: &str) -> bool {
    matches!(tag, "string" | "date" | "int" | "float" | "boolean")
}

fn key_value(element: &BytesStart<'_>) -> Result<(String, String), XesError> {
    let mut key = None;
    let mut value = None;
    for attr in element.attributes() {
        let attr = attr.map_err(malformed)?;
        let text = attr.unescape_value().map_err(malformed)?.into_owned();
        match attr.key.local_name().as_ref() {
            b"key" => key = Some(text),
            b"value" => value = Some(text),
            _ => {}
        }
    }
    let key = key.ok_or_else(|| malformed("attribute element without `key`"))?;
    Ok((key, value.unwrap_or_default()))
}

/// Parses an XES document.
///
/// Events without `time:timestamp` get epoch + event-index seconds; every
/// such substitution is listed in the returned report.
pub fn parse_xes(bytes: &[u8]) -> Result<(EventLog, ParseReport), XesError> {
    let text = std::str::from_utf8(bytes).map_err(malformed)?;
    let mut reader = Reader::from_str(text);
    reader.config_mut().check_end_names = true;

    let mut report = ParseReport::default();
    let mut open: Vec<String> = Vec::new();
    let mut skip_depth = 0usize;
    let mut seen_log = false;
    let mut trace: Option<TraceBuilder> = None;
    let mut event: Option<EventBuilder> = None;
    let mut finished: Vec<TraceBuilder> = Vec::new();

    loop {
        let xml_event = reader.read_event().map_err(malformed)?;
        let (element, is_empty) = match &xml_event {
            XmlEvent::Start(e) => (e, false),
            XmlEvent::Empty(e) => (e, true),
            XmlEvent::End(_) => {
                let name = open.pop().ok_or_else(|| malformed("unbalanced end tag"))?;
                if skip_depth > 0 {
                    skip_depth -= 1;
                    continue;
                }
                match name.as_str() {
                    "event" => {
                        if let (Some(ev), Some(tr)) = (event.take(), trace.as_mut()) {
                            tr.events.push(ev);
                        }
                    }
                    "trace" => {
                        if let Some(tr) = trace.take() {
                            finished.push(tr);
                        }
                    }
                    _ => {}
                }
                continue;
            }
            XmlEvent::Eof => break,
            _ => continue,
        };
        let tag = String::from_utf8_lossy(element.local_name().as_ref()).into_owned();
        if !is_empty {
            open.push(tag.clone());
        }
        if skip_depth > 0 {
            if !is_empty {
                skip_depth += 1;
            }
            continue;
        }
        let skip_children = |skip_depth: &mut usize| {
            if !is_empty {
                *skip_depth = 1;
            }
        };

        if !seen_log {
            if tag != "log" {
                return Err(malformed(format!("expected <log> root, found <{tag}>")));
            }
            seen_log = true;
            continue;
        }
        match tag.as_str() {
            "trace" if trace.is_none() => trace = Some(TraceBuilder::default()),
            "event" if trace.is_some() && event.is_none() => event = Some(EventBuilder::default()),
            t if is_literal(t) => {
                let (key, raw) = key_value(element)?;
                if let Some(ev) = event.as_mut() {
                    match key.as_str() {
                        CONCEPT_NAME => ev.activity = Some(raw),
                        TIME_TIMESTAMP => match parse_date(raw.trim()) {
                            Some(d) => ev.timestamp = Some(d),
                            None => {
                                return Err(XesError::InvalidValue {
                                    key,
                                    kind: "date",
                                    value: raw,
                                })
                            }
                        },
                        _ => {
                            let value = typed_value(t, &key, raw)?;
                            ev.attributes.insert(key, value);
                        }
                    }
                } else if let Some(tr) = trace.as_mut() {
                    if key == CONCEPT_NAME {
                        tr.case_id = Some(raw);
                    } else {
                        let value = typed_value(t, &key, raw)?;
                        tr.attributes.insert(key, value);
                    }
                }
                // Log-level attributes carry no per-case information.
                skip_children(&mut skip_depth);
            }
            other => {
                report.ignored(other);
                skip_children(&mut skip_depth);
            }
        }
    }
    if !seen_log {
        return Err(malformed("document has no root element"));
    }
    if !open.is_empty() {
        return Err(malformed(format!("unclosed element <{}>", open.last().unwrap())));
    }

    let epoch = DateTime::<Utc>::UNIX_EPOCH;
    let mut traces = Vec::with_capacity(finished.len());
    for (trace_index, tb) in finished.into_iter().enumerate() {
        let case_id = match tb.case_id {
            Some(id) => id,
            None => {
                let id = format!("trace-{trace_index}");
                report.warnings.push(ParseWarning::SynthesizedCaseId {
                    trace_index,
                    case_id: id.clone(),
                });
                id
            }
        };
        let mut synthesized = 0;
        let mut events = Vec::with_capacity(tb.events.len());
        for (event_index, eb) in tb.events.into_iter().enumerate() {
            let activity = eb.activity.ok_or(XesError::MissingConceptName {
                trace_index,
                event_index,
            })?;
            let timestamp = eb.timestamp.unwrap_or_else(|| {
                synthesized += 1;
                epoch + chrono::Duration::seconds(event_index as i64)
            });
            events.push(Event {
                activity,
                timestamp,
                attributes: eb.attributes,
            });
        }
        if synthesized > 0 {
            report.warnings.push(ParseWarning::SynthesizedTimestamps {
                trace_index,
                events: synthesized,
            });
        }
        traces.push(Trace {
            case_id,
            case_attributes: tb.attributes,
            events,
        });
    }
    let log = EventLog::new(traces)?;
    report.traces = log.traces().len();
    report.events = log.num_events();
    report.activities = log.activity_alphabet().to_vec();
    Ok((log, report))
}

fn write_attribute(out: &mut String, indent: &str, key: &str, value: &AttributeValue) {
    let (tag, text) = match value {
        AttributeValue::String(s) => ("string", s.clone()),
        AttributeValue::Int(v) => ("int", v.to_string()),
        AttributeValue::Float(v) => ("float", v.to_string()),
        AttributeValue::Boolean(v) => ("boolean", v.to_string()),
        AttributeValue::Date(d) => ("date", d.to_rfc3339_opts(SecondsFormat::AutoSi, true)),
    };
    let _ = writeln!(
        out,
        "{indent}<{tag} key=\"{}\" value=\"{}\"/>",
        escape(key),
        escape(text.as_str())
    );
}

/// Writes a log as an XES document that [`parse_xes`] reads back to an equal
/// log.
pub fn serialize_xes(log: &EventLog) -> Vec<u8> {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(
        "<log xes.version=\"1.0\" xes.features=\"nested-attributes\" xmlns=\"http://www.xes-standard.org/\">\n",
    );
    out.push_str(
        "  <extension name=\"Concept\" prefix=\"concept\" uri=\"http://www.xes-standard.org/concept.xesext\"/>\n",
    );
    out.push_str("  <extension name=\"Time\" prefix=\"time\" uri=\"http://www.xes-standard.org/time.xesext\"/>\n");
    for trace in log.traces() {
        out.push_str("  <trace>\n");
        write_attribute(
            &mut out,
            "    ",
            CONCEPT_NAME,
            &AttributeValue::String(trace.case_id.clone()),
        );
        for (key, value) in &trace.case_attributes {
            write_attribute(&mut out, "    ", key, value);
        }
        for event in &trace.events {
            out.push_str("    <event>\n");
            write_attribute(
                &mut out,
                "      ",
                CONCEPT_NAME,
                &AttributeValue::String(event.activity.clone()),
            );
            write_attribute(
                &mut out,
                "      ",
                TIME_TIMESTAMP,
                &AttributeValue::Date(event.timestamp),
            );
            for (key, value) in &event.attributes {
                write_attribute(&mut out, "      ", key, value);
            }
            out.push_str("    </event>\n");
        }
        out.push_str("  </trace>\n");
    }
    out.push_str("</log>\n");
    out.into_bytes()
}
