//! Fixed-width prefix encoding.
//!
//! Every prefix of every trace becomes one sample. The feature vector holds
//! the last `window` activities one-hot per slot (most recent in slot 0,
//! `PAD` when the prefix is shorter than the window), followed by the
//! selected case attributes: categorical ones one-hot over their domain,
//! numeric ones min-max scaled with the log-wide range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{AttributeKind, AttributeLevel, EventLog, Trace};

pub const PAD: &str = "PAD";
pub const END: &str = "END";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("window must be positive")]
    InvalidWindow,
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("attribute {0:?} is event-level; only case attributes can be encoded")]
    EventLevelAttributeUnsupported(String),
    #[error("activity label {0:?} is reserved")]
    ReservedActivity(String),
    #[error("event log is empty")]
    EmptyLog,
    #[error("prefix length {prefix_length} out of range for trace of length {trace_length}")]
    PrefixOutOfRange { prefix_length: usize, trace_length: usize },
    #[error("case {case_id:?} has no usable value for attribute {attribute:?}")]
    MissingCaseAttribute { case_id: String, attribute: String },
    #[error("unknown activity {0:?}")]
    UnknownActivity(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
pub enum CaseFeatureEncoding {
    OneHot { values: Vec<String> },
    MinMax { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFeature {
    pub attribute: String,
    #[serde(flatten)]
    pub encoding: CaseFeatureEncoding,
}

impl CaseFeature {
    fn width(&self) -> usize {
        match &self.encoding {
            CaseFeatureEncoding::OneHot { values } => values.len(),
            CaseFeatureEncoding::MinMax { .. } => 1,
        }
    }
}

/// Where a feature column comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum FeatureSource {
    /// `activity == None` is the padding symbol.
    Activity {
        slot: usize,
        activity: Option<String>,
    },
    Categorical {
        attribute: String,
        value: String,
    },
    Numeric {
        attribute: String,
    },
}

impl FeatureSource {
    pub fn display_name(&self) -> String {
        match self {
            FeatureSource::Activity { slot, activity } => {
                format!("slot{slot} = {}", activity.as_deref().unwrap_or(PAD))
            }
            FeatureSource::Categorical { attribute, value } => format!("{attribute} = {value}"),
            FeatureSource::Numeric { attribute } => attribute.clone(),
        }
    }

    pub fn attribute(&self) -> Option<&str> {
        match self {
            FeatureSource::Activity { .. } => None,
            FeatureSource::Categorical { attribute, .. } | FeatureSource::Numeric { attribute } => Some(attribute),
        }
    }

    /// One-hot columns are tested by equality; only min-max columns carry a
    /// genuine threshold.
    pub fn is_indicator(&self) -> bool {
        !matches!(self, FeatureSource::Numeric { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub window: usize,
    pub activity_alphabet: Vec<String>,
    pub case_features: Vec<CaseFeature>,
    pub features: Vec<FeatureSource>,
}

impl EncodingSpec {
    pub fn dimension(&self) -> usize {
        self.features.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(FeatureSource::display_name).collect()
    }

    /// Class labels: the alphabet followed by `END`.
    pub fn class_names(&self) -> Vec<String> {
        let mut names = self.activity_alphabet.clone();
        names.push(END.to_string());
        names
    }

    pub fn num_classes(&self) -> usize {
        self.activity_alphabet.len() + 1
    }

    pub fn end_class(&self) -> usize {
        self.activity_alphabet.len()
    }

    pub fn class_of(&self, activity: &str) -> Option<usize> {
        self.activity_alphabet.iter().position(|a| a == activity)
    }

    /// Width of one positional slot (alphabet plus `PAD`).
    pub fn slot_width(&self) -> usize {
        self.activity_alphabet.len() + 1
    }

    /// Columns holding the activity window; everything after belongs to
    /// case attributes.
    pub fn positional_width(&self) -> usize {
        self.window * self.slot_width()
    }

    /// All columns derived from `attribute`.
    pub fn attribute_columns(&self, attribute: &str) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.attribute() == Some(attribute))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn encoded_attributes(&self) -> impl Iterator<Item = &str> {
        self.case_features.iter().map(|c| c.attribute.as_str())
    }
}

/// Human-readable view of one encoded row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedRow {
    /// Activity per slot, most recent first; `PAD` before the trace start.
    pub window: Vec<String>,
    pub attributes: std::collections::BTreeMap<String, String>,
}

impl EncodingSpec {
    /// Inverts the encoding of `row` as far as the features allow.
    pub fn decode(&self, row: &[f64]) -> DecodedRow {
        let mut window = vec![String::new(); self.window];
        let mut attributes = std::collections::BTreeMap::new();
        for (source, &x) in self.features.iter().zip(row) {
            match source {
                FeatureSource::Activity { slot, activity } if x == 1.0 => {
                    window[*slot] = activity.clone().unwrap_or_else(|| PAD.to_string());
                }
                FeatureSource::Categorical { attribute, value } if x == 1.0 => {
                    attributes.insert(attribute.clone(), value.clone());
                }
                FeatureSource::Numeric { attribute } => {
                    let value = self
                        .case_features
                        .iter()
                        .find(|c| &c.attribute == attribute)
                        .and_then(|c| match c.encoding {
                            CaseFeatureEncoding::MinMax { min, max } => Some(min + x * (max - min)),
                            _ => None,
                        })
                        .unwrap_or(x);
                    attributes.insert(attribute.clone(), value.to_string());
                }
                _ => {}
            }
        }
        DecodedRow { window, attributes }
    }
}

pub fn build_encoding_spec(
    log: &EventLog,
    window: usize,
    selected_attributes: &[String],
) -> Result<EncodingSpec, EncodingError> {
    if window == 0 {
        return Err(EncodingError::InvalidWindow);
    }
    let alphabet = log.activity_alphabet().to_vec();
    if let Some(reserved) = alphabet.iter().find(|a| a.as_str() == END) {
        return Err(EncodingError::ReservedActivity(reserved.clone()));
    }
    let mut features = Vec::new();
    for slot in 0..window {
        for activity in &alphabet {
            features.push(FeatureSource::Activity {
                slot,
                activity: Some(activity.clone()),
            });
        }
        features.push(FeatureSource::Activity { slot, activity: None });
    }

    let schema = log.attribute_schema();
    let mut case_features = Vec::new();
    for name in selected_attributes {
        let spec = schema
            .get(name)
            .ok_or_else(|| EncodingError::UnknownAttribute(name.clone()))?;
        if spec.level != AttributeLevel::Case {
            return Err(EncodingError::EventLevelAttributeUnsupported(name.clone()));
        }
        if case_features.iter().any(|c: &CaseFeature| &c.attribute == name) {
            continue;
        }
        let encoding = match &spec.kind {
            AttributeKind::Categorical { domain } => {
                for value in domain {
                    features.push(FeatureSource::Categorical {
                        attribute: name.clone(),
                        value: value.clone(),
                    });
                }
                CaseFeatureEncoding::OneHot { values: domain.clone() }
            }
            AttributeKind::Numeric { min, max } => {
                features.push(FeatureSource::Numeric {
                    attribute: name.clone(),
                });
                CaseFeatureEncoding::MinMax { min: *min, max: *max }
            }
        };
        case_features.push(CaseFeature {
            attribute: name.clone(),
            encoding,
        });
    }
    debug_assert_eq!(
        features.len(),
        window * (alphabet.len() + 1) + case_features.iter().map(CaseFeature::width).sum::<usize>()
    );
    Ok(EncodingSpec {
        window,
        activity_alphabet: alphabet,
        case_features,
        features,
    })
}

/// Case-level attributes eligible for encoding, in schema order.
pub fn case_level_attributes(log: &EventLog) -> Vec<String> {
    log.attribute_schema()
        .iter()
        .filter(|(_, s)| s.level == AttributeLevel::Case)
        .map(|(n, _)| n.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextActivity<'a> {
    Activity(&'a str),
    End,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefixRef<'a> {
    pub trace_index: usize,
    pub trace: &'a Trace,
    pub prefix_length: usize,
    pub next: NextActivity<'a>,
}

/// Every prefix of every trace with the activity that follows it.
pub fn extract_prefixes(log: &EventLog) -> Result<Vec<PrefixRef<'_>>, EncodingError> {
    if log.is_empty() {
        return Err(EncodingError::EmptyLog);
    }
    let mut out = Vec::with_capacity(log.num_events());
    for (trace_index, trace) in log.traces().iter().enumerate() {
        for prefix_length in 1..=trace.len() {
            let next = match trace.events.get(prefix_length) {
                Some(e) => NextActivity::Activity(&e.activity),
                None => NextActivity::End,
            };
            out.push(PrefixRef {
                trace_index,
                trace,
                prefix_length,
                next,
            });
        }
    }
    Ok(out)
}

pub fn encode_prefix(spec: &EncodingSpec, trace: &Trace, prefix_length: usize) -> Result<Vec<f64>, EncodingError> {
    if prefix_length == 0 || prefix_length > trace.len() {
        return Err(EncodingError::PrefixOutOfRange {
            prefix_length,
            trace_length: trace.len(),
        });
    }
    let slot_width = spec.slot_width();
    let mut features = vec![0.0; spec.dimension()];
    for slot in 0..spec.window {
        let column = if slot < prefix_length {
            let activity = &trace.events[prefix_length - 1 - slot].activity;
            spec.class_of(activity)
                .ok_or_else(|| EncodingError::UnknownActivity(activity.clone()))?
        } else {
            slot_width - 1
        };
        features[slot * slot_width + column] = 1.0;
    }

    let mut offset = spec.positional_width();
    for cf in &spec.case_features {
        let missing = || EncodingError::MissingCaseAttribute {
            case_id: trace.case_id.clone(),
            attribute: cf.attribute.clone(),
        };
        let value = trace.case_attributes.get(&cf.attribute).ok_or_else(missing)?;
        match &cf.encoding {
            CaseFeatureEncoding::OneHot { values } => {
                let rendered = value.to_string();
                let index = values.iter().position(|v| v == &rendered).ok_or_else(missing)?;
                features[offset + index] = 1.0;
                offset += values.len();
            }
            CaseFeatureEncoding::MinMax { min, max } => {
                let v = value.as_number().ok_or_else(missing)?;
                let range = max - min;
                features[offset] = if range > 0.0 {
                    ((v - min) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                offset += 1;
            }
        }
    }
    Ok(features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSample {
    pub features: Vec<f64>,
    pub label: usize,
    pub case_id: String,
    pub prefix_length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixDataset {
    pub spec: EncodingSpec,
    pub samples: Vec<PrefixSample>,
    pub class_names: Vec<String>,
}

impl PrefixDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    /// Same samples with `labels` substituted.
    pub fn with_labels(&self, labels: &[usize]) -> PrefixDataset {
        assert_eq!(labels.len(), self.samples.len());
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, &label)| PrefixSample { label, ..s.clone() })
            .collect();
        PrefixDataset {
            spec: self.spec.clone(),
            samples,
            class_names: self.class_names.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_names.len()];
        for s in &self.samples {
            hist[s.label] += 1;
        }
        hist
    }

    pub fn to_columnar(&self) -> ColumnarDataset {
        ColumnarDataset {
            spec: self.spec.clone(),
            class_names: self.class_names.clone(),
            feature_names: self.spec.feature_names(),
            rows: self.samples.iter().map(|s| s.features.clone()).collect(),
            labels: self.labels(),
            provenance: self
                .samples
                .iter()
                .map(|s| (s.case_id.clone(), s.prefix_length))
                .collect(),
        }
    }

    pub fn from_columnar(c: ColumnarDataset) -> Result<Self, ColumnarError> {
        let dim = c.spec.dimension();
        if c.feature_names.len() != dim {
            return Err(ColumnarError("feature_names length differs from dimension"));
        }
        if c.rows.len() != c.labels.len() || c.rows.len() != c.provenance.len() {
            return Err(ColumnarError("rows, labels and provenance differ in length"));
        }
        if c.class_names != c.spec.class_names() {
            return Err(ColumnarError("class_names do not match the encoding"));
        }
        let classes = c.class_names.len();
        let samples = c
            .rows
            .into_iter()
            .zip(c.labels)
            .zip(c.provenance)
            .map(|((features, label), (case_id, prefix_length))| {
                if features.len() != dim {
                    return Err(ColumnarError("row width differs from dimension"));
                }
                if label >= classes {
                    return Err(ColumnarError("label out of range"));
                }
                Ok(PrefixSample {
                    features,
                    label,
                    case_id,
                    prefix_length,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(PrefixDataset {
            spec: c.spec,
            samples,
            class_names: c.class_names,
        })
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid columnar dataset: {0}")]
pub struct ColumnarError(&'static str);

/// Columnar JSON form of a [`PrefixDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnarDataset {
    pub spec: EncodingSpec,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub provenance: Vec<(String, usize)>,
}

pub fn build_dataset(log: &EventLog, spec: &EncodingSpec) -> Result<PrefixDataset, EncodingError> {
    let prefixes = extract_prefixes(log)?;
    let mut samples = Vec::with_capacity(prefixes.len());
    for p in prefixes {
        let features = encode_prefix(spec, p.trace, p.prefix_length)?;
        let label = match p.next {
            NextActivity::Activity(a) => spec
                .class_of(a)
                .ok_or_else(|| EncodingError::UnknownActivity(a.to_string()))?,
            NextActivity::End => spec.end_class(),
        };
        samples.push(PrefixSample {
            features,
            label,
            case_id: p.trace.case_id.clone(),
            prefix_length: p.prefix_length,
        });
    }
    Ok(PrefixDataset {
        spec: spec.clone(),
        samples,
        class_names: spec.class_names(),
    })
}
