//! Machine-readable errors shared by the HTTP API and the CLI.

use std::fmt::Display;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use fairloop_core::bundle::BundleError;
use fairloop_core::distillation::{DistillError, TreeFormatError};
use fairloop_core::encoding::EncodingError;
use fairloop_core::event_log::{LogError, XesError};
use fairloop_core::fairness_loop::LoopError;
use fairloop_core::metrics::MetricsError;
use fairloop_core::neural::ModelError;
use fairloop_core::simulator::SimError;
use fairloop_core::surgery::{EditError, SurgeryError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// `error` is a stable snake_case code, `message` the human-readable text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ErrorBody {
            error: code.into(),
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }
}

/// Engine errors with a stable code.
pub trait Classify: Display {
    fn code(&self) -> &'static str;

    fn details(&self) -> Value {
        Value::Null
    }

    fn body(&self) -> ErrorBody {
        ErrorBody::new(self.code(), self.to_string()).with_details(self.details())
    }
}

impl Classify for LogError {
    fn code(&self) -> &'static str {
        match self {
            LogError::EmptyActivity { .. } => "empty_activity",
            LogError::DuplicateCaseId(_) => "duplicate_case_id",
            LogError::UnorderedEvents { .. } => "unordered_events",
            LogError::MixedLevelAttribute(_) => "mixed_level_attribute",
        }
    }
}

impl Classify for XesError {
    fn code(&self) -> &'static str {
        match self {
            XesError::MalformedXml(_) => "malformed_xml",
            XesError::MissingConceptName { .. } => "missing_concept_name",
            XesError::InvalidValue { .. } => "invalid_value",
            XesError::Log(e) => e.code(),
        }
    }
}

impl Classify for EncodingError {
    fn code(&self) -> &'static str {
        match self {
            EncodingError::InvalidWindow => "invalid_window",
            EncodingError::UnknownAttribute(_) => "unknown_attribute",
            EncodingError::EventLevelAttributeUnsupported(_) => "event_level_attribute_unsupported",
            EncodingError::ReservedActivity(_) => "reserved_activity",
            EncodingError::EmptyLog => "empty_log",
            EncodingError::PrefixOutOfRange { .. } => "prefix_out_of_range",
            EncodingError::MissingCaseAttribute { .. } => "missing_case_attribute",
            EncodingError::UnknownActivity(_) => "unknown_activity",
        }
    }
}

impl Classify for ModelError {
    fn code(&self) -> &'static str {
        match self {
            ModelError::InvalidShape(_) => "invalid_shape",
            ModelError::DimensionMismatch { .. } => "dimension_mismatch",
            ModelError::EmptyDataset => "empty_dataset",
            ModelError::LabelDimensionMismatch { .. } => "label_dimension_mismatch",
            ModelError::InvalidConfig(_) => "invalid_config",
            ModelError::CorruptCheckpoint(_) => "corrupt_checkpoint",
        }
    }
}

impl Classify for DistillError {
    fn code(&self) -> &'static str {
        match self {
            DistillError::EmptyDataset => "empty_dataset",
            DistillError::DimensionMismatch { .. } => "dimension_mismatch",
            DistillError::Model(e) => e.code(),
        }
    }
}

impl Classify for TreeFormatError {
    fn code(&self) -> &'static str {
        match self {
            TreeFormatError::NoNodes => "no_nodes",
            TreeFormatError::MissingField(..) => "missing_field",
            TreeFormatError::DanglingReference(_) => "dangling_reference",
            TreeFormatError::NotPreorder(_) => "not_preorder",
            TreeFormatError::CountMismatch(_) => "count_mismatch",
            TreeFormatError::Invariant(_) => "tree_invariant",
            TreeFormatError::Json(_) => "invalid_json",
        }
    }
}

impl Classify for SurgeryError {
    fn code(&self) -> &'static str {
        match self {
            SurgeryError::UnknownNode(_) => "unknown_node",
            SurgeryError::NotInternal(_) => "not_internal",
            SurgeryError::UnknownAttribute(_) => "unknown_attribute",
            SurgeryError::NoExcludedAttributes => "no_excluded_attributes",
            SurgeryError::DimensionMismatch { .. } => "dimension_mismatch",
        }
    }

    fn details(&self) -> Value {
        match self {
            SurgeryError::UnknownNode(id) | SurgeryError::NotInternal(id) => json!({ "node_id": id }),
            SurgeryError::UnknownAttribute(a) => json!({ "attribute": a }),
            _ => Value::Null,
        }
    }
}

impl Classify for EditError {
    fn code(&self) -> &'static str {
        self.source.code()
    }

    fn details(&self) -> Value {
        let mut details = json!({ "edit_index": self.index });
        if let Value::Object(extra) = self.source.details() {
            details.as_object_mut().expect("object").extend(extra);
        }
        details
    }
}

impl Classify for MetricsError {
    fn code(&self) -> &'static str {
        match self {
            MetricsError::DimensionMismatch { .. } => "dimension_mismatch",
            MetricsError::UnknownAttribute(_) => "unknown_attribute",
            MetricsError::NotCategorical(_) => "not_categorical",
            MetricsError::UnknownGroup { .. } => "unknown_group",
            MetricsError::EmptyGroup { .. } => "empty_group",
            MetricsError::UnknownClass(_) => "unknown_class",
            MetricsError::EmptyDataset => "empty_dataset",
            MetricsError::Model(e) => e.code(),
        }
    }
}

impl Classify for LoopError {
    fn code(&self) -> &'static str {
        match self {
            LoopError::Encoding(e) => e.code(),
            LoopError::Model(e) => e.code(),
            LoopError::Distill(e) => e.code(),
            LoopError::Edit(e) => e.code(),
            LoopError::Metrics(e) => e.code(),
            LoopError::DimensionMismatch { .. } => "dimension_mismatch",
        }
    }

    fn details(&self) -> Value {
        match self {
            LoopError::Edit(e) => e.details(),
            _ => Value::Null,
        }
    }
}

impl Classify for SimError {
    fn code(&self) -> &'static str {
        match self {
            SimError::InvalidProbability(_) => "invalid_probability",
            SimError::InvalidModel(_) => "invalid_model",
            SimError::UnnormalizedTransitions { .. } => "unnormalized_transitions",
            SimError::NonTerminatingModel { .. } => "non_terminating_model",
            SimError::NoCases => "no_cases",
            SimError::TraceTooLong(_) => "trace_too_long",
            SimError::Log(e) => e.code(),
        }
    }
}

impl Classify for BundleError {
    fn code(&self) -> &'static str {
        match self {
            BundleError::CorruptBundle { .. } => "corrupt_bundle",
            BundleError::Io(_) => "io",
        }
    }

    fn details(&self) -> Value {
        match self.component() {
            Some(c) => json!({ "component": c }),
            None => Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody::new(code, message),
        }
    }

    pub fn not_found(what: &str, id: impl Display) -> Self {
        ApiError::new(
            StatusCode::NOT_FOUND,
            &format!("unknown_{what}"),
            format!("no {what} {id}"),
        )
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::CONFLICT, code, message)
    }

    pub fn invalid(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    /// An engine rejection of the request's content.
    pub fn engine(e: &impl Classify) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: e.body(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
