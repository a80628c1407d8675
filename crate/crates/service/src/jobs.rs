//! Background jobs and their pollable handles.

use fairloop_core::fairness_loop::Progress;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ErrorBody;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    Iterate,
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        self != JobStatus::Running
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    /// Completed share of the training epochs, 1.0 once the job succeeds.
    pub fraction: f64,
    pub stage: Option<String>,
    pub epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobHandle {
    pub job_id: String,
    pub session_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: JobProgress,
    pub result: Option<Value>,
    pub error: Option<ErrorBody>,
}

impl JobHandle {
    pub fn new(job_id: String, session_id: String, kind: JobKind) -> Self {
        JobHandle {
            job_id,
            session_id,
            kind,
            status: JobStatus::Running,
            progress: JobProgress::default(),
            result: None,
            error: None,
        }
    }

    /// Progress updates after a terminal state are ignored.
    pub fn record(&mut self, event: Progress) {
        if self.status.is_terminal() {
            return;
        }
        match event {
            Progress::Stage(stage) => self.progress.stage = Some(stage.to_string()),
            Progress::Epoch { epoch, epochs, loss } => {
                self.progress.epoch = Some(epoch + 1);
                self.progress.epochs = Some(epochs);
                self.progress.loss = Some(loss);
                self.progress.fraction = (epoch + 1) as f64 / epochs.max(1) as f64;
            }
        }
    }

    /// Returns false when the job had already finished.
    pub fn finish(&mut self, outcome: Result<Value, ErrorBody>) -> bool {
        if self.status.is_terminal() {
            return false;
        }
        match outcome {
            Ok(result) => {
                self.status = JobStatus::Succeeded;
                self.progress.fraction = 1.0;
                self.result = Some(result);
            }
            Err(error) => {
                self.status = JobStatus::Failed;
                self.error = Some(error);
            }
        }
        true
    }
}
