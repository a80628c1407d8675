//! In-memory sessions and jobs.
//!
//! Each session admits one job at a time. A job works on copies of the
//! committed state and publishes its result in a single step under the
//! session lock, so readers never observe a half-applied iteration.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex, MutexGuard};

use fairloop_core::event_log::{EventLog, ParseReport};
use fairloop_core::fairness_loop::{LoopState, Progress};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::task::JoinHandle;

use crate::config::ServiceConfig;
use crate::error::{ApiError, ErrorBody};
use crate::jobs::{JobHandle, JobKind};

pub(crate) fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Training,
    FineTuning,
    Failed { reason: String },
}

/// A committed loop state and the log it was trained on.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub state: Arc<LoopState>,
    pub log: Option<Arc<EventLog>>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub log: Option<Arc<EventLog>>,
    pub log_report: Option<ParseReport>,
    pub current: Option<Snapshot>,
    /// Every committed state in commit order; never modified.
    pub snapshots: Vec<Snapshot>,
    pub status: SessionStatus,
    pub active_job: Option<String>,
}

impl Session {
    pub fn new(id: String) -> Self {
        Session {
            id,
            log: None,
            log_report: None,
            current: None,
            snapshots: Vec::new(),
            status: SessionStatus::Idle,
            active_job: None,
        }
    }

    pub fn state(&self) -> Result<Arc<LoopState>, ApiError> {
        self.current
            .as_ref()
            .map(|s| s.state.clone())
            .ok_or_else(|| ApiError::conflict("not_trained", format!("session {} has no trained model", self.id)))
    }

    pub fn ensure_idle(&self) -> Result<(), ApiError> {
        match &self.active_job {
            Some(job) => Err(ApiError::conflict(
                "job_in_flight",
                format!("session {} is busy with job {job}", self.id),
            )),
            None => Ok(()),
        }
    }

    pub fn commit(&mut self, snapshot: Snapshot) {
        self.snapshots.push(snapshot.clone());
        self.current = Some(snapshot);
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            status: self.status.clone(),
            log: self.log_report.clone(),
            iteration: self.current.as_ref().map(|s| s.state.iteration),
            snapshots: self
                .snapshots
                .iter()
                .enumerate()
                .map(|(index, s)| SnapshotView {
                    index,
                    iteration: s.state.iteration,
                })
                .collect(),
            active_job: self.active_job.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotView {
    pub index: usize,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub log: Option<ParseReport>,
    pub iteration: Option<usize>,
    pub snapshots: Vec<SnapshotView>,
    pub active_job: Option<String>,
}

pub struct Service {
    pub config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    jobs: Mutex<HashMap<String, JobHandle>>,
}

impl Service {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Service {
            config,
            sessions: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
        })
    }

    pub fn create_session(&self) -> String {
        self.insert_session(Session::new)
    }

    pub fn insert_session(&self, make: impl FnOnce(String) -> Session) -> String {
        let id = uuid::Uuid::new_v4().to_string();
        let session = make(id.clone());
        lock(&self.sessions).insert(id.clone(), Arc::new(Mutex::new(session)));
        id
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    pub fn job(&self, id: &str) -> Result<JobHandle, ApiError> {
        lock(&self.jobs)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("job", id))
    }

    fn with_job(&self, id: &str, f: impl FnOnce(&mut JobHandle)) {
        if let Some(job) = lock(&self.jobs).get_mut(id) {
            f(job);
        }
    }

    /// Registers a job on `session`, which must be idle.
    pub fn start_job(
        &self,
        session: &mut Session,
        kind: JobKind,
        status: SessionStatus,
    ) -> Result<JobHandle, ApiError> {
        session.ensure_idle()?;
        let job = JobHandle::new(uuid::Uuid::new_v4().to_string(), session.id.clone(), kind);
        lock(&self.jobs).insert(job.job_id.clone(), job.clone());
        session.active_job = Some(job.job_id.clone());
        session.status = status;
        tracing::info!(session = %session.id, job = %job.job_id, ?kind, "job started");
        Ok(job)
    }

    /// Runs `work` on the blocking pool, then applies its output to the
    /// session and finishes the job in one step. A failed job leaves the
    /// session state untouched.
    pub fn run_job<T, W, A>(
        self: &Arc<Self>,
        session: Arc<Mutex<Session>>,
        job_id: String,
        work: W,
        apply: A,
    ) -> JoinHandle<()>
    where
        T: Send + 'static,
        W: FnOnce(&mut dyn FnMut(Progress)) -> Result<T, ErrorBody> + Send + 'static,
        A: FnOnce(&mut Session, T) -> Value + Send + 'static,
    {
        let service = self.clone();
        tokio::task::spawn_blocking(move || {
            let mut progress = |p: Progress| service.with_job(&job_id, |j| j.record(p));
            let outcome = catch_unwind(AssertUnwindSafe(|| work(&mut progress)))
                .unwrap_or_else(|_| Err(ErrorBody::new("internal", "job panicked")));
            let mut s = lock(&session);
            let outcome = match outcome {
                Ok(value) => {
                    s.status = SessionStatus::Idle;
                    Ok(apply(&mut s, value))
                }
                Err(body) => {
                    s.status = SessionStatus::Failed {
                        reason: body.message.clone(),
                    };
                    Err(body)
                }
            };
            s.active_job = None;
            match &outcome {
                Ok(_) => tracing::info!(session = %s.id, job = %job_id, "job succeeded"),
                Err(e) => tracing::warn!(session = %s.id, job = %job_id, error = %e.error, "job failed"),
            }
            service.with_job(&job_id, |j| {
                j.finish(outcome);
            });
        })
    }
}
