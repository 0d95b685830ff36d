//! Asynchronous job queue: tickets, FIFO draining by a bounded worker pool,
//! journaled state, result expiry, and notification records.

pub mod journal;
pub mod token;

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{format_ms, SharedClock};
use crate::registry::ModelManifest;
use crate::wire::{ModelInput, ModelOutput, ModelValue, ValueMap};
use journal::{Event, Journal};

pub use token::{generate_token, is_valid_token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    #[serde(rename = "[QUEUED]")]
    Queued,
    #[serde(rename = "[RUNNING]")]
    Running,
    #[serde(rename = "[COMPLETED]")]
    Completed,
    #[serde(rename = "[FAILED]")]
    Failed,
    #[serde(rename = "[EXPIRED]")]
    Expired,
}

impl JobState {
    pub fn literal(self) -> &'static str {
        match self {
            JobState::Queued => "[QUEUED]",
            JobState::Running => "[RUNNING]",
            JobState::Completed => "[COMPLETED]",
            JobState::Failed => "[FAILED]",
            JobState::Expired => "[EXPIRED]",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed)
    }

    /// Position along QUEUED → RUNNING → {COMPLETED|FAILED} → EXPIRED.
    pub fn rank(self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running => 1,
            JobState::Completed | JobState::Failed => 2,
            JobState::Expired => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobTicket {
    pub token: String,
    pub model: String,
    /// Unix milliseconds.
    pub submitted_at: u64,
    pub email_address: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobRecord {
    pub ticket: JobTicket,
    pub state: JobState,
    pub input: ModelInput,
    pub seed: u64,
    /// Present iff `state` is `[COMPLETED]`.
    pub result: Option<ModelOutput>,
    pub error: Option<String>,
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
    /// Quota account charged when the job runs.
    pub account: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobStatusView {
    pub status: JobState,
    /// Present iff `status` is `[COMPLETED]`.
    pub status_data: Option<ModelOutput>,
    pub error: Option<String>,
}

impl JobStatusView {
    /// Response entries: `status`, then `status_data` or `job_error`.
    pub fn to_entries(&self) -> ValueMap {
        let mut m = ValueMap::new();
        m.insert("status".into(), self.status.literal().into());
        if let Some(data) = &self.status_data {
            m.insert("status_data".into(), ModelValue::Map(data.0.clone()));
        }
        if let Some(err) = &self.error {
            m.insert("job_error".into(), err.as_str().into());
        }
        m
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JobError {
    #[error("model `{0}` has no asynchronous implementation")]
    AsyncUnsupported(String),
    #[error("job queue is full ({0} jobs waiting)")]
    QueueFull(usize),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("job journal: {0}")]
    Journal(String),
}

/// Runs one job to completion. Implementations resolve the model, invoke
/// the worker, and account for its usage.
pub trait JobExecutor: Send + Sync + 'static {
    fn execute(&self, job: &JobRecord) -> Result<ModelOutput, String>;
}

#[derive(Debug, Clone)]
pub struct JobConfig {
    pub journal_path: PathBuf,
    pub outbox_path: PathBuf,
    pub queue_cap: usize,
    pub retention_ms: u64,
    /// Compact the journal once this many events were appended.
    pub compact_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Notification {
    pub email: String,
    pub token: String,
    pub status: String,
    pub timestamp: String,
}

/// Notification records awaiting delivery by an external mailer.
pub struct Outbox {
    path: PathBuf,
    file: Mutex<Option<File>>,
}

impl Outbox {
    pub fn open(path: &Path) -> Self {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| tracing::warn!(path = %path.display(), error = %e, "outbox unavailable"))
            .ok();
        Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends a record for a terminal job that carries an email address.
    /// Failures are logged and otherwise ignored.
    pub fn notify(&self, job: &JobRecord, now_ms: u64) -> Option<Notification> {
        let email = job.ticket.email_address.clone()?;
        if !job.state.is_terminal() {
            return None;
        }
        let n = Notification {
            email,
            token: job.ticket.token.clone(),
            status: job.state.literal().into(),
            timestamp: format_ms(now_ms),
        };
        let mut line = serde_json::to_vec(&n).expect("notification serializes");
        line.push(b'\n');
        let mut file = self.file.lock().unwrap();
        let ok = file
            .as_mut()
            .map(|f| f.write_all(&line).and_then(|_| f.flush()).is_ok())
            .unwrap_or(false);
        if !ok {
            tracing::warn!(token = %n.token, "OutboxUnavailable: notification not recorded");
        }
        Some(n)
    }
}

struct State {
    jobs: HashMap<String, JobRecord>,
    queue: VecDeque<String>,
    running: usize,
    shutdown: bool,
    token_rng: StdRng,
}

pub struct JobManager {
    state: Mutex<State>,
    work: Condvar,
    journal: Mutex<Journal>,
    outbox: Outbox,
    executor: Arc<dyn JobExecutor>,
    clock: SharedClock,
    config: JobConfig,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl JobManager {
    /// Opens the journal and recovers: queued jobs keep their place and jobs
    /// that were running when the process stopped are queued again.
    pub fn open(
        config: JobConfig,
        executor: Arc<dyn JobExecutor>,
        clock: SharedClock,
        token_rng: StdRng,
    ) -> Result<Arc<Self>, JobError> {
        let (journal, replay) =
            Journal::open(&config.journal_path).map_err(|e| JobError::Journal(e.to_string()))?;
        let mut jobs = HashMap::new();
        let mut queue = VecDeque::new();
        let mut pending: Vec<&JobRecord> = replay
            .jobs
            .iter()
            .filter(|j| matches!(j.state, JobState::Queued | JobState::Running))
            .collect();
        pending.sort_by_key(|j| j.ticket.submitted_at);
        for j in pending {
            queue.push_back(j.ticket.token.clone());
        }
        if !queue.is_empty() {
            tracing::info!(recovered = queue.len(), "re-queued unfinished jobs");
        }
        for j in replay.jobs {
            jobs.insert(j.ticket.token.clone(), j);
        }
        Ok(Arc::new(Self {
            state: Mutex::new(State {
                jobs,
                queue,
                running: 0,
                shutdown: false,
                token_rng,
            }),
            work: Condvar::new(),
            journal: Mutex::new(journal),
            outbox: Outbox::open(&config.outbox_path),
            executor,
            clock,
            config,
            workers: Mutex::new(Vec::new()),
        }))
    }

    pub fn outbox(&self) -> &Outbox {
        &self.outbox
    }

    fn append(&self, event: &Event) -> Result<(), JobError> {
        self.journal
            .lock()
            .unwrap()
            .append(event)
            .map_err(|e| JobError::Journal(e.to_string()))
    }

    /// Queues a run. The job is journaled as `[QUEUED]` before the ticket is
    /// returned.
    pub fn submit(
        &self,
        model: &ModelManifest,
        input: ModelInput,
        email: Option<String>,
        seed: u64,
        account: &str,
    ) -> Result<JobTicket, JobError> {
        if !model.supports_async {
            return Err(JobError::AsyncUnsupported(model.name.clone()));
        }
        let mut st = self.state.lock().unwrap();
        if st.queue.len() >= self.config.queue_cap {
            return Err(JobError::QueueFull(st.queue.len()));
        }
        let State {
            jobs, token_rng, ..
        } = &mut *st;
        let token = token::generate_unique_token(token_rng, |t| jobs.contains_key(t));
        let job = JobRecord {
            ticket: JobTicket {
                token: token.clone(),
                model: model.name.clone(),
                submitted_at: self.clock.now_ms(),
                email_address: email,
            },
            state: JobState::Queued,
            input,
            seed,
            result: None,
            error: None,
            started_at: None,
            finished_at: None,
            account: account.into(),
        };
        self.append(&Event::submit(&job))?;
        let ticket = job.ticket.clone();
        st.jobs.insert(token.clone(), job);
        st.queue.push_back(token);
        drop(st);
        self.work.notify_one();
        Ok(ticket)
    }

    /// Current state of a job of `model`. Expired jobs are reported as
    /// unknown, as are tokens issued for other models.
    pub fn poll(&self, model: &str, token: &str) -> Result<JobStatusView, JobError> {
        let st = self.state.lock().unwrap();
        match st.jobs.get(token) {
            Some(j) if j.ticket.model == model && j.state != JobState::Expired => {
                Ok(JobStatusView {
                    status: j.state,
                    status_data: j.result.clone(),
                    error: j.error.clone(),
                })
            }
            _ => Err(JobError::UnknownToken(token.into())),
        }
    }

    pub fn queued_len(&self) -> usize {
        self.state.lock().unwrap().queue.len()
    }

    pub fn get(&self, token: &str) -> Option<JobRecord> {
        self.state.lock().unwrap().jobs.get(token).cloned()
    }

    /// Runs the oldest queued job, if any. Returns whether a job ran.
    pub fn run_next(&self) -> bool {
        let job = {
            let mut st = self.state.lock().unwrap();
            let Some(token) = st.queue.pop_front() else {
                return false;
            };
            let now = self.clock.now_ms();
            let job = st.jobs.get_mut(&token).expect("queued jobs are tracked");
            job.state = JobState::Running;
            job.started_at = Some(now);
            let snapshot = job.clone();
            if let Err(e) = self.append(&Event::Start { token, at: now }) {
                tracing::error!(error = %e, "cannot journal job start");
            }
            st.running += 1;
            snapshot
        };

        let outcome = self.executor.execute(&job);

        let finished = {
            let mut st = self.state.lock().unwrap();
            let now = self.clock.now_ms();
            let rec = st
                .jobs
                .get_mut(&job.ticket.token)
                .expect("running jobs are tracked");
            match outcome {
                Ok(result) => {
                    rec.state = JobState::Completed;
                    rec.result = Some(result);
                }
                Err(e) => {
                    rec.state = JobState::Failed;
                    rec.error = Some(e);
                }
            }
            rec.finished_at = Some(now);
            let snapshot = rec.clone();
            if let Err(e) = self.append(&Event::finish(&snapshot)) {
                tracing::error!(error = %e, "cannot journal job outcome");
            }
            st.running -= 1;
            snapshot
        };
        self.outbox.notify(&finished, self.clock.now_ms());
        self.work.notify_all();
        true
    }

    /// Marks terminal jobs finished more than the retention period ago as
    /// `[EXPIRED]` and drops their results. Returns how many were expired.
    pub fn expire_jobs(&self, now_ms: u64) -> usize {
        let mut st = self.state.lock().unwrap();
        let retention = self.config.retention_ms;
        let expired: Vec<String> = st
            .jobs
            .values()
            .filter(|j| {
                j.state.is_terminal()
                    && j.finished_at
                        .is_some_and(|f| now_ms.saturating_sub(f) > retention)
            })
            .map(|j| j.ticket.token.clone())
            .collect();
        for token in &expired {
            if let Some(j) = st.jobs.get_mut(token) {
                j.state = JobState::Expired;
                j.result = None;
            }
            if let Err(e) = self.append(&Event::Expire {
                token: token.clone(),
                at: now_ms,
            }) {
                tracing::error!(error = %e, "cannot journal expiry");
            }
        }
        let mut journal = self.journal.lock().unwrap();
        if !expired.is_empty() || journal.appended_since_compaction() >= self.config.compact_every {
            st.jobs.retain(|_, j| j.state != JobState::Expired);
            let mut live: Vec<&JobRecord> = st.jobs.values().collect();
            live.sort_by_key(|j| j.ticket.submitted_at);
            if let Err(e) = journal.compact(live.into_iter()) {
                tracing::error!(error = %e, "journal compaction failed");
            }
        }
        expired.len()
    }

    /// Starts `n` drain threads.
    pub fn start_workers(self: &Arc<Self>, n: usize) {
        let mut workers = self.workers.lock().unwrap();
        for i in 0..n.max(1) {
            let me = self.clone();
            let handle = std::thread::Builder::new()
                .name(format!("prism-job-{i}"))
                .spawn(move || me.worker_loop())
                .expect("spawn job worker");
            workers.push(handle);
        }
    }

    fn worker_loop(&self) {
        loop {
            {
                let mut st = self.state.lock().unwrap();
                while st.queue.is_empty() && !st.shutdown {
                    st = self.work.wait(st).unwrap();
                }
                if st.shutdown {
                    return;
                }
            }
            self.run_next();
        }
    }

    /// Stops the drain threads after their current job. Queued jobs stay in
    /// the journal for the next start.
    pub fn shutdown(&self) {
        self.state.lock().unwrap().shutdown = true;
        self.work.notify_all();
        let handles: Vec<_> = self.workers.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}
