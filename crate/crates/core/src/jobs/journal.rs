//! `jobs.jsonl`: append-only job journal with replay and compaction.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{JobRecord, JobState, JobTicket};
use crate::wire::{from_boxed_value, to_boxed_value, ModelInput, ModelOutput, ModelValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Event {
    Submit {
        token: String,
        model: String,
        submitted_at: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        email_address: Option<String>,
        account: String,
        input: Value,
        seed: u64,
    },
    Start {
        token: String,
        at: u64,
    },
    Finish {
        token: String,
        state: JobState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        result: Option<Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        finished_at: u64,
    },
    Expire {
        token: String,
        at: u64,
    },
}

fn map_value(v: &Value) -> crate::wire::ValueMap {
    match from_boxed_value(v) {
        ModelValue::Map(m) => m,
        _ => Default::default(),
    }
}

impl Event {
    pub fn submit(job: &JobRecord) -> Self {
        Event::Submit {
            token: job.ticket.token.clone(),
            model: job.ticket.model.clone(),
            submitted_at: job.ticket.submitted_at,
            email_address: job.ticket.email_address.clone(),
            account: job.account.clone(),
            input: to_boxed_value(&ModelValue::Map(job.input.0.clone())),
            seed: job.seed,
        }
    }

    pub fn finish(job: &JobRecord) -> Self {
        Event::Finish {
            token: job.ticket.token.clone(),
            state: job.state,
            result: job
                .result
                .as_ref()
                .map(|r| to_boxed_value(&ModelValue::Map(r.0.clone()))),
            error: job.error.clone(),
            finished_at: job.finished_at.unwrap_or(0),
        }
    }

    /// Applies the event to the replay state; `order` records submission
    /// order.
    fn apply(self, jobs: &mut HashMap<String, JobRecord>, order: &mut Vec<String>) {
        match self {
            Event::Submit {
                token,
                model,
                submitted_at,
                email_address,
                account,
                input,
                seed,
            } => {
                order.push(token.clone());
                jobs.insert(
                    token.clone(),
                    JobRecord {
                        ticket: JobTicket {
                            token,
                            model,
                            submitted_at,
                            email_address,
                        },
                        state: JobState::Queued,
                        input: ModelInput(map_value(&input)),
                        seed,
                        result: None,
                        error: None,
                        started_at: None,
                        finished_at: None,
                        account,
                    },
                );
            }
            Event::Start { token, at } => {
                if let Some(j) = jobs.get_mut(&token) {
                    j.state = JobState::Running;
                    j.started_at = Some(at);
                }
            }
            Event::Finish {
                token,
                state,
                result,
                error,
                finished_at,
            } => {
                if let Some(j) = jobs.get_mut(&token) {
                    j.state = state;
                    j.result = result.as_ref().map(|v| ModelOutput(map_value(v)));
                    j.error = error;
                    j.finished_at = Some(finished_at);
                }
            }
            Event::Expire { token, .. } => {
                if let Some(j) = jobs.get_mut(&token) {
                    j.state = JobState::Expired;
                    j.result = None;
                }
            }
        }
    }
}

pub struct Journal {
    path: PathBuf,
    file: File,
    appended_since_compaction: usize,
}

/// Replayed jobs in submission order.
pub struct Replay {
    pub jobs: Vec<JobRecord>,
    pub skipped_lines: usize,
}

impl Journal {
    pub fn open(path: &Path) -> std::io::Result<(Self, Replay)> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let replay = Self::replay(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                appended_since_compaction: 0,
            },
            replay,
        ))
    }

    fn replay(path: &Path) -> std::io::Result<Replay> {
        let mut jobs = HashMap::new();
        let mut order = Vec::new();
        let mut skipped_lines = 0;
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(Replay {
                    jobs: Vec::new(),
                    skipped_lines,
                })
            }
            Err(e) => return Err(e),
        };
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Event>(&line) {
                Ok(ev) => ev.apply(&mut jobs, &mut order),
                Err(e) => {
                    // A torn final write after a crash.
                    tracing::warn!(path = %path.display(), error = %e, "skipping journal line");
                    skipped_lines += 1;
                }
            }
        }
        let jobs = order.into_iter().filter_map(|t| jobs.remove(&t)).collect();
        Ok(Replay {
            jobs,
            skipped_lines,
        })
    }

    /// Appends and syncs one event.
    pub fn append(&mut self, event: &Event) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event).expect("journal events serialize");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.appended_since_compaction += 1;
        Ok(())
    }

    pub fn appended_since_compaction(&self) -> usize {
        self.appended_since_compaction
    }

    /// Rewrites the journal to hold only `live` jobs, atomically.
    pub fn compact<'a>(&mut self, live: impl Iterator<Item = &'a JobRecord>) -> std::io::Result<()> {
        let dir = self
            .path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        for job in live {
            let mut events = vec![Event::submit(job)];
            if let Some(at) = job.started_at {
                events.push(Event::Start {
                    token: job.ticket.token.clone(),
                    at,
                });
            }
            if job.state.is_terminal() {
                events.push(Event::finish(job));
            }
            for ev in events {
                serde_json::to_writer(&mut tmp, &ev).map_err(std::io::Error::other)?;
                tmp.write_all(b"\n")?;
            }
        }
        tmp.as_file().sync_all()?;
        tmp.persist(&self.path).map_err(|e| e.error)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        self.appended_since_compaction = 0;
        Ok(())
    }
}
