//! Job records, their on-disk layout, and the per-job event log.
//!
//! ```text
//! jobs/{id}/input/           uploaded media or extracted bundle
//! jobs/{id}/events.ndjson    append-only event log
//! jobs/{id}/result.json      VideoResult, once done
//! jobs/{id}/status.json      {"id", "state", "created_at"}
//! jobs/{id}/utterances/{k}/  face crops and audio slice per utterance
//! ```

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use mer_core::orchestrator::{write_clip_artifacts, Event, EventSink};
use mer_core::extract::UtteranceClip;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

pub const EVENTS_FILE: &str = "events.ndjson";
pub const RESULT_FILE: &str = "result.json";
pub const STATUS_FILE: &str = "status.json";
pub const INPUT_DIR: &str = "input";
pub const UTTERANCES_DIR: &str = "utterances";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Processing,
    Done,
    Failed,
    Cleared,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cleared)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    pub created_at: u64,
}

pub struct JobInner {
    pub state: JobState,
    pub created_at: u64,
    /// Every event line emitted so far, in order.
    pub log: Vec<u8>,
    /// True once a `final` or `failed` event is in the log, or the job was cleared.
    pub closed: bool,
    pub result: Option<serde_json::Value>,
}

pub struct Job {
    pub id: String,
    pub dir: PathBuf,
    pub cancel: AtomicBool,
    inner: Mutex<JobInner>,
    /// Bumped after every log append or close.
    notify: watch::Sender<u64>,
}

fn now_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Job {
    fn with_inner(id: String, dir: PathBuf, inner: JobInner) -> Arc<Self> {
        Arc::new(Job { id, dir, cancel: AtomicBool::new(false), inner: Mutex::new(inner), notify: watch::channel(0).0 })
    }

    /// Creates the directory tree and a `queued` status file.
    pub fn create(jobs_dir: &Path) -> io::Result<Arc<Self>> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = jobs_dir.join(&id);
        fs::create_dir_all(dir.join(INPUT_DIR))?;
        fs::write(dir.join(EVENTS_FILE), b"")?;
        let job = Job::with_inner(
            id,
            dir,
            JobInner { state: JobState::Queued, created_at: now_s(), log: Vec::new(), closed: false, result: None },
        );
        job.write_status(&job.lock())?;
        Ok(job)
    }

    /// Loads a job left on disk by an earlier process. Jobs that were still
    /// queued or processing are marked failed.
    pub fn recover(dir: &Path) -> io::Result<Arc<Self>> {
        let status: JobStatus = serde_json::from_slice(&fs::read(dir.join(STATUS_FILE))?).map_err(io::Error::other)?;
        let log = fs::read(dir.join(EVENTS_FILE)).unwrap_or_default();
        let result = fs::read(dir.join(RESULT_FILE)).ok().and_then(|b| serde_json::from_slice(&b).ok());
        let interrupted = !status.state.is_terminal();
        let job = Job::with_inner(
            status.id,
            dir.to_path_buf(),
            JobInner {
                state: if interrupted { JobState::Failed } else { status.state },
                created_at: status.created_at,
                log,
                closed: true,
                result,
            },
        );
        if interrupted {
            let mut inner = job.lock();
            let line = Event::Failed { error: "service restarted while the job was in flight".into() }.to_line();
            job.append_locked(&mut inner, &line)?;
            job.write_status(&inner)?;
        }
        Ok(job)
    }

    pub fn lock(&self) -> MutexGuard<'_, JobInner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.notify.subscribe()
    }

    fn bump(&self) {
        self.notify.send_modify(|v| *v += 1);
    }

    pub fn write_status(&self, inner: &JobInner) -> io::Result<()> {
        let status = JobStatus { id: self.id.clone(), state: inner.state, created_at: inner.created_at };
        let tmp = self.dir.join("status.json.tmp");
        fs::write(&tmp, serde_json::to_vec(&status).map_err(io::Error::other)?)?;
        fs::rename(tmp, self.dir.join(STATUS_FILE))
    }

    fn append_locked(&self, inner: &mut JobInner, line: &str) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join(EVENTS_FILE))?;
        f.write_all(line.as_bytes())?;
        inner.log.extend_from_slice(line.as_bytes());
        Ok(())
    }

    /// Appends one event unless the job was cleared. Terminal events close the log.
    pub fn append(&self, event: &Event) -> io::Result<()> {
        let mut inner = self.lock();
        if inner.state == JobState::Cleared {
            return Err(io::Error::other("job cleared"));
        }
        self.append_locked(&mut inner, &event.to_line())?;
        if event.is_terminal() {
            inner.closed = true;
        }
        drop(inner);
        self.bump();
        Ok(())
    }

    pub fn set_state(&self, state: JobState) -> io::Result<()> {
        let mut inner = self.lock();
        if inner.state == JobState::Cleared {
            return Ok(());
        }
        inner.state = state;
        self.write_status(&inner)
    }

    /// Stores the result, moves to `done`, and appends the `final` event, all
    /// under one lock so a client that sees `final` also sees the result.
    pub fn finish(&self, result: serde_json::Value, final_event: &Event) -> io::Result<()> {
        let mut inner = self.lock();
        if inner.state == JobState::Cleared {
            return Ok(());
        }
        fs::write(self.dir.join(RESULT_FILE), serde_json::to_vec_pretty(&result).map_err(io::Error::other)?)?;
        inner.result = Some(result);
        inner.state = JobState::Done;
        self.write_status(&inner)?;
        self.append_locked(&mut inner, &final_event.to_line())?;
        inner.closed = true;
        drop(inner);
        self.bump();
        Ok(())
    }

    /// Marks the job cleared and deletes its directory. Returns false when it
    /// was already cleared.
    pub fn clear(&self) -> io::Result<bool> {
        let mut inner = self.lock();
        if inner.state == JobState::Cleared {
            return Ok(false);
        }
        self.cancel.store(true, std::sync::atomic::Ordering::SeqCst);
        inner.state = JobState::Cleared;
        inner.closed = true;
        inner.result = None;
        match fs::remove_dir_all(&self.dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        drop(inner);
        self.bump();
        Ok(true)
    }

    pub fn utterance_dir(&self, index: usize) -> PathBuf {
        self.dir.join(UTTERANCES_DIR).join(index.to_string())
    }
}

/// Orchestrator sink that records events and clip artifacts on a job. The
/// `final` event is held back for [`Job::finish`].
pub struct JobSink {
    pub job: Arc<Job>,
    pub held_final: Option<Event>,
}

impl EventSink for JobSink {
    fn event(&mut self, event: &Event) -> io::Result<()> {
        if matches!(event, Event::Final { .. }) {
            self.held_final = Some(event.clone());
            return Ok(());
        }
        self.job.append(event)
    }

    fn clip(&mut self, index: usize, clip: &UtteranceClip) -> io::Result<()> {
        let inner = self.job.lock();
        if inner.state == JobState::Cleared {
            return Err(io::Error::other("job cleared"));
        }
        write_clip_artifacts(&self.job.utterance_dir(index), clip)
    }
}

/// In-memory index of jobs, including cleared tombstones.
#[derive(Default)]
pub struct JobTable {
    jobs: Mutex<HashMap<String, Arc<Job>>>,
}

impl JobTable {
    pub fn insert(&self, job: Arc<Job>) {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner()).insert(job.id.clone(), job);
    }

    pub fn get(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    /// Loads every job directory under `jobs_dir`.
    pub fn recover(&self, jobs_dir: &Path) -> io::Result<usize> {
        let mut n = 0;
        for entry in fs::read_dir(jobs_dir)? {
            let path = entry?.path();
            if !path.join(STATUS_FILE).is_file() {
                continue;
            }
            match Job::recover(&path) {
                Ok(job) => {
                    self.insert(job);
                    n += 1;
                }
                Err(e) => tracing::warn!("skipping job directory {}: {e}", path.display()),
            }
        }
        Ok(n)
    }
}
