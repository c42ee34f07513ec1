//! Sessions in memory, backed by one append-only JSONL log per session.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use tokio::sync::Mutex;

use crate::api::{ApiError, SessionConfig, SessionStatus, SessionSummary, SessionView, SubmitRequest};
use crate::session::{Event, SessionCore};

const LOG_EXTENSION: &str = "jsonl";

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn encode(events: &[Event]) -> Vec<u8> {
    let mut buf = Vec::new();
    for e in events {
        serde_json::to_writer(&mut buf, e).expect("events serialize");
        buf.push(b'\n');
    }
    buf
}

pub fn read_log(path: &Path) -> std::io::Result<Vec<Event>> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        events.push(event);
    }
    Ok(events)
}

fn append(path: &Path, events: &[Event], create: bool) -> std::io::Result<()> {
    let mut file = if create {
        OpenOptions::new().write(true).create_new(true).open(path)?
    } else {
        OpenOptions::new().append(true).open(path)?
    };
    file.write_all(&encode(events))?;
    file.sync_data()
}

struct SessionHandle {
    core: Arc<Mutex<SessionCore>>,
    /// Last committed view, transcript included.
    view: RwLock<Arc<SessionView>>,
    log_path: PathBuf,
}

impl SessionHandle {
    fn new(core: SessionCore, log_path: PathBuf) -> Self {
        let view = full_view(&core, None);
        Self {
            core: Arc::new(Mutex::new(core)),
            view: RwLock::new(Arc::new(view)),
            log_path,
        }
    }

    fn snapshot(&self) -> Arc<SessionView> {
        Arc::clone(&self.view.read().expect("view lock"))
    }

    fn publish(&self, view: SessionView) {
        *self.view.write().expect("view lock") = Arc::new(view);
    }
}

fn full_view(core: &SessionCore, status: Option<SessionStatus>) -> SessionView {
    SessionView {
        transcript: Some(core.events().to_vec()),
        ..core.view(status)
    }
}

fn internal<E: std::fmt::Display>(e: E) -> ApiError {
    ApiError::internal(e.to_string())
}

/// A session log that could not be replayed at startup.
#[derive(Debug, Clone)]
pub struct ReplayFailure {
    pub path: PathBuf,
    pub reason: String,
}

pub struct Store {
    data_dir: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<SessionHandle>>>,
}

impl Store {
    /// Opens `data_dir`, creating it if needed, and replays every session log
    /// in it. Logs that fail to replay are reported and left untouched.
    pub fn open(data_dir: impl Into<PathBuf>) -> std::io::Result<(Self, Vec<ReplayFailure>)> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir)?;
        let mut paths: Vec<PathBuf> = fs::read_dir(&data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == LOG_EXTENSION))
            .collect();
        paths.sort();
        let mut sessions = BTreeMap::new();
        let mut failures = Vec::new();
        for path in paths {
            let replayed = read_log(&path)
                .map_err(|e| e.to_string())
                .and_then(|events| SessionCore::replay(&events));
            match replayed {
                Ok(core) => {
                    log::info!("replayed session {} from {}", core.id, path.display());
                    sessions.insert(core.id.clone(), Arc::new(SessionHandle::new(core, path)));
                }
                Err(reason) => {
                    log::error!("cannot replay {}: {reason}", path.display());
                    failures.push(ReplayFailure { path, reason });
                }
            }
        }
        let store = Self {
            data_dir,
            sessions: RwLock::new(sessions),
        };
        Ok((store, failures))
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn handle(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        let mut out: Vec<SessionSummary> = self
            .sessions
            .read()
            .expect("session map lock")
            .values()
            .map(|h| SessionSummary::from(&*h.snapshot()))
            .collect();
        out.sort_by(|a, b| a.created_at_ms.cmp(&b.created_at_ms).then_with(|| a.session_id.cmp(&b.session_id)));
        out
    }

    /// Snapshot with the event log as transcript.
    pub fn get(&self, id: &str) -> Result<Arc<SessionView>, ApiError> {
        Ok(self.handle(id)?.snapshot())
    }

    /// Raw bytes of the session's log file.
    pub fn log_bytes(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        fs::read(&self.handle(id)?.log_path).map_err(internal)
    }

    pub async fn create(&self, config: SessionConfig) -> Result<SessionView, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let path = self.data_dir.join(format!("{id}.{LOG_EXTENSION}"));
        let log_path = path.clone();
        let core = tokio::task::spawn_blocking(move || -> Result<SessionCore, ApiError> {
            let (core, events) = SessionCore::create(id, config, now_ms())?;
            append(&path, &events, true).map_err(internal)?;
            Ok(core)
        })
        .await
        .map_err(internal)??;
        let view = core.view(None);
        self.sessions
            .write()
            .expect("session map lock")
            .insert(core.id.clone(), Arc::new(SessionHandle::new(core, log_path)));
        Ok(view)
    }

    /// Runs one command under the session's lock. A session that is already
    /// running a command answers with a conflict instead of queueing.
    async fn command<F>(&self, id: &str, check: impl FnOnce(&SessionCore) -> Result<(), ApiError>, run: F) -> Result<SessionView, ApiError>
    where
        F: FnOnce(&mut SessionCore) -> Result<Vec<Event>, ApiError> + Send + 'static,
    {
        let handle = self.handle(id)?;
        let mut guard = Arc::clone(&handle.core)
            .try_lock_owned()
            .map_err(|_| ApiError::conflict("another command for this session is in progress"))?;
        check(&guard)?;
        handle.publish(full_view(&guard, Some(SessionStatus::Computing)));
        let log_path = handle.log_path.clone();
        let joined = tokio::task::spawn_blocking(move || {
            let mut next = guard.clone();
            let outcome = run(&mut next).and_then(|events| append(&log_path, &events, false).map_err(internal));
            if outcome.is_ok() {
                *guard = next;
            }
            (guard, outcome)
        })
        .await;
        let (guard, outcome) = match joined {
            Ok(v) => v,
            Err(e) => {
                handle.publish(full_view(&*handle.core.lock().await, None));
                return Err(internal(e));
            }
        };
        handle.publish(full_view(&guard, None));
        outcome.map(|_| guard.view(None))
    }

    pub async fn submit(&self, id: &str, request: SubmitRequest) -> Result<SessionView, ApiError> {
        let SubmitRequest { round, results } = request;
        let checked = results.clone();
        self.command(
            id,
            move |core| core.check_submit(round, &checked),
            move |core| core.submit(round, results, now_ms()),
        )
        .await
    }

    pub async fn abort(&self, id: &str) -> Result<SessionView, ApiError> {
        self.command(
            id,
            |core| {
                if core.state().stopped {
                    Err(ApiError::conflict("session has already stopped"))
                } else {
                    Ok(())
                }
            },
            |core| core.abort(now_ms()),
        )
        .await
    }
}
