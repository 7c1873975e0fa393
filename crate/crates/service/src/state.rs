use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::Value;
use tokio::sync::{Mutex as AsyncMutex, Semaphore};

use actpaint_core::{ExecutionTrace, ModelBundle, VectorLibrary};

use crate::error::{ApiError, ApiResult};

/// Tunables of one server instance.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Idle time after which a session answers 410.
    pub session_timeout: Duration,
    pub max_concurrent_scans: usize,
    /// Library file loaded at start and rewritten after every change.
    pub library_path: Option<PathBuf>,
    /// Static painter build served under `/ui`.
    pub ui_dir: Option<PathBuf>,
    pub cors_origin: Option<String>,
    /// Seed of the base image behind library thumbnails.
    pub thumbnail_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_timeout: Duration::from_secs(30 * 60),
            max_concurrent_scans: 2,
            library_path: None,
            ui_dir: None,
            cors_origin: None,
            thumbnail_seed: 0,
        }
    }
}

/// Generator session: its seed and cached baseline.
pub struct Session {
    pub id: String,
    pub seed: u64,
    pub baseline_png: Vec<u8>,
    /// Baseline activations of every named layer.
    pub trace: ExecutionTrace,
    pub created: Instant,
}

struct SessionSlot {
    session: Arc<AsyncMutex<Session>>,
    last_used: Instant,
}

#[derive(Default)]
struct Sessions {
    live: HashMap<String, SessionSlot>,
    expired: HashSet<String>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum JobStatus {
    Queued,
    Running,
    Done { report: Value },
    Failed { error: Value },
}

pub(crate) struct Inner {
    pub generator: Arc<ModelBundle>,
    pub extractor: Option<Arc<ModelBundle>>,
    pub config: ServiceConfig,
    sessions: Mutex<Sessions>,
    pub library: Mutex<VectorLibrary>,
    pub thumbnails: Mutex<BTreeMap<String, String>>,
    jobs: Mutex<HashMap<String, JobStatus>>,
    pub scan_slots: Arc<Semaphore>,
    next_session: AtomicU64,
    next_job: AtomicU64,
}

/// Shared server state; cheap to clone.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

impl AppState {
    pub fn new(
        generator: ModelBundle,
        extractor: Option<ModelBundle>,
        config: ServiceConfig,
    ) -> actpaint_core::Result<Self> {
        let library = match &config.library_path {
            Some(p) if p.exists() => VectorLibrary::load(p)?,
            _ => VectorLibrary::default(),
        };
        Ok(Self(Arc::new(Inner {
            generator: Arc::new(generator),
            extractor: extractor.map(Arc::new),
            scan_slots: Arc::new(Semaphore::new(config.max_concurrent_scans.max(1))),
            config,
            sessions: Mutex::default(),
            library: Mutex::new(library),
            thumbnails: Mutex::default(),
            jobs: Mutex::default(),
            next_session: AtomicU64::new(1),
            next_job: AtomicU64::new(1),
        })))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    pub(crate) fn new_session_id(&self) -> String {
        format!("s{:06}", self.0.next_session.fetch_add(1, Ordering::Relaxed))
    }

    pub(crate) fn insert_session(&self, session: Session) {
        let mut sessions = self.0.sessions.lock().expect("session map poisoned");
        let timeout = self.0.config.session_timeout;
        let now = Instant::now();
        let stale: Vec<String> = sessions
            .live
            .iter()
            .filter(|(_, slot)| now.duration_since(slot.last_used) > timeout)
            .map(|(id, _)| id.clone())
            .collect();
        for id in stale {
            sessions.live.remove(&id);
            sessions.expired.insert(id);
        }
        sessions.live.insert(
            session.id.clone(),
            SessionSlot {
                session: Arc::new(AsyncMutex::new(session)),
                last_used: now,
            },
        );
    }

    /// Looks a session up and refreshes its idle clock; expired sessions
    /// answer 410 and unknown ones 404.
    pub(crate) fn session(&self, id: &str) -> ApiResult<Arc<AsyncMutex<Session>>> {
        let mut sessions = self.0.sessions.lock().expect("session map poisoned");
        let timeout = self.0.config.session_timeout;
        let now = Instant::now();
        let sessions = &mut *sessions;
        match sessions.live.get_mut(id) {
            Some(slot) if now.duration_since(slot.last_used) <= timeout => {
                slot.last_used = now;
                Ok(Arc::clone(&slot.session))
            }
            Some(_) => {
                sessions.live.remove(id);
                sessions.expired.insert(id.to_string());
                Err(ApiError::session_expired(id))
            }
            None if sessions.expired.contains(id) => Err(ApiError::session_expired(id)),
            None => Err(ApiError::not_found("session", id)),
        }
    }

    pub(crate) fn new_job(&self) -> String {
        let id = format!("job{:06}", self.0.next_job.fetch_add(1, Ordering::Relaxed));
        self.set_job(&id, JobStatus::Queued);
        id
    }

    pub(crate) fn set_job(&self, id: &str, status: JobStatus) {
        self.0.jobs.lock().expect("job map poisoned").insert(id.to_string(), status);
    }

    pub(crate) fn job(&self, id: &str) -> ApiResult<JobStatus> {
        self.0
            .jobs
            .lock()
            .expect("job map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("job", id))
    }

    /// Applies `f` to the library and persists it when a path is configured.
    pub(crate) fn update_library<R>(&self, f: impl FnOnce(&mut VectorLibrary) -> R) -> ApiResult<R> {
        let mut lib = self.0.library.lock().expect("library poisoned");
        let out = f(&mut lib);
        if let Some(path) = &self.0.config.library_path {
            lib.save(path)?;
        }
        Ok(out)
    }
}
