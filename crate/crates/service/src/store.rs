//! Durable sessions.
//!
//! Each session lives in its own directory holding an append-only
//! `log.jsonl` of records plus an occasional `snapshot.json`. Loading starts
//! from the snapshot and replays the records written after it. All mutations
//! of one session go through its mutex, which makes the session a single
//! writer and keeps event sequence numbers gap-free.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use arise_core::domain::AnalysisReport;
use arise_core::orchestrator::PanelConfig;
use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::model::{AnalysisEvent, Author, EventKind, Message, Session};

const LOG_FILE: &str = "log.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";
const SNAPSHOT_EVERY: u64 = 64;
const CHANNEL_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// 128 random bits from the operating system, hex encoded.
pub fn new_session_id() -> String {
    let mut bytes = [0u8; 16];
    rand::rngs::OsRng.fill_bytes(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Record {
    Created {
        session_id: String,
        created_at: DateTime<Utc>,
        config: PanelConfig,
    },
    Message(Message),
    Event(AnalysisEvent),
    Report {
        analysis_id: String,
        report: AnalysisReport,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    records: u64,
    session: Session,
    events: Vec<AnalysisEvent>,
}

struct Inner {
    session: Session,
    events: Vec<AnalysisEvent>,
    /// Analyses that have not yet produced a terminal event.
    open: BTreeSet<String>,
    records: u64,
    snapshot_records: u64,
    log: File,
}

impl Inner {
    fn apply(&mut self, record: Record) {
        match record {
            Record::Created { .. } => {}
            Record::Message(m) => {
                if let Some(a) = &m.analysis_id {
                    if m.author == Author::Teacher && !self.events.iter().any(|e| &e.analysis_id == a) {
                        self.open.insert(a.clone());
                    }
                }
                self.session.messages.push(m);
            }
            Record::Event(e) => {
                if e.kind.is_terminal() {
                    self.open.remove(&e.analysis_id);
                }
                self.events.push(e);
            }
            Record::Report { report, .. } => self.session.reports.push(report),
        }
        self.records += 1;
    }

    fn next_seq(&self) -> u64 {
        self.events.last().map_or(1, |e| e.seq + 1)
    }
}

pub struct SessionHandle {
    id: String,
    dir: PathBuf,
    inner: Mutex<Inner>,
    tx: broadcast::Sender<AnalysisEvent>,
}

impl std::fmt::Debug for SessionHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionHandle").field("id", &self.id).finish()
    }
}

impl SessionHandle {
    /// Creates and persists an empty session under `root`.
    pub fn create(root: &Path, config: PanelConfig) -> Result<Arc<Self>, StoreError> {
        let id = new_session_id();
        let dir = root.join(&id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let log_path = dir.join(LOG_FILE);
        let log = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        let created_at = Utc::now();
        let session = Session {
            session_id: id.clone(),
            created_at,
            messages: Vec::new(),
            reports: Vec::new(),
            config: config.clone(),
        };
        let handle = Self::from_inner(
            id.clone(),
            dir,
            Inner {
                session,
                events: Vec::new(),
                open: BTreeSet::new(),
                records: 0,
                snapshot_records: 0,
                log,
            },
        );
        handle.commit(
            &mut handle.lock(),
            Record::Created {
                session_id: id,
                created_at,
                config,
            },
        )?;
        Ok(handle)
    }

    /// Restores a session from its directory.
    pub fn load(dir: &Path) -> Result<Arc<Self>, StoreError> {
        let log_path = dir.join(LOG_FILE);
        let text = fs::read_to_string(&log_path).map_err(io_err(&log_path))?;
        let corrupt = |line: usize, message: String| StoreError::Corrupt {
            path: log_path.clone(),
            line,
            message,
        };
        let lines: Vec<(usize, &str)> = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
        let (session, events, start) = match read_snapshot(dir)? {
            Some(s) => (s.session, s.events, s.records),
            None => {
                let (n, first) = *lines.first().ok_or_else(|| corrupt(1, "empty log".into()))?;
                match serde_json::from_str(first).map_err(|e| corrupt(n + 1, e.to_string()))? {
                    Record::Created {
                        session_id,
                        created_at,
                        config,
                    } => (
                        Session {
                            session_id,
                            created_at,
                            messages: Vec::new(),
                            reports: Vec::new(),
                            config,
                        },
                        Vec::new(),
                        1,
                    ),
                    _ => return Err(corrupt(n + 1, "log does not start with a created record".into())),
                }
            }
        };
        let log = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        let mut inner = Inner {
            open: open_analyses(&session, &events),
            session,
            events,
            records: start,
            snapshot_records: start,
            log,
        };
        let last = lines.len().saturating_sub(1);
        for (i, &(n, line)) in lines.iter().enumerate().skip(start as usize) {
            match serde_json::from_str::<Record>(line) {
                Ok(record) => inner.apply(record),
                // A crash can cut the final line short; everything before it is intact.
                Err(e) if i == last && e.is_eof() => {
                    tracing::warn!(path = %log_path.display(), line = n + 1, "dropping truncated final record");
                    let offset = line.as_ptr() as usize - text.as_ptr() as usize;
                    inner.log.set_len(offset as u64).map_err(io_err(&log_path))?;
                }
                Err(e) => return Err(corrupt(n + 1, e.to_string())),
            }
        }
        let id = inner.session.session_id.clone();
        Ok(Self::from_inner(id, dir.to_path_buf(), inner))
    }

    fn from_inner(id: String, dir: PathBuf, inner: Inner) -> Arc<Self> {
        let (tx, _) = broadcast::channel(CHANNEL_CAPACITY);
        Arc::new(Self {
            id,
            dir,
            inner: Mutex::new(inner),
            tx,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Writes the record to the log, then applies it.
    fn commit(&self, inner: &mut Inner, record: Record) -> Result<(), StoreError> {
        let log_path = self.dir.join(LOG_FILE);
        let mut line = serde_json::to_vec(&record).expect("records serialize");
        line.push(b'\n');
        inner.log.write_all(&line).map_err(io_err(&log_path))?;
        inner.apply(record);
        if inner.records - inner.snapshot_records >= SNAPSHOT_EVERY {
            self.write_snapshot(inner)?;
        }
        Ok(())
    }

    fn write_snapshot(&self, inner: &mut Inner) -> Result<(), StoreError> {
        let snap = Snapshot {
            records: inner.records,
            session: inner.session.clone(),
            events: inner.events.clone(),
        };
        let tmp = self.dir.join("snapshot.json.tmp");
        let path = self.dir.join(SNAPSHOT_FILE);
        fs::write(&tmp, serde_json::to_vec(&snap).expect("snapshot serializes")).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        inner.snapshot_records = inner.records;
        Ok(())
    }

    /// Flushes the log and writes a fresh snapshot.
    pub fn flush(&self) -> Result<(), StoreError> {
        let mut inner = self.lock();
        let log_path = self.dir.join(LOG_FILE);
        inner.log.sync_all().map_err(io_err(&log_path))?;
        if inner.records != inner.snapshot_records {
            self.write_snapshot(&mut inner)?;
        }
        Ok(())
    }

    pub fn session(&self) -> Session {
        self.lock().session.clone()
    }

    pub fn config(&self) -> PanelConfig {
        self.lock().session.config.clone()
    }

    pub fn append_message(&self, message: Message) -> Result<(), StoreError> {
        let mut inner = self.lock();
        self.commit(&mut inner, Record::Message(message))
    }

    /// Appends several messages under one lock so they stay adjacent.
    pub fn append_messages(&self, messages: Vec<Message>) -> Result<(), StoreError> {
        let mut inner = self.lock();
        for m in messages {
            self.commit(&mut inner, Record::Message(m))?;
        }
        Ok(())
    }

    /// Records the teacher's incident message and opens the analysis.
    pub fn begin_analysis(&self, analysis_id: &str, text: &str) -> Result<(), StoreError> {
        self.append_message(Message {
            author: Author::Teacher,
            content: text.to_string(),
            timestamp: Utc::now(),
            analysis_id: Some(analysis_id.to_string()),
        })
    }

    pub fn is_open(&self, analysis_id: &str) -> bool {
        self.lock().open.contains(analysis_id)
    }

    pub fn open_analyses(&self) -> Vec<String> {
        self.lock().open.iter().cloned().collect()
    }

    /// Appends and broadcasts an event for an open analysis. Events for
    /// analyses that already ended are dropped and `None` is returned.
    pub fn emit(
        &self,
        analysis_id: &str,
        kind: EventKind,
        payload: serde_json::Value,
    ) -> Result<Option<AnalysisEvent>, StoreError> {
        let mut inner = self.lock();
        self.emit_locked(&mut inner, analysis_id, kind, payload)
    }

    fn emit_locked(
        &self,
        inner: &mut Inner,
        analysis_id: &str,
        kind: EventKind,
        payload: serde_json::Value,
    ) -> Result<Option<AnalysisEvent>, StoreError> {
        if !inner.open.contains(analysis_id) {
            return Ok(None);
        }
        let event = AnalysisEvent {
            session_id: self.id.clone(),
            analysis_id: analysis_id.to_string(),
            seq: inner.next_seq(),
            kind,
            payload,
        };
        self.commit(inner, Record::Event(event.clone()))?;
        // No receivers is fine: history is replayed on subscribe.
        let _ = self.tx.send(event.clone());
        Ok(Some(event))
    }

    /// Stores the report, adds a summary message and emits `report-ready`.
    pub fn complete(&self, analysis_id: &str, report: AnalysisReport) -> Result<bool, StoreError> {
        let mut inner = self.lock();
        if !inner.open.contains(analysis_id) {
            return Ok(false);
        }
        let summary = format!(
            "Analysis complete: {} (escalation risk {}).",
            report.final_label, report.escalation_risk
        );
        self.commit(
            &mut inner,
            Record::Report {
                analysis_id: analysis_id.to_string(),
                report: report.clone(),
            },
        )?;
        self.commit(
            &mut inner,
            Record::Message(Message {
                author: Author::System,
                content: summary,
                timestamp: Utc::now(),
                analysis_id: Some(analysis_id.to_string()),
            }),
        )?;
        let payload = serde_json::json!({ "report": report });
        self.emit_locked(&mut inner, analysis_id, EventKind::ReportReady, payload)?;
        self.write_snapshot(&mut inner)?;
        Ok(true)
    }

    /// Ends an analysis with an `error` event carrying problem details.
    pub fn fail(&self, analysis_id: &str, code: &str, message: &str) -> Result<bool, StoreError> {
        let payload = serde_json::json!({ "code": code, "message": message });
        Ok(self.emit(analysis_id, EventKind::Error, payload)?.is_some())
    }

    /// Events with `seq > after`, plus a receiver for later ones. Both are
    /// taken under the session lock, so nothing falls between them.
    pub fn subscribe(&self, after: u64) -> (Vec<AnalysisEvent>, broadcast::Receiver<AnalysisEvent>) {
        let inner = self.lock();
        let history = inner.events.iter().filter(|e| e.seq > after).cloned().collect();
        (history, self.tx.subscribe())
    }

    pub fn events(&self) -> Vec<AnalysisEvent> {
        self.lock().events.clone()
    }

    /// Latest report together with the incident text it answered.
    pub fn latest_report(&self) -> Option<(String, AnalysisReport)> {
        let inner = self.lock();
        let report = inner.session.reports.last()?.clone();
        let analysis = inner
            .events
            .iter()
            .rev()
            .find(|e| e.kind == EventKind::ReportReady)
            .map(|e| e.analysis_id.clone())?;
        let text = inner
            .session
            .messages
            .iter()
            .find(|m| m.author == Author::Teacher && m.analysis_id.as_deref() == Some(&analysis))
            .map(|m| m.content.clone())?;
        Some((text, report))
    }
}

fn read_snapshot(dir: &Path) -> Result<Option<Snapshot>, StoreError> {
    let path = dir.join(SNAPSHOT_FILE);
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| StoreError::Corrupt {
                path,
                line: e.line(),
                message: e.to_string(),
            }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&path)(e)),
    }
}

fn open_analyses(session: &Session, events: &[AnalysisEvent]) -> BTreeSet<String> {
    let mut open: BTreeSet<String> = session
        .messages
        .iter()
        .filter(|m| m.author == Author::Teacher)
        .filter_map(|m| m.analysis_id.clone())
        .collect();
    for e in events.iter().filter(|e| e.kind.is_terminal()) {
        open.remove(&e.analysis_id);
    }
    open
}

/// Loads every session directory under `root`.
pub fn load_all(root: &Path) -> Result<Vec<Arc<SessionHandle>>, StoreError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.join(LOG_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| SessionHandle::load(d)).collect()
}
