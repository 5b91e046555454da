//! Wire types shared by the HTTP API and the session store.

use std::fmt;

use arise_core::domain::AnalysisReport;
use arise_core::orchestrator::{EscalationThresholds, PanelConfig, PanelMode};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Who wrote a transcript message. Serialized as `teacher`, `system` or
/// `agent:<agent_id>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Author {
    Teacher,
    System,
    Agent(String),
}

impl fmt::Display for Author {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Author::Teacher => f.write_str("teacher"),
            Author::System => f.write_str("system"),
            Author::Agent(id) => write!(f, "agent:{id}"),
        }
    }
}

impl From<Author> for String {
    fn from(a: Author) -> Self {
        a.to_string()
    }
}

impl TryFrom<String> for Author {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        match s.as_str() {
            "teacher" => Ok(Author::Teacher),
            "system" => Ok(Author::System),
            _ => match s.strip_prefix("agent:") {
                Some(id) if !id.is_empty() => Ok(Author::Agent(id.to_string())),
                _ => Err(format!("unknown author {s:?}")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub author: Author,
    pub content: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub messages: Vec<Message>,
    pub reports: Vec<AnalysisReport>,
    pub config: PanelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    AgentStarted,
    AgentVerdict,
    AdvisoryNote,
    ManagerDecision,
    ReportReady,
    Error,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventKind::ReportReady | EventKind::Error)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::AgentStarted => "agent-started",
            EventKind::AgentVerdict => "agent-verdict",
            EventKind::AdvisoryNote => "advisory-note",
            EventKind::ManagerDecision => "manager-decision",
            EventKind::ReportReady => "report-ready",
            EventKind::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisEvent {
    pub session_id: String,
    pub analysis_id: String,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

/// Optional fields of `POST /sessions`. Unknown fields are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionOverrides {
    pub mode: Option<PanelMode>,
    pub use_rag: Option<bool>,
    pub rag_k: Option<usize>,
    pub manager_receives_context: Option<bool>,
    pub thresholds: Option<EscalationThresholds>,
}

impl SessionOverrides {
    pub fn apply(self, mut config: PanelConfig) -> PanelConfig {
        if let Some(m) = self.mode {
            config.mode = m;
        }
        if let Some(r) = self.use_rag {
            config.use_rag = r;
        }
        if let Some(k) = self.rag_k {
            config.rag_k = k;
        }
        if let Some(m) = self.manager_receives_context {
            config.manager_receives_context = m;
        }
        if let Some(t) = self.thresholds {
            config.thresholds = t;
        }
        config
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitIncident {
    pub text: String,
    #[serde(default)]
    pub context: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitAccepted {
    pub analysis_id: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowUp {
    pub question: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FollowUpAnswer {
    pub answer: Message,
}

/// Problem-details body returned with every error status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub code: String,
    pub message: String,
}
