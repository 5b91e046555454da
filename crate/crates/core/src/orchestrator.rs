//! Analysis panels.
//!
//! In single mode every student judges the incident independently and the
//! panel label is the plurality vote. In multi mode the manager profile reads
//! the student verdicts and decides, with full power to overrule them. Report
//! synthesis then adds advisory notes, an escalation estimate and
//! intervention suggestions.
//!
//! Student and advisor calls may run concurrently. Results are sorted by
//! `agent_id` before aggregation, so completion order never changes the
//! outcome.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    common_schema, AnalysisReport, DomainError, EscalationRisk, Incident, IncidentId, Label, LabelSchema, Verdict,
};
use crate::gateway::{
    parse_structured_verdict, parse_synthesis, ChatMessage, ChatRequest, FinishReason, Gateway, GatewayError,
    ParsedVerdict, Role, DEFAULT_EVAL_TEMPERATURE, FORMAT_REMINDER,
};
use crate::par::{self, ExecPolicy};
use crate::personas::{build_prompt, builtin_profiles, AgentProfile, AgentRole, PersonaError, PromptBundle, PromptInputs, Task};
use crate::retrieval::{RetrievedChunk, Retriever, DEFAULT_TOP_K};

pub const ADVISOR_UNAVAILABLE: &str = "advisor unavailable";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid panel configuration: {0}")]
    InvalidConfig(String),
    #[error("agent {agent_id} failed: {cause}")]
    Aborted { agent_id: String, cause: GatewayError },
    #[error("no verdicts to aggregate")]
    NoVerdicts,
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PanelMode {
    Single,
    Multi,
}

/// What the student panel is asked to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PanelTask {
    ClassifyExplicit,
    ClassifyImplicit,
    AnalyzeIncident,
}

impl PanelTask {
    pub fn schema(self) -> Arc<LabelSchema> {
        match self {
            PanelTask::ClassifyImplicit => LabelSchema::implicit(),
            PanelTask::ClassifyExplicit | PanelTask::AnalyzeIncident => LabelSchema::explicit(),
        }
    }

    pub fn prompt_task(self) -> Task {
        match self {
            PanelTask::ClassifyExplicit => Task::ClassifyExplicit,
            PanelTask::ClassifyImplicit => Task::ClassifyImplicit,
            PanelTask::AnalyzeIncident => Task::AnalyzeIncident,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscalationThresholds {
    pub high: f64,
    pub medium: f64,
}

impl Default for EscalationThresholds {
    fn default() -> Self {
        Self {
            high: 0.85,
            medium: 0.6,
        }
    }
}

impl EscalationThresholds {
    pub fn classify(&self, confidence: f64) -> EscalationRisk {
        if confidence >= self.high {
            EscalationRisk::High
        } else if confidence >= self.medium {
            EscalationRisk::Medium
        } else {
            EscalationRisk::Low
        }
    }
}

fn default_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    pub mode: PanelMode,
    pub use_rag: bool,
    pub task: PanelTask,
    pub profiles: Vec<AgentProfile>,
    pub seed: u64,
    #[serde(default = "default_k")]
    pub rag_k: usize,
    /// Whether the manager also sees retrieved context.
    #[serde(default)]
    pub manager_receives_context: bool,
    #[serde(default)]
    pub thresholds: EscalationThresholds,
}

impl PanelConfig {
    /// Built-in profiles with the default retrieval and threshold settings.
    pub fn new(mode: PanelMode, use_rag: bool, task: PanelTask) -> Self {
        Self {
            mode,
            use_rag,
            task,
            profiles: builtin_profiles(),
            seed: 0,
            rag_k: DEFAULT_TOP_K,
            manager_receives_context: false,
            thresholds: EscalationThresholds::default(),
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let invalid = |m: String| Err(OrchestratorError::InvalidConfig(m));
        for p in &self.profiles {
            p.validate()?;
        }
        if self.students().next().is_none() {
            return invalid("at least one student profile is required".into());
        }
        let managers = self.profiles.iter().filter(|p| p.role == AgentRole::Manager).count();
        if self.mode == PanelMode::Multi && managers != 1 {
            return invalid(format!("multi-agent mode needs exactly one manager, found {managers}"));
        }
        let mut ids: Vec<&str> = self.profiles.iter().map(|p| p.agent_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("agent ids must be unique".into());
        }
        if self.use_rag && self.rag_k == 0 {
            return invalid("rag_k must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.thresholds.medium) || self.thresholds.medium > self.thresholds.high {
            return invalid("escalation thresholds must satisfy 0 <= medium <= high".into());
        }
        Ok(())
    }

    pub fn students(&self) -> impl Iterator<Item = &AgentProfile> {
        self.profiles.iter().filter(|p| p.role == AgentRole::Student)
    }

    pub fn manager(&self) -> Option<&AgentProfile> {
        self.profiles.iter().find(|p| p.role == AgentRole::Manager)
    }

    pub fn advisors(&self) -> impl Iterator<Item = &AgentProfile> {
        self.profiles.iter().filter(|p| p.role == AgentRole::Advisor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallPurpose {
    Classify,
    Reask,
    Aggregate,
    Synthesize,
    Advise,
    FollowUp,
}

/// One gateway call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub agent_id: String,
    pub purpose: CallPurpose,
    pub prompt_digest: String,
    pub response_digest: String,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Writes one JSON object per line.
pub fn write_trace_jsonl<W: Write>(records: &[TraceRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelResult {
    pub incident_id: IncidentId,
    pub config: PanelConfig,
    pub verdicts: Vec<Verdict>,
    pub final_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manager_rationale: Option<String>,
    pub trace: Vec<TraceRecord>,
}

impl PanelResult {
    /// Copy with call durations zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.trace {
            r.duration_ms = 0;
        }
        out
    }
}

/// Progress notifications emitted while a panel runs. Calls may arrive from
/// several threads at once.
#[derive(Debug, Clone, PartialEq)]
pub enum PanelEvent {
    AgentStarted { agent_id: String, role: AgentRole },
    AgentVerdict(Verdict),
    ManagerDecision { label: Label, rationale: String },
    AdvisoryNote { agent_id: String, note: String },
}

pub trait PanelObserver: Sync {
    fn on_event(&self, event: PanelEvent);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoopObserver;

impl PanelObserver for NoopObserver {
    fn on_event(&self, _event: PanelEvent) {}
}

impl<F: Fn(PanelEvent) + Sync> PanelObserver for F {
    fn on_event(&self, event: PanelEvent) {
        self(event)
    }
}

/// Plurality vote. Ties go to the highest mean confidence, then to the
/// earliest class in schema order.
pub fn aggregate_majority(verdicts: &[Verdict]) -> Result<Label, OrchestratorError> {
    if common_schema(verdicts)?.is_none() {
        return Err(OrchestratorError::NoVerdicts);
    }
    let mut sorted: Vec<&Verdict> = verdicts.iter().collect();
    sorted.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));
    // class_index -> (count, confidence sum, label)
    let mut tally: BTreeMap<usize, (usize, f64, &Label)> = BTreeMap::new();
    for v in sorted {
        let e = tally.entry(v.label.class_index).or_insert((0, 0.0, &v.label));
        e.0 += 1;
        e.1 += v.confidence;
    }
    let mut best: Option<(usize, f64, &Label)> = None;
    // BTreeMap iterates in schema order; strict comparisons keep the earliest.
    for (count, sum, label) in tally.into_values() {
        let mean = sum / count as f64;
        let better = match best {
            None => true,
            Some((n, m, _)) => count > n || (count == n && mean > m),
        };
        if better {
            best = Some((count, mean, label));
        }
    }
    Ok(best.expect("non-empty tally").2.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub policy: ExecPolicy,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            model: "o1-mini".into(),
            temperature: DEFAULT_EVAL_TEMPERATURE,
            max_tokens: 1024,
            policy: ExecPolicy::Parallel,
        }
    }
}

/// Full outcome of analysing one teacher-submitted incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutcome {
    pub panel: PanelResult,
    pub report: AnalysisReport,
    /// Panel trace followed by the report-synthesis calls.
    pub trace: Vec<TraceRecord>,
}

struct Classified {
    parsed: Option<ParsedVerdict>,
    trace: Vec<TraceRecord>,
    last_content: String,
}

/// Runs panels against a gateway and an optional retriever.
#[derive(Clone)]
pub struct PanelEngine {
    gateway: Gateway,
    retriever: Option<Arc<dyn Retriever>>,
    settings: EngineSettings,
}

impl std::fmt::Debug for PanelEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PanelEngine")
            .field("gateway", &self.gateway)
            .field("retriever", &self.retriever.is_some())
            .field("settings", &self.settings)
            .finish()
    }
}

impl PanelEngine {
    pub fn new(gateway: Gateway, retriever: Option<Arc<dyn Retriever>>, settings: EngineSettings) -> Self {
        Self {
            gateway,
            retriever,
            settings,
        }
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn with_policy(mut self, policy: ExecPolicy) -> Self {
        self.settings.policy = policy;
        self
    }

    fn retrieve(&self, incident: &Incident, use_rag: bool, k: usize) -> Vec<RetrievedChunk> {
        match (&self.retriever, use_rag) {
            (Some(r), true) => r.retrieve(&incident.query(), k),
            _ => Vec::new(),
        }
    }

    /// One gateway call, recorded as a trace entry.
    pub fn call(
        &self,
        agent_id: &str,
        purpose: CallPurpose,
        messages: Vec<ChatMessage>,
    ) -> Result<(String, FinishReason, TraceRecord), GatewayError> {
        let request = ChatRequest {
            model: self.settings.model.clone(),
            messages,
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
            request_tag: format!("{agent_id}/{purpose:?}"),
        };
        let started = Instant::now();
        let response = self.gateway.complete(&request)?;
        let note = (!response.dropped_params.is_empty())
            .then(|| format!("dropped unsupported params: {}", response.dropped_params.join(", ")));
        let record = TraceRecord {
            agent_id: agent_id.to_string(),
            purpose,
            prompt_digest: digest(&request.rendered_prompt()),
            response_digest: digest(&response.content),
            duration_ms: started.elapsed().as_millis() as u64,
            note,
        };
        Ok((response.content, response.finish_reason, record))
    }

    /// Asks for a structured verdict, re-asking once with a format reminder.
    fn classify(
        &self,
        agent_id: &str,
        bundle: &PromptBundle,
        schema: &LabelSchema,
        purpose: CallPurpose,
    ) -> Result<Classified, GatewayError> {
        let mut messages = bundle.messages();
        let (content, finish, record) = self.call(agent_id, purpose, messages.clone())?;
        let mut trace = vec![record];
        let first = (finish != FinishReason::Error)
            .then(|| parse_structured_verdict(&content, schema).ok())
            .flatten();
        if let Some(parsed) = first {
            return Ok(Classified {
                parsed: Some(parsed),
                trace,
                last_content: content,
            });
        }
        messages.push(ChatMessage::new(Role::Assistant, content));
        messages.push(ChatMessage::new(Role::User, FORMAT_REMINDER));
        let (content, finish, record) = self.call(agent_id, CallPurpose::Reask, messages)?;
        trace.push(record);
        let parsed = (finish != FinishReason::Error)
            .then(|| parse_structured_verdict(&content, schema).ok())
            .flatten();
        Ok(Classified {
            parsed,
            trace,
            last_content: content,
        })
    }

    fn student_verdict(
        &self,
        incident: &Incident,
        profile: &AgentProfile,
        task: PanelTask,
        contexts: &[RetrievedChunk],
    ) -> Result<(Verdict, Vec<TraceRecord>), OrchestratorError> {
        if profile.role != AgentRole::Student {
            return Err(PersonaError::RoleTaskMismatch {
                role: profile.role,
                task: task.prompt_task(),
            }
            .into());
        }
        let schema = task.schema();
        let bundle = build_prompt(profile, task.prompt_task(), incident, &PromptInputs::new(&schema).contexts(contexts))?;
        let classified = self
            .classify(&profile.agent_id, &bundle, &schema, CallPurpose::Classify)
            .map_err(|cause| OrchestratorError::Aborted {
                agent_id: profile.agent_id.clone(),
                cause,
            })?;
        let mut trace = classified.trace;
        let verdict = match classified.parsed {
            Some(p) => Verdict {
                agent_id: profile.agent_id.clone(),
                label: p.label,
                confidence: p.confidence,
                rationale: p.rationale,
                context_ids: bundle.context_ids.clone(),
            },
            None => {
                if let Some(last) = trace.last_mut() {
                    last.note = Some("malformed twice; counted as fallback class".into());
                }
                Verdict {
                    agent_id: profile.agent_id.clone(),
                    label: schema.fallback_label(),
                    confidence: 0.0,
                    rationale: format!("unparsable response: {}", classified.last_content.trim()),
                    context_ids: bundle.context_ids.clone(),
                }
            }
        };
        Ok((verdict, trace))
    }

    /// A single student's independent verdict.
    pub fn analyze_single(
        &self,
        incident: &Incident,
        profile: &AgentProfile,
        task: PanelTask,
        use_rag: bool,
        rag_k: usize,
    ) -> Result<(Verdict, Vec<TraceRecord>), OrchestratorError> {
        let contexts = self.retrieve(incident, use_rag, rag_k);
        self.student_verdict(incident, profile, task, &contexts)
    }

    /// The manager's decision over the student verdicts. Falls back to the
    /// plurality vote when the manager answers malformed twice.
    pub fn manager_aggregate(
        &self,
        incident: &Incident,
        manager: &AgentProfile,
        schema: &LabelSchema,
        verdicts: &[Verdict],
        contexts: &[RetrievedChunk],
    ) -> Result<(Label, String, Vec<TraceRecord>), OrchestratorError> {
        let bundle = build_prompt(
            manager,
            Task::Aggregate,
            incident,
            &PromptInputs::new(schema).verdicts(verdicts).contexts(contexts),
        )?;
        let classified = self
            .classify(&manager.agent_id, &bundle, schema, CallPurpose::Aggregate)
            .map_err(|cause| OrchestratorError::Aborted {
                agent_id: manager.agent_id.clone(),
                cause,
            })?;
        let mut trace = classified.trace;
        match classified.parsed {
            Some(p) => Ok((p.label, p.rationale, trace)),
            None => {
                let label = aggregate_majority(verdicts)?;
                if let Some(last) = trace.last_mut() {
                    last.note = Some("manager response malformed twice; fell back to majority vote".into());
                }
                Ok((
                    label,
                    "The manager's answer could not be parsed; the student majority decision was applied.".into(),
                    trace,
                ))
            }
        }
    }

    pub fn run_panel(
        &self,
        incident: &Incident,
        config: &PanelConfig,
        observer: &dyn PanelObserver,
    ) -> Result<PanelResult, OrchestratorError> {
        config.validate()?;
        let schema = config.task.schema();
        let contexts = self.retrieve(incident, config.use_rag, config.rag_k);
        let students: Vec<&AgentProfile> = config.students().collect();
        let results = par::map(self.settings.policy, &students, |profile| {
            observer.on_event(PanelEvent::AgentStarted {
                agent_id: profile.agent_id.clone(),
                role: profile.role,
            });
            let out = self.student_verdict(incident, profile, config.task, &contexts);
            if let Ok((v, _)) = &out {
                observer.on_event(PanelEvent::AgentVerdict(v.clone()));
            }
            out
        });
        let mut collected = Vec::with_capacity(results.len());
        for r in results {
            collected.push(r?);
        }
        collected.sort_by(|a, b| a.0.agent_id.cmp(&b.0.agent_id));
        let (verdicts, traces): (Vec<Verdict>, Vec<Vec<TraceRecord>>) = collected.into_iter().unzip();
        let mut trace: Vec<TraceRecord> = traces.into_iter().flatten().collect();

        let (final_label, manager_rationale) = match config.mode {
            PanelMode::Single => (aggregate_majority(&verdicts)?, None),
            PanelMode::Multi => {
                let manager = config.manager().expect("validated");
                observer.on_event(PanelEvent::AgentStarted {
                    agent_id: manager.agent_id.clone(),
                    role: manager.role,
                });
                let manager_ctx: &[RetrievedChunk] = if config.manager_receives_context { &contexts } else { &[] };
                let (label, rationale, t) = self.manager_aggregate(incident, manager, &schema, &verdicts, manager_ctx)?;
                trace.extend(t);
                observer.on_event(PanelEvent::ManagerDecision {
                    label: label.clone(),
                    rationale: rationale.clone(),
                });
                (label, Some(rationale))
            }
        };
        Ok(PanelResult {
            incident_id: incident.id.clone(),
            config: config.clone(),
            verdicts,
            final_label,
            manager_rationale,
            trace,
        })
    }

    /// Turns a finished panel into the teacher-facing report.
    pub fn compose_report(
        &self,
        panel: &PanelResult,
        incident: &Incident,
        observer: &dyn PanelObserver,
    ) -> Result<(AnalysisReport, Vec<TraceRecord>), OrchestratorError> {
        let config = &panel.config;
        let schema = config.task.schema();
        let contexts = self.retrieve(incident, config.use_rag, config.rag_k);
        let advisors: Vec<&AgentProfile> = config.advisors().collect();
        let notes = par::map(self.settings.policy, &advisors, |profile| {
            observer.on_event(PanelEvent::AgentStarted {
                agent_id: profile.agent_id.clone(),
                role: profile.role,
            });
            let (note, record) = self.advise(profile, incident, &schema, &panel.final_label, &contexts);
            observer.on_event(PanelEvent::AdvisoryNote {
                agent_id: profile.agent_id.clone(),
                note: note.clone(),
            });
            (note, record)
        });
        let mut trace = Vec::new();
        let mut advisory_notes = Vec::new();
        for (note, record) in notes {
            advisory_notes.push(note);
            trace.extend(record);
        }

        let hateful = schema.is_hateful(&panel.final_label);
        let (template_risk, template_interventions) = self.template(panel, &schema);
        let (escalation_risk, interventions) = match (config.mode, config.manager()) {
            (PanelMode::Multi, Some(manager)) => {
                match self.synthesize(manager, incident, &schema, panel) {
                    Ok((risk, items, records)) => {
                        trace.extend(records);
                        let items = if hateful && items.is_empty() { template_interventions } else { items };
                        (risk, items)
                    }
                    Err(records) => {
                        trace.extend(records);
                        (template_risk, template_interventions)
                    }
                }
            }
            _ => (template_risk, template_interventions),
        };
        let report = AnalysisReport {
            incident_id: incident.id.clone(),
            final_label: panel.final_label.clone(),
            escalation_risk,
            interventions,
            agent_verdicts: panel.verdicts.clone(),
            advisory_notes,
            manager_rationale: panel.manager_rationale.clone(),
        };
        report.validate(&schema, config.mode == PanelMode::Multi)?;
        Ok((report, trace))
    }

    /// Panel followed by report synthesis.
    pub fn analyze_incident(
        &self,
        incident: &Incident,
        config: &PanelConfig,
        observer: &dyn PanelObserver,
    ) -> Result<AnalysisOutcome, OrchestratorError> {
        let panel = self.run_panel(incident, config, observer)?;
        let (report, extra) = self.compose_report(&panel, incident, observer)?;
        let mut trace = panel.trace.clone();
        trace.extend(extra);
        Ok(AnalysisOutcome { panel, report, trace })
    }

    fn advise(
        &self,
        profile: &AgentProfile,
        incident: &Incident,
        schema: &LabelSchema,
        final_label: &Label,
        contexts: &[RetrievedChunk],
    ) -> (String, Option<TraceRecord>) {
        let bundle = match build_prompt(
            profile,
            Task::Advise,
            incident,
            &PromptInputs::new(schema).final_label(final_label).contexts(contexts),
        ) {
            Ok(b) => b,
            Err(_) => return (ADVISOR_UNAVAILABLE.into(), None),
        };
        match self.call(&profile.agent_id, CallPurpose::Advise, bundle.messages()) {
            Ok((content, finish, record)) if finish != FinishReason::Error && !content.trim().is_empty() => {
                (content.trim().to_string(), Some(record))
            }
            Ok((_, _, mut record)) => {
                record.note = Some("advisor returned no usable note".into());
                (ADVISOR_UNAVAILABLE.into(), Some(record))
            }
            Err(e) => {
                tracing::warn!(agent = %profile.agent_id, error = %e, "advisor call failed");
                let record = TraceRecord {
                    agent_id: profile.agent_id.clone(),
                    purpose: CallPurpose::Advise,
                    prompt_digest: digest(&bundle.system_prompt),
                    response_digest: String::new(),
                    duration_ms: 0,
                    note: Some(format!("advisor unavailable: {e}")),
                };
                (ADVISOR_UNAVAILABLE.into(), Some(record))
            }
        }
    }

    fn synthesize(
        &self,
        manager: &AgentProfile,
        incident: &Incident,
        schema: &LabelSchema,
        panel: &PanelResult,
    ) -> Result<(EscalationRisk, Vec<String>, Vec<TraceRecord>), Vec<TraceRecord>> {
        let bundle = build_prompt(
            manager,
            Task::AnalyzeIncident,
            incident,
            &PromptInputs::new(schema).verdicts(&panel.verdicts).final_label(&panel.final_label),
        )
        .map_err(|_| Vec::new())?;
        match self.call(&manager.agent_id, CallPurpose::Synthesize, bundle.messages()) {
            Ok((content, finish, mut record)) => match (finish, parse_synthesis(&content)) {
                (FinishReason::Stop | FinishReason::Length, Ok((risk, items))) => Ok((risk, items, vec![record])),
                _ => {
                    record.note = Some("synthesis malformed; used template".into());
                    Err(vec![record])
                }
            },
            Err(e) => Err(vec![TraceRecord {
                agent_id: manager.agent_id.clone(),
                purpose: CallPurpose::Synthesize,
                prompt_digest: digest(&bundle.system_prompt),
                response_digest: String::new(),
                duration_ms: 0,
                note: Some(format!("synthesis failed ({e}); used template")),
            }]),
        }
    }

    /// Deterministic escalation and interventions from the final label and
    /// the mean confidence of the verdicts that agree with it.
    fn template(&self, panel: &PanelResult, schema: &LabelSchema) -> (EscalationRisk, Vec<String>) {
        template_assessment(&panel.final_label, &panel.verdicts, schema, &panel.config.thresholds)
    }
}

pub fn template_assessment(
    final_label: &Label,
    verdicts: &[Verdict],
    schema: &LabelSchema,
    thresholds: &EscalationThresholds,
) -> (EscalationRisk, Vec<String>) {
    if !schema.is_hateful(final_label) {
        return (EscalationRisk::Low, Vec::new());
    }
    let agreeing: Vec<f64> = verdicts
        .iter()
        .filter(|v| v.label == *final_label)
        .map(|v| v.confidence)
        .collect();
    let pool: Vec<f64> = if agreeing.is_empty() {
        verdicts.iter().map(|v| v.confidence).collect()
    } else {
        agreeing
    };
    let mean = if pool.is_empty() { 0.0 } else { pool.iter().sum::<f64>() / pool.len() as f64 };
    (thresholds.classify(mean), intervention_template(&final_label.class))
}

fn intervention_templates() -> &'static BTreeMap<String, Vec<String>> {
    static TEMPLATES: OnceLock<BTreeMap<String, Vec<String>>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        serde_json::from_str(include_str!("../assets/interventions.json")).expect("bundled interventions are valid")
    })
}

/// Intervention suggestions for a class, falling back to the generic list.
pub fn intervention_template(class: &str) -> Vec<String> {
    let t = intervention_templates();
    t.get(class).or_else(|| t.get("hateful")).cloned().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_incident;
    use crate::gateway::ScriptedBackend;
    use crate::retrieval::{Document, DocumentKind, IndexBuilder};
    use std::sync::Mutex;

    fn verdict_text(label: &str, conf: f64, why: &str) -> String {
        format!("label: {label}\nconfidence: {conf}\nrationale: {why}")
    }

    fn backend(students: [(&str, f64); 3]) -> ScriptedBackend {
        let mut b = ScriptedBackend::new();
        let ids = ["psychology-student", "pedagogy-student", "cognitive-science-student"];
        for (id, (label, conf)) in ids.iter().zip(students) {
            b.register_contains(format!("You are {id},"), verdict_text(label, conf, &format!("{id} view")));
        }
        b
    }

    fn engine(b: ScriptedBackend) -> PanelEngine {
        PanelEngine::new(Gateway::new(b), None, EngineSettings::default())
    }

    fn incident() -> Incident {
        validate_incident("They told him to go back to his own country.", Some("in the corridor")).unwrap()
    }

    fn students_only(config: &mut PanelConfig) {
        config.profiles.retain(|p| p.role != AgentRole::Advisor);
    }

    #[test]
    fn analyze_single_scripted() {
        let e = engine(backend([("hateful", 0.9), ("hateful", 0.9), ("hateful", 0.9)]));
        let profiles = builtin_profiles();
        let (v, trace) = e
            .analyze_single(&incident(), &profiles[0], PanelTask::ClassifyExplicit, false, 4)
            .unwrap();
        assert_eq!((v.label.class.as_str(), v.confidence), ("hateful", 0.9));
        assert!(v.context_ids.is_empty());
        assert_eq!(trace.len(), 1);
        assert!(matches!(
            e.analyze_single(&incident(), &profiles[3], PanelTask::ClassifyExplicit, false, 4),
            Err(OrchestratorError::Persona(_))
        ));
    }

    #[test]
    fn malformed_student_reasks_then_defaults() {
        let mut b = ScriptedBackend::new();
        let calls = Arc::new(Mutex::new(0));
        let c = calls.clone();
        b.register_fn(move |p| {
            p.contains("You are psychology-student,").then(|| {
                *c.lock().unwrap() += 1;
                "I think it is bad.".to_string()
            })
        });
        let e = engine(b);
        let (v, trace) = e
            .analyze_single(&incident(), &builtin_profiles()[0], PanelTask::ClassifyImplicit, false, 4)
            .unwrap();
        assert_eq!(*calls.lock().unwrap(), 2);
        assert_eq!(v.label.class, "other");
        assert_eq!(v.confidence, 0.0);
        assert_eq!(trace.len(), 2);
        assert_eq!(trace[1].purpose, CallPurpose::Reask);
        assert!(trace[1].note.is_some());
    }

    #[test]
    fn reask_recovers() {
        let mut b = ScriptedBackend::new();
        b.register_contains(FORMAT_REMINDER, verdict_text("irony", 0.6, "second try"));
        b.register_contains("You are psychology-student,", "garbage");
        let (v, trace) = engine(b)
            .analyze_single(&incident(), &builtin_profiles()[0], PanelTask::ClassifyImplicit, false, 4)
            .unwrap();
        assert_eq!(v.label.class, "irony");
        assert_eq!(trace.len(), 2);
    }

    #[test]
    fn single_mode_majority() {
        let e = engine(backend([("hateful", 0.9), ("hateful", 0.8), ("not-hateful", 0.7)]));
        let mut config = PanelConfig::new(PanelMode::Single, false, PanelTask::ClassifyExplicit);
        students_only(&mut config);
        let r = e.run_panel(&incident(), &config, &NoopObserver).unwrap();
        assert_eq!(r.final_label.class, "hateful");
        assert!(r.manager_rationale.is_none());
        assert_eq!(r.trace.len(), 3);
        let ids: Vec<_> = r.verdicts.iter().map(|v| v.agent_id.as_str()).collect();
        assert_eq!(ids, ["cognitive-science-student", "pedagogy-student", "psychology-student"]);
    }

    #[test]
    fn multi_mode_manager_overrides() {
        let mut b = backend([("hateful", 0.9), ("hateful", 0.8), ("not-hateful", 0.7)]);
        b.register_contains("You are manager-professor,", verdict_text("not-hateful", 0.7, "quoting a film"));
        let mut config = PanelConfig::new(PanelMode::Multi, false, PanelTask::ClassifyExplicit);
        students_only(&mut config);
        let r = engine(b).run_panel(&incident(), &config, &NoopObserver).unwrap();
        assert_eq!(r.final_label.class, "not-hateful");
        assert_eq!(r.manager_rationale.as_deref(), Some("quoting a film"));
        assert_eq!(r.trace.len(), 4);
    }

    #[test]
    fn multi_mode_manager_malformed_falls_back() {
        let mut b = backend([("hateful", 0.9), ("hateful", 0.8), ("not-hateful", 0.7)]);
        b.register_contains("You are manager-professor,", "no idea");
        let mut config = PanelConfig::new(PanelMode::Multi, false, PanelTask::ClassifyExplicit);
        students_only(&mut config);
        let r = engine(b).run_panel(&incident(), &config, &NoopObserver).unwrap();
        assert_eq!(r.final_label.class, "hateful");
        assert!(r.manager_rationale.is_some());
        assert_eq!(r.trace.len(), 5);
        assert!(r.trace.last().unwrap().note.as_deref().unwrap().contains("majority"));
    }

    #[test]
    fn one_student_panel() {
        let e = engine(backend([("not-hateful", 0.4), ("hateful", 0.9), ("hateful", 0.9)]));
        let mut config = PanelConfig::new(PanelMode::Single, false, PanelTask::ClassifyExplicit);
        config.profiles.truncate(1);
        let r = e.run_panel(&incident(), &config, &NoopObserver).unwrap();
        assert_eq!(r.final_label.class, "not-hateful");
    }

    #[test]
    fn config_validation() {
        let mut c = PanelConfig::new(PanelMode::Multi, false, PanelTask::ClassifyExplicit);
        c.profiles.retain(|p| p.role != AgentRole::Manager);
        assert!(matches!(c.validate(), Err(OrchestratorError::InvalidConfig(_))));
        let mut c = PanelConfig::new(PanelMode::Single, false, PanelTask::ClassifyExplicit);
        c.profiles.retain(|p| p.role != AgentRole::Student);
        assert!(c.validate().is_err());
        let mut c = PanelConfig::new(PanelMode::Single, false, PanelTask::ClassifyExplicit);
        let dup = c.profiles[0].clone();
        c.profiles.push(dup);
        assert!(c.validate().is_err());
        assert!(PanelConfig::new(PanelMode::Multi, true, PanelTask::AnalyzeIncident).validate().is_ok());
    }

    #[test]
    fn transport_failure_aborts() {
        struct Down;
        impl crate::gateway::ChatBackend for Down {
            fn complete(&self, _: &ChatRequest) -> Result<crate::gateway::ChatResponse, GatewayError> {
                Err(GatewayError::Transport { status: Some(503), message: "down".into() })
            }
        }
        let e = PanelEngine::new(Gateway::new(Down), None, EngineSettings::default());
        let config = PanelConfig::new(PanelMode::Single, false, PanelTask::ClassifyExplicit);
        match e.run_panel(&incident(), &config, &NoopObserver) {
            Err(OrchestratorError::Aborted { agent_id, .. }) => assert_eq!(agent_id, "psychology-student"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rag_contexts_reach_students_not_manager() {
        let mut builder = IndexBuilder::new(50, 10);
        builder
            .ingest(Document {
                doc_id: "def".into(),
                title: "Definition".into(),
                body: "telling someone to go back to their country is xenophobic hate".into(),
                kind: DocumentKind::Definition,
            })
            .unwrap();
        let index: Arc<dyn Retriever> = Arc::new(builder.publish());
        let mut b = backend([("hateful", 0.9), ("hateful", 0.8), ("hateful", 0.7)]);
        let saw_context = Arc::new(Mutex::new(false));
        let s = saw_context.clone();
        b.register_fn(move |p| {
            p.contains("You are manager-professor,").then(|| {
                *s.lock().unwrap() = p.contains("<<<CONTEXT");
                verdict_text("hateful", 0.9, "agree")
            })
        });
        let e = PanelEngine::new(Gateway::new(b), Some(index), EngineSettings::default());
        let mut config = PanelConfig::new(PanelMode::Multi, true, PanelTask::ClassifyExplicit);
        students_only(&mut config);
        let r = e.run_panel(&incident(), &config, &NoopObserver).unwrap();
        assert!(r.verdicts.iter().all(|v| v.context_ids == ["def#0"]));
        assert!(!*saw_context.lock().unwrap());
        config.manager_receives_context = true;
        e.run_panel(&incident(), &config, &NoopObserver).unwrap();
        assert!(*saw_context.lock().unwrap());
    }

    #[test]
    fn template_thresholds() {
        let schema = LabelSchema::explicit();
        let hateful = schema.label(0).unwrap();
        let v = |c: f64, l: &Label| Verdict {
            agent_id: "a".into(),
            label: l.clone(),
            confidence: c,
            rationale: String::new(),
            context_ids: vec![],
        };
        let t = EscalationThresholds::default();
        let (risk, items) = template_assessment(&hateful, &[v(0.92, &hateful)], &schema, &t);
        assert_eq!(risk, EscalationRisk::High);
        assert!(!items.is_empty());
        assert_eq!(template_assessment(&hateful, &[v(0.85, &hateful)], &schema, &t).0, EscalationRisk::High);
        assert_eq!(template_assessment(&hateful, &[v(0.6, &hateful)], &schema, &t).0, EscalationRisk::Medium);
        assert_eq!(template_assessment(&hateful, &[v(0.59, &hateful)], &schema, &t).0, EscalationRisk::Low);
        let benign = schema.label(1).unwrap();
        assert_eq!(
            template_assessment(&benign, &[v(0.99, &benign)], &schema, &t),
            (EscalationRisk::Low, vec![])
        );
        let implicit = LabelSchema::implicit();
        for class in implicit.classes() {
            assert!(!intervention_template(class).is_empty());
        }
    }

    #[test]
    fn report_single_mode_with_advisors() {
        let mut b = backend([("hateful", 0.9), ("hateful", 0.95), ("hateful", 0.91)]);
        b.register_contains("You are advisor-collectivist,", "Family honour is at stake.");
        b.register_contains("You are advisor-immigrant,", "Origin remarks exclude.");
        let e = engine(b);
        let config = PanelConfig::new(PanelMode::Single, false, PanelTask::AnalyzeIncident);
        let events = Mutex::new(Vec::new());
        let observer = |ev: PanelEvent| events.lock().unwrap().push(ev);
        let out = e.analyze_incident(&incident(), &config, &observer).unwrap();
        let r = &out.report;
        assert_eq!(r.final_label.class, "hateful");
        assert_eq!(r.escalation_risk, EscalationRisk::High);
        assert_eq!(
            r.advisory_notes,
            ["Family honour is at stake.", "Origin remarks exclude.", ADVISOR_UNAVAILABLE]
        );
        assert!(r.manager_rationale.is_none());
        assert_eq!(out.trace.len(), 3 + 3);
        let notes = events.lock().unwrap().iter().filter(|e| matches!(e, PanelEvent::AdvisoryNote { .. })).count();
        assert_eq!(notes, 3);
    }

    #[test]
    fn report_multi_mode_uses_synthesis() {
        let mut b = backend([("hateful", 0.7), ("hateful", 0.7), ("not-hateful", 0.7)]);
        b.register_contains(
            "Estimate the risk that the situation escalates",
            "escalation: medium\ninterventions:\n- Talk to both students\n- Inform parents",
        );
        b.register_contains("You are manager-professor,", verdict_text("hateful", 0.8, "targets origin"));
        let mut config = PanelConfig::new(PanelMode::Multi, false, PanelTask::AnalyzeIncident);
        config.profiles.retain(|p| p.role != AgentRole::Advisor);
        let out = engine(b).analyze_incident(&incident(), &config, &NoopObserver).unwrap();
        assert_eq!(out.report.escalation_risk, EscalationRisk::Medium);
        assert_eq!(out.report.interventions, ["Talk to both students", "Inform parents"]);
        assert_eq!(out.report.manager_rationale.as_deref(), Some("targets origin"));
        assert_eq!(out.trace.len(), 5);
    }

    #[test]
    fn trace_jsonl_export() {
        let records = vec![TraceRecord {
            agent_id: "a".into(),
            purpose: CallPurpose::Classify,
            prompt_digest: digest("p"),
            response_digest: digest("r"),
            duration_ms: 3,
            note: None,
        }];
        let mut buf = Vec::new();
        write_trace_jsonl(&records, &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["agent_id"], "a");
        assert_eq!(v["duration_ms"], 3);
        assert_eq!(v["prompt_digest"].as_str().unwrap().len(), 32);
    }
}
