//! Agent personas and persona-conditioned prompt assembly.
//!
//! Profiles are text assets with a front-matter header (`agent_id`, `role`,
//! `discipline`, `cultural_lens`) followed by the backstory. Backstories may
//! use the placeholders `{{agent_id}}`, `{{discipline}}` and
//! `{{cultural_lens}}`, substituted at load time.
//!
//! The backstory goes into the system prompt only. Incident text, task,
//! output format and retrieved context go into the user prompt, so the
//! persona stays fixed when retrieval is switched on or off.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnalysisReport, Incident, Label, LabelSchema, Verdict};
use crate::frontmatter;
use crate::gateway::{verdict_format_instruction, ChatMessage, Role};
use crate::retrieval::RetrievedChunk;

pub const MANAGER_DISCIPLINE: &str = "academic professor";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersonaError {
    #[error("task {task:?} cannot be run by a {role:?} profile")]
    RoleTaskMismatch { role: AgentRole, task: Task },
    #[error("invalid profile {agent_id}: {reason}")]
    InvalidProfile { agent_id: String, reason: String },
    #[error("task {0:?} needs {1}")]
    MissingInput(Task, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Student,
    Manager,
    Advisor,
}

impl AgentRole {
    fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_lowercase().as_str() {
            "student" => Some(Self::Student),
            "manager" => Some(Self::Manager),
            "advisor" => Some(Self::Advisor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub role: AgentRole,
    pub discipline: String,
    pub backstory: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cultural_lens: Option<String>,
}

impl AgentProfile {
    pub fn validate(&self) -> Result<(), PersonaError> {
        let invalid = |reason: &str| {
            Err(PersonaError::InvalidProfile {
                agent_id: self.agent_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.agent_id.trim().is_empty() {
            return invalid("empty agent_id");
        }
        match self.role {
            AgentRole::Student if self.discipline.trim().is_empty() => invalid("student needs a discipline"),
            AgentRole::Advisor if self.cultural_lens.as_deref().is_none_or(|l| l.trim().is_empty()) => {
                invalid("advisor needs a cultural lens")
            }
            AgentRole::Manager if self.discipline != MANAGER_DISCIPLINE => {
                invalid("manager discipline must be \"academic professor\"")
            }
            _ => Ok(()),
        }
    }

    /// Parses a profile asset file.
    pub fn parse(text: &str) -> Result<Self, PersonaError> {
        let invalid = |agent_id: &str, reason: &str| PersonaError::InvalidProfile {
            agent_id: agent_id.to_string(),
            reason: reason.to_string(),
        };
        let fm = frontmatter::parse(text).ok_or_else(|| invalid("<unknown>", "missing front-matter"))?;
        let agent_id = fm.get("agent_id").ok_or_else(|| invalid("<unknown>", "missing agent_id"))?;
        let role = fm
            .get("role")
            .and_then(AgentRole::parse)
            .ok_or_else(|| invalid(agent_id, "missing or unknown role"))?;
        let discipline = fm.get("discipline").unwrap_or_default().to_string();
        let cultural_lens = fm.get("cultural_lens").map(str::to_string);
        let backstory = fm
            .body
            .replace("{{agent_id}}", agent_id)
            .replace("{{discipline}}", &discipline)
            .replace("{{cultural_lens}}", cultural_lens.as_deref().unwrap_or(""));
        if backstory.trim().is_empty() {
            return Err(invalid(agent_id, "empty backstory"));
        }
        let profile = Self {
            agent_id: agent_id.to_string(),
            role,
            discipline,
            backstory,
            cultural_lens,
        };
        profile.validate()?;
        Ok(profile)
    }
}

const BUILTIN_ASSETS: [&str; 7] = [
    include_str!("../assets/personas/01-psychology-student.md"),
    include_str!("../assets/personas/02-pedagogy-student.md"),
    include_str!("../assets/personas/03-cognitive-science-student.md"),
    include_str!("../assets/personas/10-manager-professor.md"),
    include_str!("../assets/personas/20-advisor-collectivist.md"),
    include_str!("../assets/personas/21-advisor-immigrant.md"),
    include_str!("../assets/personas/22-advisor-religious-minority.md"),
];

/// The bundled panel: three students, the professor, three cultural advisors.
pub fn builtin_profiles() -> Vec<AgentProfile> {
    BUILTIN_ASSETS
        .iter()
        .map(|a| AgentProfile::parse(a).expect("bundled persona is valid"))
        .collect()
}

/// Loads every `.md`/`.txt` profile in `dir`, sorted by file name.
pub fn load_profiles(dir: &Path) -> Result<Vec<AgentProfile>, PersonaError> {
    let io = |e: std::io::Error| PersonaError::InvalidProfile {
        agent_id: dir.display().to_string(),
        reason: e.to_string(),
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("md" | "txt")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| AgentProfile::parse(&std::fs::read_to_string(p).map_err(io)?))
        .collect()
}

pub fn by_role(profiles: &[AgentProfile], role: AgentRole) -> impl Iterator<Item = &AgentProfile> {
    profiles.iter().filter(move |p| p.role == role)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ClassifyExplicit,
    ClassifyImplicit,
    AnalyzeIncident,
    Aggregate,
    Advise,
}

impl Task {
    fn allowed_for(self, role: AgentRole) -> bool {
        match self {
            Task::ClassifyExplicit | Task::ClassifyImplicit => role == AgentRole::Student,
            Task::AnalyzeIncident => matches!(role, AgentRole::Student | AgentRole::Manager),
            Task::Aggregate => role == AgentRole::Manager,
            Task::Advise => role == AgentRole::Advisor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_prompt: String,
    pub context_block: Option<String>,
    pub context_ids: Vec<String>,
}

impl PromptBundle {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::new(Role::System, &self.system_prompt),
            ChatMessage::new(Role::User, &self.user_prompt),
        ]
    }
}

/// Task-dependent material beyond the incident itself.
#[derive(Debug, Clone, Copy)]
pub struct PromptInputs<'a> {
    /// Schema whose classes the answer must use (classification and aggregation).
    pub schema: &'a LabelSchema,
    pub contexts: &'a [RetrievedChunk],
    /// Student verdicts shown to the manager.
    pub verdicts: &'a [Verdict],
    /// Panel decision shown to the manager's report synthesis and to advisors.
    pub final_label: Option<&'a Label>,
}

impl<'a> PromptInputs<'a> {
    pub fn new(schema: &'a LabelSchema) -> Self {
        Self {
            schema,
            contexts: &[],
            verdicts: &[],
            final_label: None,
        }
    }

    pub fn contexts(mut self, contexts: &'a [RetrievedChunk]) -> Self {
        self.contexts = contexts;
        self
    }

    pub fn verdicts(mut self, verdicts: &'a [Verdict]) -> Self {
        self.verdicts = verdicts;
        self
    }

    pub fn final_label(mut self, label: &'a Label) -> Self {
        self.final_label = Some(label);
        self
    }
}

fn role_directive(profile: &AgentProfile) -> String {
    match profile.role {
        AgentRole::Student => format!(
            "You are {}, a university student of {} on a panel that reviews potential hate incidents reported by school teachers. Analyse each case independently from the perspective of your discipline.",
            profile.agent_id, profile.discipline
        ),
        AgentRole::Manager => format!(
            "You are {}, an {} who facilitates a panel of student analysts reviewing potential hate incidents reported by school teachers. You aggregate their insights, resolve conflicts between them and refine recommendations for intervention.",
            profile.agent_id, profile.discipline
        ),
        AgentRole::Advisor => format!(
            "You are {}, an advisor who examines potential hate incidents through a {}, considering how cultural background and lived experience shape the interpretation of potentially hateful content.",
            profile.agent_id,
            profile.cultural_lens.as_deref().unwrap_or_default()
        ),
    }
}

fn context_block(contexts: &[RetrievedChunk]) -> String {
    let mut block = String::from("<<<CONTEXT\n");
    for c in contexts {
        let _ = writeln!(block, "[{}] {} (source: {})", c.rank, c.chunk_id, c.title);
        let _ = writeln!(block, "{}", c.text);
    }
    block.push_str("CONTEXT>>>");
    block
}

fn describe_incident(out: &mut String, incident: &Incident) {
    let _ = writeln!(out, "Incident:\n\"\"\"\n{}\n\"\"\"", incident.text);
    if let Some(ctx) = &incident.context {
        let _ = writeln!(out, "Circumstances reported by the teacher: {ctx}");
    }
}

/// Assembles the system and user prompt for `profile` performing `task`.
pub fn build_prompt(
    profile: &AgentProfile,
    task: Task,
    incident: &Incident,
    inputs: &PromptInputs<'_>,
) -> Result<PromptBundle, PersonaError> {
    if !task.allowed_for(profile.role) {
        return Err(PersonaError::RoleTaskMismatch {
            role: profile.role,
            task,
        });
    }
    let system_prompt = format!("{}\n\nBackground:\n{}", role_directive(profile), profile.backstory);

    let mut user = String::new();
    describe_incident(&mut user, incident);
    user.push('\n');
    match task {
        Task::ClassifyExplicit => {
            user.push_str("Task: decide whether the text above is explicit hate speech, that is, content that attacks or demeans a person or group on the basis of a protected characteristic.\n");
        }
        Task::ClassifyImplicit => {
            user.push_str("Task: the text above contains implicit hate speech. Classify which implicit category it belongs to: grievance (framing a majority group as victimised), incitement (promoting hateful groups or action), stereotypes (associating a group with negative traits), inferiority (implying a group is lesser), irony (sarcasm or humour that demeans), threats (veiled or indirect intimidation) or other.\n");
        }
        Task::AnalyzeIncident if profile.role == AgentRole::Student => {
            user.push_str("Task: a teacher reported this incident. Judge whether it constitutes hate speech, explaining its nature, who is targeted and how the context shapes its interpretation.\n");
        }
        Task::AnalyzeIncident => {
            let label = inputs
                .final_label
                .ok_or(PersonaError::MissingInput(task, "the panel's final label"))?;
            let _ = writeln!(user, "The panel concluded: {label}.");
            list_verdicts(&mut user, inputs.verdicts);
            user.push_str("Task: advise the teacher. Estimate the risk that the situation escalates and propose concrete intervention strategies the teacher can apply in school.\n");
        }
        Task::Aggregate => {
            if inputs.verdicts.is_empty() {
                return Err(PersonaError::MissingInput(task, "student verdicts"));
            }
            list_verdicts(&mut user, inputs.verdicts);
            user.push_str("Task: weigh the students' analyses, resolve any disagreement, and give the panel's final judgment. You may overrule the majority when the evidence supports it.\n");
        }
        Task::Advise => {
            if let Some(label) = inputs.final_label {
                let _ = writeln!(user, "The panel's current judgment: {label}.");
            }
            user.push_str("Task: explain how this incident may be perceived from your cultural perspective and what the teacher should keep in mind when responding. Answer in at most three sentences.\n");
        }
    }
    user.push('\n');
    match task {
        Task::ClassifyExplicit | Task::ClassifyImplicit | Task::Aggregate => {
            user.push_str(&verdict_format_instruction(inputs.schema));
        }
        Task::AnalyzeIncident if profile.role == AgentRole::Student => {
            user.push_str(&verdict_format_instruction(inputs.schema));
        }
        Task::AnalyzeIncident => user.push_str(crate::gateway::SYNTHESIS_FORMAT_INSTRUCTION),
        Task::Advise => user.push_str("Respond with the advisory note only."),
    }

    let (context_block, context_ids) = if inputs.contexts.is_empty() {
        (None, Vec::new())
    } else {
        let block = context_block(inputs.contexts);
        user.push_str("\n\nReference material retrieved for this case:\n");
        user.push_str(&block);
        (
            Some(block),
            inputs.contexts.iter().map(|c| c.chunk_id.clone()).collect(),
        )
    };
    Ok(PromptBundle {
        system_prompt,
        user_prompt: user,
        context_block,
        context_ids,
    })
}

fn list_verdicts(out: &mut String, verdicts: &[Verdict]) {
    if verdicts.is_empty() {
        return;
    }
    out.push_str("Independent analyses from the student panel:\n");
    for v in verdicts {
        let _ = writeln!(
            out,
            "- {}: label: {}; confidence: {}; rationale: {}",
            v.agent_id, v.label, v.confidence, v.rationale
        );
    }
}

/// Prompt for a teacher's follow-up question about a finished report.
pub fn build_follow_up_prompt(
    manager: &AgentProfile,
    incident_text: &str,
    report: &AnalysisReport,
    question: &str,
) -> Result<PromptBundle, PersonaError> {
    if manager.role != AgentRole::Manager {
        return Err(PersonaError::RoleTaskMismatch {
            role: manager.role,
            task: Task::AnalyzeIncident,
        });
    }
    let system_prompt = format!("{}\n\nBackground:\n{}", role_directive(manager), manager.backstory);
    let mut user = String::new();
    let _ = writeln!(user, "Incident:\n\"\"\"\n{incident_text}\n\"\"\"");
    let _ = writeln!(user, "Panel judgment: {} (escalation risk: {}).", report.final_label, report.escalation_risk);
    if let Some(r) = &report.manager_rationale {
        let _ = writeln!(user, "Your rationale: {r}");
    }
    list_verdicts(&mut user, &report.agent_verdicts);
    if !report.interventions.is_empty() {
        user.push_str("Recommended interventions:\n");
        for (i, s) in report.interventions.iter().enumerate() {
            let _ = writeln!(user, "{}. {s}", i + 1);
        }
    }
    for note in &report.advisory_notes {
        let _ = writeln!(user, "Advisory note: {note}");
    }
    let _ = write!(
        user,
        "\nThe teacher asks: {question}\nAnswer the teacher directly and practically in a few sentences."
    );
    Ok(PromptBundle {
        system_prompt,
        user_prompt: user,
        context_block: None,
        context_ids: Vec::new(),
    })
}
