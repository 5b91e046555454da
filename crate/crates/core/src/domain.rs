//! Shared domain types: incidents, label schemas, verdicts and reports.
//!
//! Everything here is an immutable value after construction and can be
//! shared freely between threads.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("unknown label {raw:?} for schema {schema}")]
    UnknownLabel { raw: String, schema: String },
    #[error("incident text is empty")]
    EmptyIncident,
    #[error("invalid label schema {name}: {reason}")]
    InvalidSchema { name: String, reason: String },
    #[error("verdicts mix label schemas ({0} vs {1})")]
    MixedSchemas(String, String),
    #[error("invalid report: {0}")]
    InvalidReport(String),
}

// ---------------------------------------------------------------------------
// Incidents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IncidentId(pub String);

impl IncidentId {
    pub fn fresh() -> Self {
        Self(uuid::Uuid::new_v4().simple().to_string())
    }
}

impl fmt::Display for IncidentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncidentSource {
    TeacherSession,
    Dataset,
}

/// A description of a potentially hateful event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub id: IncidentId,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub source: IncidentSource,
    pub timestamp: DateTime<Utc>,
}

impl Incident {
    /// Builds an incident with a caller-chosen id (dataset examples keep theirs).
    pub fn with_id(
        id: impl Into<String>,
        text: &str,
        context: Option<&str>,
        source: IncidentSource,
    ) -> Result<Self, DomainError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(DomainError::EmptyIncident);
        }
        let context = context.map(str::trim).filter(|c| !c.is_empty());
        Ok(Self {
            id: IncidentId(id.into()),
            text: text.to_string(),
            context: context.map(str::to_string),
            source,
            timestamp: Utc::now(),
        })
    }

    /// Retrieval query for this incident: text followed by context.
    pub fn query(&self) -> String {
        match &self.context {
            Some(c) => format!("{} {}", self.text, c),
            None => self.text.clone(),
        }
    }
}

/// Trims and validates teacher input, assigning a fresh id and timestamp.
pub fn validate_incident(raw_text: &str, context: Option<&str>) -> Result<Incident, DomainError> {
    Incident::with_id(
        IncidentId::fresh().0,
        raw_text,
        context,
        IncidentSource::TeacherSession,
    )
}

// ---------------------------------------------------------------------------
// Label schemas
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaKind {
    ExplicitDetection,
    #[serde(rename = "implicit-7way")]
    Implicit7Way,
}

impl SchemaKind {
    fn expected_classes(self) -> usize {
        match self {
            SchemaKind::ExplicitDetection => 2,
            SchemaKind::Implicit7Way => 7,
        }
    }
}

/// On-disk schema definition.
///
/// `benign` lists the classes that do not describe hate (they need no
/// intervention); `fallback` is the class assigned when an agent answer
/// cannot be parsed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    name: String,
    kind: SchemaKind,
    classes: Vec<String>,
    #[serde(default)]
    aliases: BTreeMap<String, String>,
    #[serde(default)]
    benign: Vec<String>,
    fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSchema {
    name: String,
    kind: SchemaKind,
    classes: Vec<String>,
    // case-folded raw string -> class index
    lookup: BTreeMap<String, usize>,
    benign: Vec<usize>,
    fallback: usize,
}

fn fold(raw: &str) -> String {
    raw.trim().to_lowercase()
}

impl LabelSchema {
    pub fn from_json(json: &str) -> Result<Self, DomainError> {
        let file: SchemaFile = serde_json::from_str(json).map_err(|e| DomainError::InvalidSchema {
            name: "<unparsed>".into(),
            reason: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self, DomainError> {
        let text = std::fs::read_to_string(path).map_err(|e| DomainError::InvalidSchema {
            name: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    fn from_file(file: SchemaFile) -> Result<Self, DomainError> {
        let invalid = |reason: String| DomainError::InvalidSchema {
            name: file.name.clone(),
            reason,
        };
        if file.classes.len() != file.kind.expected_classes() {
            return Err(invalid(format!(
                "{:?} schema needs exactly {} classes, got {}",
                file.kind,
                file.kind.expected_classes(),
                file.classes.len()
            )));
        }
        let mut lookup = BTreeMap::new();
        for (i, class) in file.classes.iter().enumerate() {
            if class.trim().is_empty() {
                return Err(invalid("empty class name".into()));
            }
            if class.trim() != class || fold(class) != *class {
                return Err(invalid(format!("class {class:?} must be trimmed lowercase")));
            }
            if lookup.insert(class.clone(), i).is_some() {
                return Err(invalid(format!("duplicate class {class:?}")));
            }
        }
        let index_of = |name: &str| lookup.get(name).copied();
        let mut aliased = BTreeMap::new();
        for (raw, target) in &file.aliases {
            let idx = index_of(target).ok_or_else(|| invalid(format!("alias {raw:?} targets unknown class {target:?}")))?;
            let key = fold(raw);
            if let Some(existing) = lookup.get(&key) {
                if *existing != idx {
                    return Err(invalid(format!("alias {raw:?} shadows class {key:?}")));
                }
            }
            aliased.insert(key, idx);
        }
        let benign = file
            .benign
            .iter()
            .map(|c| index_of(c).ok_or_else(|| invalid(format!("benign class {c:?} unknown"))))
            .collect::<Result<Vec<_>, _>>()?;
        let fallback = match &file.fallback {
            Some(c) => index_of(c).ok_or_else(|| invalid(format!("fallback class {c:?} unknown")))?,
            None => file.classes.len() - 1,
        };
        for (k, v) in aliased {
            lookup.entry(k).or_insert(v);
        }
        Ok(Self {
            name: file.name,
            kind: file.kind,
            classes: file.classes,
            lookup,
            benign,
            fallback,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> SchemaKind {
        self.kind
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn label(&self, class_index: usize) -> Option<Label> {
        self.classes.get(class_index).map(|c| Label {
            schema: self.name.clone(),
            class_index,
            class: c.clone(),
        })
    }

    /// Maps a dataset or model string onto a class: case-folded, trimmed,
    /// exact against class names and the alias table.
    pub fn parse_label(&self, raw: &str) -> Result<Label, DomainError> {
        self.lookup
            .get(&fold(raw))
            .and_then(|&i| self.label(i))
            .ok_or_else(|| DomainError::UnknownLabel {
                raw: raw.to_string(),
                schema: self.name.clone(),
            })
    }

    pub fn fallback_label(&self) -> Label {
        self.label(self.fallback).expect("fallback index validated at load")
    }

    pub fn conforms(&self, label: &Label) -> bool {
        label.schema == self.name
            && self.classes.get(label.class_index).is_some_and(|c| *c == label.class)
    }

    /// Whether the label names a form of hate (and so warrants intervention).
    pub fn is_hateful(&self, label: &Label) -> bool {
        self.conforms(label) && !self.benign.contains(&label.class_index)
    }

    pub fn explicit() -> Arc<LabelSchema> {
        static SCHEMA: OnceLock<Arc<LabelSchema>> = OnceLock::new();
        SCHEMA
            .get_or_init(|| {
                Arc::new(
                    Self::from_json(include_str!("../assets/schemas/explicit-detection.json"))
                        .expect("bundled explicit schema is valid"),
                )
            })
            .clone()
    }

    pub fn implicit() -> Arc<LabelSchema> {
        static SCHEMA: OnceLock<Arc<LabelSchema>> = OnceLock::new();
        SCHEMA
            .get_or_init(|| {
                Arc::new(
                    Self::from_json(include_str!("../assets/schemas/implicit-7way.json"))
                        .expect("bundled implicit schema is valid"),
                )
            })
            .clone()
    }

    pub fn for_kind(kind: SchemaKind) -> Arc<LabelSchema> {
        match kind {
            SchemaKind::ExplicitDetection => Self::explicit(),
            SchemaKind::Implicit7Way => Self::implicit(),
        }
    }
}

/// A class of a particular schema. Only constructed through [`LabelSchema`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub schema: String,
    pub class_index: usize,
    pub class: String,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.class)
    }
}

// ---------------------------------------------------------------------------
// Verdicts and reports
// ---------------------------------------------------------------------------

/// One agent's structured judgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub agent_id: String,
    pub label: Label,
    pub confidence: f64,
    pub rationale: String,
    #[serde(default)]
    pub context_ids: Vec<String>,
}

/// Checks that all verdicts share a schema and returns its name.
pub fn common_schema(verdicts: &[Verdict]) -> Result<Option<&str>, DomainError> {
    let mut it = verdicts.iter();
    let Some(first) = it.next() else {
        return Ok(None);
    };
    for v in it {
        if v.label.schema != first.label.schema {
            return Err(DomainError::MixedSchemas(
                first.label.schema.clone(),
                v.label.schema.clone(),
            ));
        }
    }
    Ok(Some(&first.label.schema))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EscalationRisk {
    Low,
    Medium,
    High,
}

impl EscalationRisk {
    pub fn parse(raw: &str) -> Option<Self> {
        match fold(raw).as_str() {
            "low" => Some(Self::Low),
            "medium" | "moderate" => Some(Self::Medium),
            "high" => Some(Self::High),
            _ => None,
        }
    }
}

impl fmt::Display for EscalationRisk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        })
    }
}

/// Aggregated panel output handed back to the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub incident_id: IncidentId,
    pub final_label: Label,
    pub escalation_risk: EscalationRisk,
    pub interventions: Vec<String>,
    pub agent_verdicts: Vec<Verdict>,
    pub advisory_notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manager_rationale: Option<String>,
}

impl AnalysisReport {
    /// Checks the report invariants against the schema of its task.
    pub fn validate(&self, schema: &LabelSchema, multi_mode: bool) -> Result<(), DomainError> {
        let bad = |m: &str| Err(DomainError::InvalidReport(m.to_string()));
        if self.agent_verdicts.is_empty() {
            return bad("no agent verdicts");
        }
        common_schema(&self.agent_verdicts)?;
        if !schema.conforms(&self.final_label)
            || self.agent_verdicts.iter().any(|v| !schema.conforms(&v.label))
        {
            return bad("label does not conform to task schema");
        }
        if schema.is_hateful(&self.final_label) && self.interventions.is_empty() {
            return bad("hateful label without interventions");
        }
        if self.manager_rationale.is_some() != multi_mode {
            return bad("manager rationale must be present exactly in multi-agent mode");
        }
        Ok(())
    }
}
