//! Benchmark evaluation: dataset loaders, seeded sampling, accuracy and
//! RAG-delta metrics, and the percentage table.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Incident, IncidentSource, Label, LabelSchema};
use crate::gateway::ScriptedBackend;
use crate::orchestrator::{NoopObserver, OrchestratorError, PanelConfig, PanelEngine, PanelMode, PanelTask};
use crate::par;
use crate::personas::{builtin_profiles, AgentRole};
use crate::retrieval::DEFAULT_TOP_K;

pub const DEFAULT_SAMPLE_SIZE: usize = 100;
pub const DEFAULT_SEED: u64 = 20_250_101;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no predictions to score")]
    EmptyPredictions,
    #[error("results are not comparable: {0}")]
    ConfigMismatch(String),
    #[error("results cover different column sets")]
    InconsistentColumns,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    Hatexplain,
    LatentHatred,
}

impl Dataset {
    pub fn schema(self) -> Arc<LabelSchema> {
        self.task().schema()
    }

    pub fn task(self) -> PanelTask {
        match self {
            Dataset::Hatexplain => PanelTask::ClassifyExplicit,
            Dataset::LatentHatred => PanelTask::ClassifyImplicit,
        }
    }

    /// Row caption used in rendered tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Dataset::Hatexplain => "HateXplain",
            Dataset::LatentHatred => "Implicit-Hate",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "hatexplain" => Some(Dataset::Hatexplain),
            "latent-hatred" | "latent_hatred" | "implicit-hate" => Some(Dataset::LatentHatred),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetExample {
    pub example_id: String,
    pub text: String,
    pub gold: Label,
    pub dataset: Dataset,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedDataset {
    pub examples: Vec<DatasetExample>,
    /// Posts dropped because annotators had no strict majority.
    pub dropped_no_majority: usize,
    /// Rows whose class string was not recognised and became the catch-all class.
    pub unknown_classes: usize,
}

#[derive(Deserialize)]
struct HatexplainPost {
    #[serde(default)]
    post_tokens: Vec<String>,
    #[serde(default)]
    annotators: Vec<HatexplainAnnotator>,
}

#[derive(Deserialize)]
struct HatexplainAnnotator {
    label: String,
}

/// Loads the HateXplain JSON layout (post id → post record). The gold label
/// is the strict-majority annotator label mapped through the explicit
/// schema's aliases. Examples come out sorted by post id.
pub fn load_hatexplain(path: &Path) -> Result<LoadedDataset, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_hatexplain(&text)
}

pub fn parse_hatexplain(json: &str) -> Result<LoadedDataset, EvalError> {
    let posts: BTreeMap<String, serde_json::Value> = serde_json::from_str(json).map_err(|e| EvalError::Parse {
        location: format!("line {}", e.line()),
        message: e.to_string(),
    })?;
    let schema = LabelSchema::explicit();
    let mut out = LoadedDataset::default();
    for (post_id, raw) in posts {
        let perr = |message: String| EvalError::Parse {
            location: format!("post {post_id}"),
            message,
        };
        let post: HatexplainPost = serde_json::from_value(raw).map_err(|e| perr(e.to_string()))?;
        if post.post_tokens.is_empty() {
            return Err(perr("post_tokens is empty".into()));
        }
        if post.annotators.is_empty() {
            return Err(perr("no annotators".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for a in &post.annotators {
            *counts.entry(a.label.trim().to_lowercase()).or_default() += 1;
        }
        let majority = counts
            .iter()
            .find(|(_, &n)| 2 * n > post.annotators.len())
            .map(|(l, _)| l.clone());
        let Some(raw_label) = majority else {
            out.dropped_no_majority += 1;
            continue;
        };
        let gold = schema.parse_label(&raw_label).map_err(|e| perr(e.to_string()))?;
        out.examples.push(DatasetExample {
            example_id: post_id.clone(),
            text: post.post_tokens.join(" "),
            gold,
            dataset: Dataset::Hatexplain,
        });
    }
    Ok(out)
}

/// Keeps only the examples listed under `split` in a HateXplain
/// divisions file (`{"train": [...], "val": [...], "test": [...]}`).
pub fn filter_split(examples: Vec<DatasetExample>, divisions: &Path, split: &str) -> Result<Vec<DatasetExample>, EvalError> {
    let text = fs::read_to_string(divisions).map_err(io_err(divisions))?;
    let map: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).map_err(|e| EvalError::Parse {
        location: divisions.display().to_string(),
        message: e.to_string(),
    })?;
    let ids: BTreeSet<&String> = map
        .get(split)
        .ok_or_else(|| EvalError::InvalidConfig(format!("split {split:?} not in divisions file")))?
        .iter()
        .collect();
    Ok(examples.into_iter().filter(|e| ids.contains(&e.example_id)).collect())
}

/// Loads a Latent Hatred tab-separated file with `post` and `implicit_class`
/// columns. Unrecognised classes map to the catch-all class with a warning.
/// Example ids are `lh-` followed by the zero-padded line number.
pub fn load_latent_hatred(path: &Path) -> Result<LoadedDataset, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_latent_hatred(&text)
}

pub fn parse_latent_hatred(tsv: &str) -> Result<LoadedDataset, EvalError> {
    let schema = LabelSchema::implicit();
    let mut out = LoadedDataset::default();
    for (i, line) in tsv.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (post, class) = match (cols.next(), cols.next()) {
            (Some(p), Some(c)) => (p.trim(), c.trim()),
            _ => {
                return Err(EvalError::Parse {
                    location: format!("line {line_no}"),
                    message: "expected post<TAB>implicit_class".into(),
                })
            }
        };
        if line_no == 1 && class.eq_ignore_ascii_case("implicit_class") {
            continue;
        }
        if post.is_empty() {
            return Err(EvalError::Parse {
                location: format!("line {line_no}"),
                message: "empty post".into(),
            });
        }
        let gold = match schema.parse_label(class) {
            Ok(l) => l,
            Err(_) => {
                tracing::warn!(line = line_no, class, "unknown implicit class, using catch-all");
                out.unknown_classes += 1;
                schema.fallback_label()
            }
        };
        out.examples.push(DatasetExample {
            example_id: format!("lh-{line_no:06}"),
            text: post.to_string(),
            gold,
            dataset: Dataset::LatentHatred,
        });
    }
    Ok(out)
}

/// Uniform sample of `n` examples without replacement.
///
/// Algorithm: a ChaCha8 generator seeded with `seed` drives a partial
/// Fisher–Yates shuffle of the index range, drawing each swap position as a
/// `u64` so results do not depend on pointer width. The first `n` shuffled
/// indices are then returned in their original order.
pub fn sample(examples: &[DatasetExample], n: usize, seed: u64) -> Vec<DatasetExample> {
    if n >= examples.len() {
        return examples.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    for i in 0..n {
        let j = rng.gen_range(i as u64..examples.len() as u64) as usize;
        idx.swap(i, j);
    }
    let mut chosen = idx[..n].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| examples[i].clone()).collect()
}

/// Fraction of exact matches.
pub fn accuracy(pairs: &[(Label, Label)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPredictions);
    }
    let schema = &pairs[0].1.schema;
    if pairs.iter().any(|(p, g)| &p.schema != schema || &g.schema != schema) {
        return Err(EvalError::ConfigMismatch("predictions mix label schemas".into()));
    }
    let correct = pairs.iter().filter(|(p, g)| p == g).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// A table column: one student persona or the panel outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evaluand {
    Psychology,
    Pedagogy,
    CognitiveScience,
    Mixture,
}

impl Evaluand {
    pub const ALL: [Evaluand; 4] = [
        Evaluand::Psychology,
        Evaluand::Pedagogy,
        Evaluand::CognitiveScience,
        Evaluand::Mixture,
    ];

    pub fn agent_id(self) -> Option<&'static str> {
        match self {
            Evaluand::Psychology => Some("psychology-student"),
            Evaluand::Pedagogy => Some("pedagogy-student"),
            Evaluand::CognitiveScience => Some("cognitive-science-student"),
            Evaluand::Mixture => None,
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            Evaluand::Psychology => "Psychology student",
            Evaluand::Pedagogy => "Pedagogy student",
            Evaluand::CognitiveScience => "Cognitive science student",
            Evaluand::Mixture => "Mixture of agents",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "psychology" => Some(Evaluand::Psychology),
            "pedagogy" => Some(Evaluand::Pedagogy),
            "cognitive-science" | "cognitive_science" => Some(Evaluand::CognitiveScience),
            "mixture" => Some(Evaluand::Mixture),
            _ => None,
        }
    }
}

impl fmt::Display for Evaluand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

fn default_sample_size() -> usize {
    DEFAULT_SAMPLE_SIZE
}

fn default_columns() -> Vec<Evaluand> {
    Evaluand::ALL.to_vec()
}

fn default_rag_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub dataset: Dataset,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    pub seed: u64,
    pub mode: PanelMode,
    pub use_rag: bool,
    #[serde(default = "default_columns")]
    pub columns: Vec<Evaluand>,
    #[serde(default = "default_rag_k")]
    pub rag_k: usize,
    /// Upper bound on concurrently processed examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
}

impl EvalConfig {
    pub fn new(dataset: Dataset, mode: PanelMode, use_rag: bool) -> Self {
        Self {
            dataset,
            sample_size: DEFAULT_SAMPLE_SIZE,
            seed: DEFAULT_SEED,
            mode,
            use_rag,
            columns: default_columns(),
            rag_k: DEFAULT_TOP_K,
            parallelism: None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.sample_size == 0 {
            return Err(EvalError::InvalidConfig("sample_size must be at least 1".into()));
        }
        if self.columns.is_empty() {
            return Err(EvalError::InvalidConfig("at least one column is required".into()));
        }
        let unique: BTreeSet<_> = self.columns.iter().collect();
        if unique.len() != self.columns.len() {
            return Err(EvalError::InvalidConfig("duplicate columns".into()));
        }
        Ok(())
    }

    fn panel_config(&self) -> PanelConfig {
        let mut panel = PanelConfig::new(self.mode, self.use_rag, self.dataset.task());
        panel.profiles = builtin_profiles()
            .into_iter()
            .filter(|p| match p.role {
                AgentRole::Student => true,
                AgentRole::Manager => self.mode == PanelMode::Multi,
                AgentRole::Advisor => false,
            })
            .collect();
        panel.seed = self.seed;
        panel.rag_k = self.rag_k;
        panel
    }
}

/// One scored row, keyed by (example_id, evaluand).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub evaluand: Evaluand,
    pub predicted: String,
    pub gold: String,
}

impl Prediction {
    pub fn is_correct(&self) -> bool {
        self.predicted == self.gold
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    /// Accuracy in percent, exact for any integer counts.
    pub fn percent(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }

    /// Percentage rounded half-up, computed in integers.
    pub fn rounded_percent(self) -> u64 {
        if self.total == 0 {
            return 0;
        }
        let (c, t) = (self.correct as u64, self.total as u64);
        (200 * c + t) / (2 * t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunResult {
    pub config: EvalConfig,
    pub per_column_accuracy: BTreeMap<Evaluand, f64>,
    pub per_column_counts: BTreeMap<Evaluand, Tally>,
    /// Accuracy per gold class, over the mixture column when it is present
    /// and over all columns otherwise.
    pub per_class_accuracy: BTreeMap<String, f64>,
    pub predictions: Vec<Prediction>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl EvalRunResult {
    /// Builds metrics from predictions. Predictions are sorted by
    /// (example_id, evaluand) so the result does not depend on arrival order.
    pub fn from_predictions(config: EvalConfig, mut predictions: Vec<Prediction>) -> Self {
        predictions.sort();
        let mut counts: BTreeMap<Evaluand, Tally> = BTreeMap::new();
        for p in &predictions {
            let t = counts.entry(p.evaluand).or_default();
            t.total += 1;
            t.correct += usize::from(p.is_correct());
        }
        let class_source: Vec<&Prediction> = if config.columns.contains(&Evaluand::Mixture) {
            predictions.iter().filter(|p| p.evaluand == Evaluand::Mixture).collect()
        } else {
            predictions.iter().collect()
        };
        let mut by_class: BTreeMap<String, Tally> = BTreeMap::new();
        for p in class_source {
            let t = by_class.entry(p.gold.clone()).or_default();
            t.total += 1;
            t.correct += usize::from(p.is_correct());
        }
        Self {
            per_column_accuracy: counts.iter().map(|(k, t)| (*k, t.accuracy())).collect(),
            per_column_counts: counts,
            per_class_accuracy: by_class.into_iter().map(|(k, t)| (k, t.accuracy())).collect(),
            config,
            predictions,
            complete: true,
            failure: None,
            wall_time: Duration::ZERO,
        }
    }

    /// Recomputes metrics from the stored predictions.
    pub fn recompute(&self) -> Self {
        let mut fresh = Self::from_predictions(self.config.clone(), self.predictions.clone());
        fresh.complete = self.complete;
        fresh.failure = self.failure.clone();
        fresh.wall_time = self.wall_time;
        fresh
    }

    pub fn row_caption(&self, with_mode: bool) -> String {
        let rag = if self.config.use_rag { "w/ RAG" } else { "w/o RAG" };
        let mut s = format!("{} {rag}", self.config.dataset.display_name());
        if with_mode {
            let mode = match self.config.mode {
                PanelMode::Single => "single",
                PanelMode::Multi => "multi",
            };
            s.push_str(&format!(" ({mode})"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RagDelta {
    /// Percentage-point difference per column, `with - without`.
    pub per_column: BTreeMap<Evaluand, f64>,
    pub mean: f64,
}

pub fn rag_delta(with_rag: &EvalRunResult, without_rag: &EvalRunResult) -> Result<RagDelta, EvalError> {
    let (a, b) = (&with_rag.config, &without_rag.config);
    if a.dataset != b.dataset || a.mode != b.mode || a.columns != b.columns {
        return Err(EvalError::ConfigMismatch(
            "dataset, mode and columns must match".into(),
        ));
    }
    let mut per_column = BTreeMap::new();
    for col in &a.columns {
        let w = with_rag.per_column_counts.get(col).copied().unwrap_or_default();
        let wo = without_rag.per_column_counts.get(col).copied().unwrap_or_default();
        per_column.insert(*col, w.percent() - wo.percent());
    }
    let mean = per_column.values().sum::<f64>() / per_column.len() as f64;
    Ok(RagDelta { per_column, mean })
}

/// Mean over every column delta of several comparisons.
pub fn pooled_mean_delta(deltas: &[RagDelta]) -> f64 {
    let all: Vec<f64> = deltas.iter().flat_map(|d| d.per_column.values().copied()).collect();
    if all.is_empty() {
        0.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    }
}

/// Rounds a percentage half-up to an integer, tolerating representation
/// error just below the half (0.785 × 100 is 78.49999…).
pub fn round_half_up(percent: f64) -> i64 {
    (percent + 0.5 + 1e-9).floor() as i64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTable {
    pub text: String,
    pub csv: String,
    /// Rounded percentages, one row per result.
    pub cells: Vec<Vec<u64>>,
}

/// Renders one row per result and one column per evaluand.
pub fn render_table(results: &[EvalRunResult]) -> Result<RenderedTable, EvalError> {
    let Some(first) = results.first() else {
        return Err(EvalError::EmptyPredictions);
    };
    let columns = &first.config.columns;
    if results.iter().any(|r| &r.config.columns != columns) {
        return Err(EvalError::InconsistentColumns);
    }
    let modes: BTreeSet<_> = results.iter().map(|r| r.config.mode).collect();
    let with_mode = modes.len() > 1;
    let captions: Vec<String> = results.iter().map(|r| r.row_caption(with_mode)).collect();
    let cells: Vec<Vec<u64>> = results
        .iter()
        .map(|r| {
            columns
                .iter()
                .map(|c| r.per_column_counts.get(c).copied().unwrap_or_default().rounded_percent())
                .collect()
        })
        .collect();

    let headers: Vec<&str> = columns.iter().map(|c| c.header()).collect();
    let first_width = captions.iter().map(String::len).chain([7]).max().unwrap_or(7);
    let widths: Vec<usize> = headers.iter().map(|h| h.len().max(4)).collect();
    let mut text = format!("{:<first_width$}", "Setting");
    for (h, w) in headers.iter().zip(&widths) {
        text.push_str(&format!(" | {h:>w$}"));
    }
    text.push('\n');
    text.push_str(&"-".repeat(first_width));
    for w in &widths {
        text.push_str(&format!("-+-{}", "-".repeat(*w)));
    }
    text.push('\n');
    for (caption, row) in captions.iter().zip(&cells) {
        text.push_str(&format!("{caption:<first_width$}"));
        for (v, w) in row.iter().zip(&widths) {
            let cell = format!("{v}%");
            text.push_str(&format!(" | {cell:>w$}"));
        }
        text.push('\n');
    }

    let mut csv = String::from("setting");
    for c in columns {
        csv.push(',');
        csv.push_str(&c.to_string());
    }
    csv.push('\n');
    for (caption, row) in captions.iter().zip(&cells) {
        csv.push_str(caption);
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    Ok(RenderedTable { text, csv, cells })
}

/// Samples `examples` (sorted by id first) and scores every configured
/// column. A gateway failure stops the run; the predictions gathered so far
/// are returned with `complete = false`.
pub fn run_eval(config: &EvalConfig, engine: &PanelEngine, examples: &[DatasetExample]) -> Result<EvalRunResult, EvalError> {
    config.validate()?;
    let schema = config.dataset.schema();
    if let Some(bad) = examples.iter().find(|e| e.dataset != config.dataset || !schema.conforms(&e.gold)) {
        return Err(EvalError::ConfigMismatch(format!(
            "example {} does not belong to {}",
            bad.example_id,
            config.dataset.display_name()
        )));
    }
    let mut sorted = examples.to_vec();
    sorted.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let chosen = sample(&sorted, config.sample_size, config.seed);
    let panel = config.panel_config();
    panel.validate()?;

    let started = Instant::now();
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<String>> = Mutex::new(None);
    let policy = engine.settings().policy;
    let rows: Vec<Option<Vec<Prediction>>> = par::with_threads(policy, config.parallelism, || {
        par::map(policy, &chosen, |example| {
            if abort.load(Ordering::SeqCst) {
                return None;
            }
            match score_example(config, engine, &panel, example) {
                Ok(rows) => Some(rows),
                Err(e) => {
                    abort.store(true, Ordering::SeqCst);
                    let mut f = failure.lock().unwrap_or_else(|p| p.into_inner());
                    f.get_or_insert_with(|| format!("example {}: {e}", example.example_id));
                    None
                }
            }
        })
    });
    let predictions: Vec<Prediction> = rows.into_iter().flatten().flatten().collect();
    let mut result = EvalRunResult::from_predictions(config.clone(), predictions);
    result.failure = failure.into_inner().unwrap_or_else(|p| p.into_inner());
    result.complete = result.failure.is_none();
    result.wall_time = started.elapsed();
    if let Some(f) = &result.failure {
        tracing::error!(failure = %f, "evaluation aborted");
    }
    Ok(result)
}

fn score_example(
    config: &EvalConfig,
    engine: &PanelEngine,
    panel: &PanelConfig,
    example: &DatasetExample,
) -> Result<Vec<Prediction>, OrchestratorError> {
    let incident = Incident::with_id(example.example_id.clone(), &example.text, None, IncidentSource::Dataset)?;
    let result = engine.run_panel(&incident, panel, &NoopObserver)?;
    let mut rows = Vec::with_capacity(config.columns.len());
    for col in &config.columns {
        let predicted = match col.agent_id() {
            Some(id) => result
                .verdicts
                .iter()
                .find(|v| v.agent_id == id)
                .map(|v| v.label.class.clone())
                .unwrap_or_default(),
            None => result.final_label.class.clone(),
        };
        rows.push(Prediction {
            example_id: example.example_id.clone(),
            evaluand: *col,
            predicted,
            gold: example.gold.class.clone(),
        });
    }
    Ok(rows)
}

/// Scripted backend that answers every classification prompt with the gold
/// label of the example whose text it contains. Examples listed in `wrong`
/// get the next class in schema order instead.
pub fn oracle_backend(examples: &[DatasetExample], wrong: &BTreeSet<String>) -> ScriptedBackend {
    let mut entries: Vec<(String, String)> = examples
        .iter()
        .map(|e| {
            let class = if wrong.contains(&e.example_id) {
                let schema = e.dataset.schema();
                let next = (e.gold.class_index + 1) % schema.len();
                schema.classes()[next].clone()
            } else {
                e.gold.class.clone()
            };
            (e.text.clone(), class)
        })
        .collect();
    // Longest text first, so an example never matches a shorter text it contains.
    entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    let lookup: HashMap<String, String> = entries.iter().cloned().collect();
    let order: Vec<String> = entries.into_iter().map(|(t, _)| t).collect();
    let mut backend = ScriptedBackend::new();
    backend.register_fn(move |prompt| {
        order.iter().find(|t| prompt.contains(t.as_str())).map(|t| {
            format!(
                "label: {}\nconfidence: 1.0\nrationale: matches the reference annotation",
                lookup[t]
            )
        })
    });
    backend
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RESULT_FILE: &str = "result.json";
pub const TABLE_TEXT_FILE: &str = "table.txt";
pub const TABLE_CSV_FILE: &str = "table.csv";
pub const TIMING_FILE: &str = "timing.json";

/// Writes predictions, the result, the one-row table and timing into `dir`.
pub fn write_outputs(result: &EvalRunResult, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(PREDICTIONS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    for p in &result.predictions {
        serde_json::to_writer(&mut w, p).map_err(|e| io_err(&path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(RESULT_FILE);
    let json = serde_json::to_string_pretty(result).map_err(|e| io_err(&path)(e.into()))?;
    fs::write(&path, json).map_err(io_err(&path))?;

    if !result.predictions.is_empty() {
        let table = render_table(std::slice::from_ref(result))?;
        let path = dir.join(TABLE_TEXT_FILE);
        fs::write(&path, &table.text).map_err(io_err(&path))?;
        let path = dir.join(TABLE_CSV_FILE);
        fs::write(&path, &table.csv).map_err(io_err(&path))?;
    }

    let path = dir.join(TIMING_FILE);
    let timing = serde_json::json!({ "wall_time_ms": result.wall_time.as_millis() as u64 });
    fs::write(&path, timing.to_string()).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_result(dir: &Path) -> Result<EvalRunResult, EvalError> {
    let path = dir.join(RESULT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}
