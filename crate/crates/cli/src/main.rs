//! `arise`: build retrieval indexes, run benchmark evaluations, analyse a
//! single incident, or serve the session API.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod settings;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use arise_core::domain::{validate_incident, AnalysisReport, DomainError};
use arise_core::eval::{self, Dataset, DatasetExample, EvalConfig, Evaluand};
use arise_core::gateway::{
    Gateway, HttpBackend, RateLimiter, ScriptedBackend, DEFAULT_EVAL_TEMPERATURE, DEFAULT_INTERACTIVE_TEMPERATURE,
};
use arise_core::orchestrator::{write_trace_jsonl, EngineSettings, NoopObserver, PanelConfig, PanelEngine, PanelMode, PanelTask};
use arise_core::par::ExecPolicy;
use arise_core::retrieval::{load_corpus_dir, Bm25Index, IndexBuilder, RetrievalError, Retriever, DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP};
use clap::{Args, Parser, Subcommand};
use settings::{BackendKind, Layer, Settings, Switch};

#[derive(Debug, Parser)]
#[command(name = "arise", version, about = "Persona-panel analysis of school hate incidents")]
struct Cli {
    /// JSON settings file; flags override it, it overrides ARISE_* variables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a BM25 index from a directory of .md/.txt documents.
    Ingest(IngestArgs),
    /// Score agent columns on a benchmark sample.
    Eval(EvalArgs),
    /// Analyse one incident and print the report.
    Analyze(AnalyzeArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
    chunk_size: usize,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    overlap: usize,
}

#[derive(Debug, Args, Default)]
struct EngineArgs {
    /// `scripted` answers from --script; for eval without --script it
    /// answers with each example's gold label.
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Script file: {"scripts": [{"contains": "...", "response": "..."}]}.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable that holds the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    requests_per_minute: Option<u32>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// BM25 index written by `arise ingest`.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    rag_k: Option<usize>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<ExecPolicy>,
}

fn parse_policy(raw: &str) -> Result<ExecPolicy, String> {
    match raw {
        "parallel" => Ok(ExecPolicy::Parallel),
        "sequential" => Ok(ExecPolicy::Sequential),
        _ => Err("expected parallel or sequential".into()),
    }
}

fn parse_mode(raw: &str) -> Result<PanelMode, String> {
    match raw {
        "single" => Ok(PanelMode::Single),
        "multi" => Ok(PanelMode::Multi),
        _ => Err("expected single or multi".into()),
    }
}

#[derive(Debug, Args)]
struct PanelArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PanelMode>,
    #[arg(long, value_enum)]
    rag: Option<Switch>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_dataset)]
    kind: Dataset,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), default_value_t = 100)]
    n: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "eval-output")]
    out: PathBuf,
    /// Comma-separated subset of psychology,pedagogy,cognitive-science,mixture.
    #[arg(long, value_delimiter = ',', value_parser = parse_evaluand)]
    columns: Option<Vec<Evaluand>>,
    /// HateXplain divisions file; use with --split.
    #[arg(long, requires = "split")]
    split_file: Option<PathBuf>,
    #[arg(long, requires = "split_file")]
    split: Option<String>,
    /// Upper bound on examples processed at once.
    #[arg(long)]
    parallelism: Option<usize>,
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

fn parse_dataset(raw: &str) -> Result<Dataset, String> {
    Dataset::parse(raw).ok_or_else(|| "expected hatexplain or latent-hatred".into())
}

fn parse_evaluand(raw: &str) -> Result<Evaluand, String> {
    Evaluand::parse(raw).ok_or_else(|| format!("unknown column {raw:?}"))
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    text: String,
    #[arg(long)]
    context: Option<String>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Also write the report JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the call trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value = "arise-state")]
    state: PathBuf,
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn settings_for(config: Option<&Path>, engine: &EngineArgs, panel: Option<&PanelArgs>, seed: Option<u64>, parallelism: Option<usize>) -> Result<Settings, CliError> {
    let env = Layer::from_env(|k| std::env::var(k).ok()).map_err(usage)?;
    let file = match config {
        Some(p) => Layer::from_file(p).map_err(usage)?,
        None => Layer::default(),
    };
    let flags = Layer {
        backend: engine.backend,
        script: engine.script.clone(),
        model: engine.model.clone(),
        endpoint: engine.endpoint.clone(),
        api_key_env: engine.api_key_env.clone(),
        temperature: engine.temperature,
        max_tokens: engine.max_tokens,
        requests_per_minute: engine.requests_per_minute,
        max_retries: engine.max_retries,
        timeout_secs: engine.timeout_secs,
        mode: panel.and_then(|p| p.mode),
        rag: panel.and_then(|p| p.rag).map(Switch::is_on),
        rag_k: engine.rag_k,
        index: engine.index.clone(),
        seed,
        policy: engine.policy,
        parallelism,
        escalation_high: None,
        escalation_medium: None,
    };
    Ok(Settings::resolve(flags.over(file.over(env))))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Eval(a) => {
            let s = settings_for(config, &a.engine, Some(&a.panel), a.seed, a.parallelism)?;
            run_eval(a, s)
        }
        Command::Analyze(a) => {
            let s = settings_for(config, &a.engine, Some(&a.panel), None, None)?;
            analyze(a, s)
        }
        Command::Serve(a) => {
            let s = settings_for(config, &a.engine, Some(&a.panel), None, None)?;
            serve(a, s)
        }
    }
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let mut builder = IndexBuilder::try_new(a.chunk_size, a.overlap).map_err(|e| usage(e.to_string()))?;
    let docs = match load_corpus_dir(&a.corpus) {
        Ok(d) => d,
        Err(RetrievalError::Unreadable(offenders)) => {
            let list: Vec<String> = offenders.iter().map(|(p, e)| format!("  {}: {e}", p.display())).collect();
            return Err(CliError::Runtime(anyhow::anyhow!("unreadable documents:\n{}", list.join("\n"))));
        }
        Err(e) => return Err(CliError::Runtime(e.into())),
    };
    for d in docs {
        builder.ingest(d).context("ingesting document")?;
    }
    let index = builder.publish();
    index.save(&a.index).context("writing index")?;
    println!("{}", index.stats());
    Ok(())
}

fn load_index(path: &Path) -> Result<Arc<dyn Retriever>, CliError> {
    let index = Bm25Index::load(path).with_context(|| format!("loading index {}", path.display()))?;
    Ok(Arc::new(index))
}

fn scripted_from_file(path: &Path) -> Result<ScriptedBackend, CliError> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading script {}", path.display()))?;
    ScriptedBackend::from_script_file(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn gateway(s: &Settings, scripted: Option<ScriptedBackend>) -> Result<Gateway, CliError> {
    match (s.backend, scripted) {
        (BackendKind::Scripted, Some(b)) => Ok(Gateway::new(b)),
        (BackendKind::Scripted, None) => match &s.script {
            Some(p) => Ok(Gateway::new(scripted_from_file(p)?)),
            None => Err(usage("--backend scripted needs --script")),
        },
        (BackendKind::Http, _) => {
            let backend = HttpBackend::new(s.backend_config.clone()).map_err(|e| usage(e.to_string()))?;
            let limiter = Arc::new(RateLimiter::per_minute(s.backend_config.requests_per_minute));
            Ok(Gateway::new(backend).with_limiter(limiter, false))
        }
    }
}

fn engine(s: &Settings, gateway: Gateway, retriever: Option<Arc<dyn Retriever>>, default_temperature: f64) -> PanelEngine {
    PanelEngine::new(
        gateway,
        retriever,
        EngineSettings {
            model: s.model.clone(),
            temperature: s.temperature.unwrap_or(default_temperature),
            max_tokens: s.max_tokens,
            policy: s.policy,
        },
    )
}

fn run_eval(a: EvalArgs, s: Settings) -> Result<(), CliError> {
    let loaded = match a.kind {
        Dataset::Hatexplain => eval::load_hatexplain(&a.dataset),
        Dataset::LatentHatred => eval::load_latent_hatred(&a.dataset),
    }
    .map_err(|e| CliError::Runtime(e.into()))?;
    if loaded.dropped_no_majority > 0 {
        eprintln!("note: {} posts without a majority label were dropped", loaded.dropped_no_majority);
    }
    if loaded.unknown_classes > 0 {
        eprintln!("note: {} rows had unknown classes and were mapped to other", loaded.unknown_classes);
    }
    let mut examples: Vec<DatasetExample> = loaded.examples;
    if let (Some(file), Some(split)) = (&a.split_file, &a.split) {
        examples = eval::filter_split(examples, file, split).map_err(|e| CliError::Runtime(e.into()))?;
    }
    if examples.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("dataset {} has no usable examples", a.dataset.display())));
    }
    let retriever = match (s.rag, &s.index) {
        (true, Some(p)) => Some(load_index(p)?),
        (true, None) => return Err(usage("--rag on needs --index (or use --rag off)")),
        (false, _) => None,
    };
    let scripted = match (s.backend, &s.script) {
        (BackendKind::Scripted, None) => Some(eval::oracle_backend(&examples, &BTreeSet::new())),
        _ => None,
    };
    let engine = engine(&s, gateway(&s, scripted)?, retriever, DEFAULT_EVAL_TEMPERATURE);
    let mut config = EvalConfig::new(a.kind, s.mode, s.rag);
    config.sample_size = a.n as usize;
    config.seed = s.seed;
    config.rag_k = s.rag_k;
    config.parallelism = s.parallelism;
    if let Some(cols) = a.columns {
        config.columns = cols;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    let result = eval::run_eval(&config, &engine, &examples).map_err(|e| CliError::Runtime(e.into()))?;
    eval::write_outputs(&result, &a.out).map_err(|e| CliError::Runtime(e.into()))?;
    if !result.predictions.is_empty() {
        let table = eval::render_table(std::slice::from_ref(&result)).map_err(|e| CliError::Runtime(e.into()))?;
        print!("{}", table.text);
    }
    println!("outputs written to {}", a.out.display());
    match result.failure {
        None => Ok(()),
        Some(f) => Err(CliError::Runtime(anyhow::anyhow!(
            "evaluation stopped early ({f}); {} partial predictions saved",
            result.predictions.len()
        ))),
    }
}

fn optional_index(s: &Settings) -> Result<Option<Arc<dyn Retriever>>, CliError> {
    match (s.rag, &s.index) {
        (true, Some(p)) => Ok(Some(load_index(p)?)),
        (true, None) => {
            eprintln!("note: no --index given, analysing without retrieved context");
            Ok(None)
        }
        (false, _) => Ok(None),
    }
}

fn panel_config(s: &Settings) -> PanelConfig {
    let mut c = PanelConfig::new(s.mode, s.rag, PanelTask::AnalyzeIncident);
    c.rag_k = s.rag_k;
    c.seed = s.seed;
    c.thresholds = s.thresholds;
    c
}

fn analyze(a: AnalyzeArgs, s: Settings) -> Result<(), CliError> {
    let incident = validate_incident(&a.text, a.context.as_deref()).map_err(|e| match e {
        DomainError::EmptyIncident => usage("--text must not be empty"),
        other => usage(other.to_string()),
    })?;
    let engine = engine(&s, gateway(&s, None)?, optional_index(&s)?, DEFAULT_INTERACTIVE_TEMPERATURE);
    let config = panel_config(&s);
    config.validate().map_err(|e| usage(e.to_string()))?;
    let outcome = engine
        .analyze_incident(&incident, &config, &NoopObserver)
        .context("analysis failed")?;
    let json = serde_json::to_string_pretty(&outcome.report).context("serializing report")?;
    if let Some(path) = &a.out {
        std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.trace {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_trace_jsonl(&outcome.trace, std::io::BufWriter::new(file)).context("writing trace")?;
    }
    if a.json {
        println!("{json}");
    } else {
        print!("{}", format_report(&outcome.report));
    }
    Ok(())
}

fn format_report(r: &AnalysisReport) -> String {
    let mut out = format!("Final label: {}\nEscalation risk: {}\n", r.final_label, r.escalation_risk);
    if let Some(m) = &r.manager_rationale {
        out.push_str(&format!("Manager rationale: {m}\n"));
    }
    out.push_str("Agent verdicts:\n");
    for v in &r.agent_verdicts {
        out.push_str(&format!("  - {}: {} ({:.2}) {}\n", v.agent_id, v.label, v.confidence, v.rationale));
        if !v.context_ids.is_empty() {
            out.push_str(&format!("    sources: {}\n", v.context_ids.join(", ")));
        }
    }
    if !r.advisory_notes.is_empty() {
        out.push_str("Advisory notes:\n");
        for n in &r.advisory_notes {
            out.push_str(&format!("  - {n}\n"));
        }
    }
    if !r.interventions.is_empty() {
        out.push_str("Interventions:\n");
        for (i, s) in r.interventions.iter().enumerate() {
            out.push_str(&format!("  {}. {s}\n", i + 1));
        }
    }
    out
}

fn serve(a: ServeArgs, s: Settings) -> Result<(), CliError> {
    let engine = engine(&s, gateway(&s, None)?, optional_index(&s)?, DEFAULT_INTERACTIVE_TEMPERATURE);
    let defaults = panel_config(&s);
    defaults.validate().map_err(|e| usage(e.to_string()))?;
    let service = arise_service::Service::open(&a.state, engine, defaults).context("opening state directory")?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("cannot bind {}", a.addr))?;
        println!("listening on {}", listener.local_addr().context("reading bound address")?);
        service.serve(listener, shutdown_signal()).await.context("server error")
    });
    // Abandoned panels keep running on blocking threads; their output is already discarded.
    runtime.shutdown_timeout(Duration::from_secs(2));
    result.map_err(CliError::Runtime)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
