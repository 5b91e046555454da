//! Sequential versus rayon execution of the panel and the eval loop.
//!
//! Backends sleep briefly per call to stand in for model latency.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Duration;

use arise_core::domain::{Incident, IncidentSource};
use arise_core::eval::{load_hatexplain, oracle_backend, run_eval, Dataset, EvalConfig};
use arise_core::gateway::{ChatBackend, ChatRequest, ChatResponse, Gateway, GatewayError, ScriptedBackend};
use arise_core::orchestrator::{EngineSettings, NoopObserver, PanelConfig, PanelEngine, PanelMode, PanelTask};
use arise_core::par::{self, ExecPolicy};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const CALL_LATENCY: Duration = Duration::from_micros(300);
const WORKERS: usize = 8;

struct Latency(ScriptedBackend);

impl ChatBackend for Latency {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        std::thread::sleep(CALL_LATENCY);
        self.0.complete(request)
    }
}

fn policies() -> [(&'static str, ExecPolicy); 2] {
    [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel)]
}

fn panel(c: &mut Criterion) {
    let mut scripted = ScriptedBackend::new();
    scripted.register_contains("-student,", "label: hateful\nconfidence: 0.8\nrationale: slur");
    scripted.register_contains("You are manager-professor,", "label: hateful\nconfidence: 0.8\nrationale: agreed");
    scripted.register_contains("You are advisor-", "Talk with the family.");
    scripted.register_contains("Estimate the risk", "escalation: high\ninterventions:\n- Separate the pupils");
    let incident = Incident::with_id("bench", "a slur shouted in the yard", None, IncidentSource::TeacherSession).unwrap();
    let config = PanelConfig::new(PanelMode::Multi, false, PanelTask::AnalyzeIncident);

    let mut group = c.benchmark_group("analyze_incident");
    for (name, policy) in policies() {
        let engine = PanelEngine::new(Gateway::new(Latency(scripted.clone())), None, EngineSettings::default())
            .with_policy(policy);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(policy, Some(WORKERS), || engine.analyze_incident(&incident, &config, &NoopObserver).unwrap()))
        });
    }
    group.finish();
}

fn eval(c: &mut Criterion) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/datasets/hatexplain_100.json");
    let examples = load_hatexplain(&path).unwrap().examples;
    let mut config = EvalConfig::new(Dataset::Hatexplain, PanelMode::Multi, false);
    config.sample_size = 40;
    config.parallelism = Some(WORKERS);

    let mut group = c.benchmark_group("eval_40_examples");
    group.sample_size(10);
    for (name, policy) in policies() {
        let backend = Latency(oracle_backend(&examples, &BTreeSet::new()));
        let engine = PanelEngine::new(Gateway::new(backend), None, EngineSettings::default()).with_policy(policy);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_eval(&config, &engine, &examples).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, panel, eval);
criterion_main!(benches);
