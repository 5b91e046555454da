//! End-to-end HTTP tests against a real listener.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use arise_core::gateway::{ChatBackend, ChatRequest, ChatResponse, Gateway, GatewayError, ScriptedBackend};
use arise_core::orchestrator::{EngineSettings, PanelConfig, PanelEngine, PanelMode, PanelTask};
use arise_service::model::{AnalysisEvent, EventKind, Problem, Session};
use arise_service::Service;
use futures::StreamExt;
use serde_json::json;
use tokio::sync::oneshot;

fn scripted() -> ScriptedBackend {
    let mut b = ScriptedBackend::new();
    b.register_contains("The teacher asks:", "Speak with the class tomorrow.");
    b.register_contains(
        "Estimate the risk that the situation escalates",
        "escalation: high\ninterventions:\n- Stop the behaviour\n- Inform the parents",
    );
    b.register_contains("You are psychology-student,", "label: hateful\nconfidence: 0.9\nrationale: targets origin");
    b.register_contains("You are pedagogy-student,", "label: hateful\nconfidence: 0.8\nrationale: exclusion");
    b.register_contains("You are cognitive-science-student,", "label: not-hateful\nconfidence: 0.6\nrationale: ambiguous");
    b.register_contains("You are manager-professor,", "label: hateful\nconfidence: 0.85\nrationale: two of three agree");
    b.register_contains("You are advisor-collectivist,", "Family honour matters here.");
    b.register_contains("You are advisor-immigrant,", "Origin remarks isolate newcomers.");
    b.register_contains("You are advisor-religious-minority,", "No religious angle stated.");
    b
}

struct Slow(ScriptedBackend, Duration);

impl ChatBackend for Slow {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        std::thread::sleep(self.1);
        self.0.complete(request)
    }
}

struct Running {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    join: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Running {
    async fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        tokio::time::timeout(Duration::from_secs(10), self.join)
            .await
            .expect("server stops")
            .unwrap()
            .unwrap();
    }
}

async fn start(state: &Path, backend: impl ChatBackend + 'static) -> Running {
    let engine = PanelEngine::new(Gateway::new(backend), None, EngineSettings::default());
    let defaults = PanelConfig::new(PanelMode::Multi, true, PanelTask::AnalyzeIncident);
    let service = Service::open(state, engine, defaults).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel();
    let join = tokio::spawn(service.serve(listener, async move {
        let _ = rx.await;
    }));
    Running {
        base,
        stop: Some(tx),
        join,
    }
}

async fn create(base: &str, body: serde_json::Value) -> Session {
    let resp = reqwest::Client::new().post(format!("{base}/sessions")).json(&body).send().await.unwrap();
    assert_eq!(resp.status(), 201);
    resp.json().await.unwrap()
}

async fn submit(base: &str, sid: &str, text: &str) -> String {
    let resp = reqwest::Client::new()
        .post(format!("{base}/sessions/{sid}/incidents"))
        .json(&json!({ "text": text, "context": "during break" }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 202);
    resp.json::<serde_json::Value>().await.unwrap()["analysis_id"].as_str().unwrap().to_string()
}

fn parse_frames(buf: &mut String, out: &mut Vec<AnalysisEvent>) {
    while let Some(end) = buf.find("\n\n") {
        let frame: String = buf.drain(..end + 2).collect();
        let data: Vec<&str> = frame.lines().filter_map(|l| l.strip_prefix("data: ")).collect();
        if !data.is_empty() {
            out.push(serde_json::from_str(&data.join("\n")).unwrap());
        }
    }
}

/// Reads the event stream until `done` holds or the server closes it.
async fn read_events(
    base: &str,
    sid: &str,
    query: &str,
    last_event_id: Option<u64>,
    done: impl Fn(&[AnalysisEvent]) -> bool,
) -> Vec<AnalysisEvent> {
    let mut req = reqwest::Client::new().get(format!("{base}/sessions/{sid}/events{query}"));
    if let Some(id) = last_event_id {
        req = req.header("Last-Event-ID", id.to_string());
    }
    let resp = req.send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let mut stream = resp.bytes_stream();
    let mut buf = String::new();
    let mut events = Vec::new();
    let read = async {
        while let Some(chunk) = stream.next().await {
            buf.push_str(&String::from_utf8_lossy(&chunk.unwrap()));
            parse_frames(&mut buf, &mut events);
            if done(&events) {
                break;
            }
        }
    };
    tokio::time::timeout(Duration::from_secs(20), read).await.expect("events arrive in time");
    events
}

fn terminals(events: &[AnalysisEvent], analysis: &str) -> usize {
    events.iter().filter(|e| e.analysis_id == analysis && e.kind.is_terminal()).count()
}

async fn raw_get(url: &str) -> (u16, String) {
    let resp = reqwest::get(url).await.unwrap();
    (resp.status().as_u16(), resp.text().await.unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn session_lifecycle_survives_restart() {
    let state = tempfile::tempdir().unwrap();
    let server = start(state.path(), scripted()).await;
    let base = server.base.clone();
    assert_eq!(raw_get(&format!("{base}/healthz")).await.0, 200);

    let session = create(&base, json!({})).await;
    assert_eq!(session.config.mode, PanelMode::Multi);
    assert!(session.config.use_rag);
    assert!(session.messages.is_empty());
    assert_eq!(session.session_id.len(), 32);
    let sid = session.session_id.clone();

    let aid = submit(&base, &sid, "They told him to go back to his own country.").await;
    let events = read_events(&base, &sid, "", None, |e| terminals(e, &aid) == 1).await;
    let last = events.last().unwrap();
    assert_eq!(last.kind, EventKind::ReportReady);
    assert_eq!(last.payload["report"]["final_label"]["class"], "hateful");
    assert_eq!(last.payload["report"]["escalation_risk"], "high");
    assert_eq!(last.payload["report"]["advisory_notes"].as_array().unwrap().len(), 3);
    let count = |k: EventKind| events.iter().filter(|e| e.kind == k).count();
    assert_eq!(count(EventKind::AgentVerdict), 3);
    assert_eq!(count(EventKind::AdvisoryNote), 3);
    assert_eq!(count(EventKind::ManagerDecision), 1);
    let seqs: Vec<u64> = events.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=events.len() as u64).collect::<Vec<_>>());

    let session_before = raw_get(&format!("{base}/sessions/{sid}")).await.1;
    let events_before = raw_get(&format!("{base}/sessions/{sid}/events?follow=false")).await.1;
    let parsed: Session = serde_json::from_str(&session_before).unwrap();
    assert_eq!(parsed.reports.len(), 1);
    server.stop().await;

    let server = start(state.path(), scripted()).await;
    let base = server.base.clone();
    assert_eq!(raw_get(&format!("{base}/sessions/{sid}")).await.1, session_before);
    assert_eq!(raw_get(&format!("{base}/sessions/{sid}/events?follow=false")).await.1, events_before);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn validation_errors() {
    let state = tempfile::tempdir().unwrap();
    let server = start(state.path(), scripted()).await;
    let base = server.base.clone();
    let client = reqwest::Client::new();

    let single = create(&base, json!({ "mode": "single" })).await;
    assert_eq!(single.config.mode, PanelMode::Single);

    let resp = client.post(format!("{base}/sessions")).json(&json!({ "colour": "red" })).send().await.unwrap();
    assert_eq!(resp.status(), 422);
    assert_eq!(resp.json::<Problem>().await.unwrap().code, "invalid-config");

    let (status, body) = raw_get(&format!("{base}/sessions/0123456789abcdef0123456789abcdef")).await;
    assert_eq!(status, 404);
    assert_eq!(serde_json::from_str::<Problem>(&body).unwrap().code, "unknown-session");

    let sid = single.session_id;
    let resp = client
        .post(format!("{base}/sessions/{sid}/incidents"))
        .json(&json!({ "text": "   " }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 422);
    assert_eq!(resp.json::<Problem>().await.unwrap().code, "empty-incident");
    assert_eq!(raw_get(&format!("{base}/sessions/{sid}/events?follow=false")).await.1, "");

    let resp = client
        .post(format!("{base}/sessions/{sid}/follow-up"))
        .json(&json!({ "question": "What now?" }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 409);
    assert_eq!(resp.json::<Problem>().await.unwrap().code, "no-report-yet");
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn follow_ups_append_in_order() {
    let state = tempfile::tempdir().unwrap();
    let server = start(state.path(), scripted()).await;
    let base = server.base.clone();
    let sid = create(&base, json!({})).await.session_id;
    let aid = submit(&base, &sid, "Someone wrote a slur on a locker.").await;
    read_events(&base, &sid, "", None, |e| terminals(e, &aid) == 1).await;

    let client = reqwest::Client::new();
    for q in ["Should I call the parents?", "How do I talk to the class?"] {
        let resp = client
            .post(format!("{base}/sessions/{sid}/follow-up"))
            .json(&json!({ "question": q }))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);
        let v: serde_json::Value = resp.json().await.unwrap();
        assert_eq!(v["answer"]["content"], "Speak with the class tomorrow.");
        assert_eq!(v["answer"]["author"], "agent:manager-professor");
    }
    let session: Session = serde_json::from_str(&raw_get(&format!("{base}/sessions/{sid}")).await.1).unwrap();
    let tail: Vec<(String, String)> = session
        .messages
        .iter()
        .rev()
        .take(4)
        .rev()
        .map(|m| (m.author.to_string(), m.content.clone()))
        .collect();
    assert_eq!(
        tail,
        [
            ("teacher".to_string(), "Should I call the parents?".to_string()),
            ("agent:manager-professor".into(), "Speak with the class tomorrow.".into()),
            ("teacher".into(), "How do I talk to the class?".into()),
            ("agent:manager-professor".into(), "Speak with the class tomorrow.".into()),
        ]
    );
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn concurrent_sessions_have_gap_free_sequences() {
    let state = tempfile::tempdir().unwrap();
    let server = start(state.path(), Slow(scripted(), Duration::from_millis(5))).await;
    let base = Arc::new(server.base.clone());
    let mut tasks = Vec::new();
    for i in 0..5 {
        let base = base.clone();
        tasks.push(tokio::spawn(async move {
            let sid = create(&base, json!({})).await.session_id;
            let a = submit(&base, &sid, &format!("incident {i} first")).await;
            let b = submit(&base, &sid, &format!("incident {i} second")).await;
            let events = read_events(&base, &sid, "", None, |e| terminals(e, &a) == 1 && terminals(e, &b) == 1).await;
            (sid, a, b, events)
        }));
    }
    for t in tasks {
        let (sid, a, b, events) = t.await.unwrap();
        let seqs: Vec<u64> = events.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (1..=events.len() as u64).collect::<Vec<_>>(), "session {sid}");
        assert!(events.iter().all(|e| e.session_id == sid));
        assert_eq!((terminals(&events, &a), terminals(&events, &b)), (1, 1));
        let per: BTreeMap<&str, usize> = events.iter().fold(BTreeMap::new(), |mut m, e| {
            *m.entry(e.analysis_id.as_str()).or_default() += 1;
            m
        });
        assert_eq!(per.len(), 2);
        assert_eq!(per[a.as_str()], per[b.as_str()]);
    }
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn resume_with_last_event_id() {
    let state = tempfile::tempdir().unwrap();
    let server = start(state.path(), scripted()).await;
    let base = server.base.clone();
    let sid = create(&base, json!({})).await.session_id;
    let aid = submit(&base, &sid, "Graffiti targeting a religious group.").await;
    let all = read_events(&base, &sid, "", None, |e| terminals(e, &aid) == 1).await;
    let resumed = read_events(&base, &sid, "?follow=false", Some(4), |_| false).await;
    assert_eq!(resumed, all[4..].to_vec());
    let by_query = read_events(&base, &sid, "?follow=false&after=10", None, |_| false).await;
    assert_eq!(by_query, all[10..].to_vec());
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn shutdown_mid_analysis_emits_error_and_persists() {
    let state = tempfile::tempdir().unwrap();
    let server = start(state.path(), Slow(scripted(), Duration::from_millis(400))).await;
    let base = server.base.clone();
    let sid = create(&base, json!({})).await.session_id;
    let aid = submit(&base, &sid, "A threat was written on the board.").await;
    read_events(&base, &sid, "", None, |e| !e.is_empty()).await;
    server.stop().await;

    let server = start(state.path(), scripted()).await;
    let events = read_events(&server.base, &sid, "?follow=false", None, |_| false).await;
    let last = events.last().unwrap();
    assert_eq!(last.kind, EventKind::Error);
    assert_eq!(last.payload["code"], "shutdown");
    assert_eq!(terminals(&events, &aid), 1);
    // The abandoned panel must not add anything once it finishes.
    tokio::time::sleep(Duration::from_millis(1500)).await;
    let session: Session = serde_json::from_str(&raw_get(&format!("{}/sessions/{sid}", server.base)).await.1).unwrap();
    assert!(session.reports.is_empty());
    server.stop().await;
}
