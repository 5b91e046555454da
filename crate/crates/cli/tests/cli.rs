//! Black-box tests of the `arise` binary.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_arise"));
    for (k, _) in std::env::vars() {
        if k.starts_with("ARISE_") {
            c.env_remove(k);
        }
    }
    c
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_script(dir: &Path, entries: &[(&str, &str)]) -> PathBuf {
    let scripts: Vec<serde_json::Value> = entries
        .iter()
        .map(|(c, r)| serde_json::json!({ "contains": c, "response": r }))
        .collect();
    let path = dir.join("script.json");
    std::fs::write(&path, serde_json::json!({ "scripts": scripts }).to_string()).unwrap();
    path
}

#[test]
fn help_exits_zero_everywhere() {
    for args in [vec!["--help"], vec!["ingest", "--help"], vec!["eval", "--help"], vec!["analyze", "--help"], vec!["serve", "--help"]] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(stdout(&o).contains("Usage"));
    }
    assert_eq!(run(&["analyze", "--text", "x", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["launch"]).status.code(), Some(2));
}

#[test]
fn ingest_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    for name in ["def-hate-speech.md", "case-lunchroom.md", "policy-response.md"] {
        std::fs::copy(fixtures().join("corpus").join(name), corpus.join(name)).unwrap();
    }
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let o = run(&["ingest", "--corpus", p(&corpus), "--index", p(&a)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("num_docs=3"));
    run(&["ingest", "--corpus", p(&corpus), "--index", p(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = run(&["ingest", "--corpus", p(&empty), "--index", p(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no documents"));

    std::fs::write(corpus.join("broken.md"), "no header here").unwrap();
    let o = run(&["ingest", "--corpus", p(&corpus), "--index", p(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("broken.md"));
}

#[test]
fn eval_oracle_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("idx.json");
    run(&["ingest", "--corpus", p(&fixtures().join("corpus")), "--index", p(&index)]);
    let dataset = fixtures().join("datasets/hatexplain_100.json");
    let out = dir.path().join("out");
    let o = run(&[
        "eval", "--dataset", p(&dataset), "--kind", "hatexplain", "--mode", "single", "--rag", "on", "--index", p(&index),
        "--backend", "scripted", "--out", p(&out), "--seed", "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("100%").count(), 4);
    for f in ["predictions.jsonl", "result.json", "table.txt", "table.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let result: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["complete"], true);
    assert_eq!(std::fs::read_to_string(out.join("predictions.jsonl")).unwrap().lines().count(), 400);

    let o = run(&["eval", "--dataset", p(&dataset), "--kind", "hatexplain", "--n", "0", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["eval", "--dataset", p(&dataset), "--kind", "hatexplain", "--backend", "scripted", "--rag", "on", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "rag without index is a usage error");
    let o = run(&["eval", "--dataset", p(&dataset), "--kind", "tweets", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_fixture_script_matches_hand_counts() {
    // latent_hatred_100.tsv cycles through the seven classes in schema order,
    // so grievance and incitement occur 15 times and every other class 14.
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        &[
            ("You are psychology-student,", "label: irony\nconfidence: 0.9\nrationale: tone"),
            ("You are pedagogy-student,", "label: grievance\nconfidence: 0.9\nrationale: complaint"),
            ("You are cognitive-science-student,", "label: threats\nconfidence: 0.9\nrationale: warning"),
            ("You are manager-professor,", "label: incitement\nconfidence: 0.9\nrationale: call to act"),
        ],
    );
    let out = dir.path().join("out");
    let o = run(&[
        "eval", "--dataset", p(&fixtures().join("datasets/latent_hatred_100.tsv")), "--kind", "latent-hatred",
        "--mode", "multi", "--rag", "off", "--backend", "scripted", "--script", p(&script), "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "Implicit-Hate w/o RAG,14,15,14,15");
}

#[test]
fn eval_gateway_failure_saves_partial_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = bin()
        .args([
            "eval", "--dataset", p(&fixtures().join("datasets/hatexplain_100.json")), "--kind", "hatexplain", "--n", "5",
            "--rag", "off", "--backend", "http", "--endpoint", "http://127.0.0.1:9/v1/chat/completions",
            "--max-retries", "0", "--timeout-secs", "2", "--out", p(&out),
        ])
        .env("OPENAI_API_KEY", "test-key")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let result: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["complete"], false);
    assert!(out.join("predictions.jsonl").is_file());
}

fn analyze_script(dir: &Path) -> PathBuf {
    write_script(
        dir,
        &[
            ("You are psychology-student,", "label: hateful\nconfidence: 0.9\nrationale: targets origin"),
            ("You are pedagogy-student,", "label: hateful\nconfidence: 0.7\nrationale: exclusion"),
            ("You are cognitive-science-student,", "label: not-hateful\nconfidence: 0.8\nrationale: unclear"),
            ("You are manager-professor,", "label: not-hateful\nconfidence: 0.6\nrationale: quoting a film"),
            ("You are advisor-", "Consider the family context."),
        ],
    )
}

#[test]
fn analyze_single_mode_majority() {
    let dir = tempfile::tempdir().unwrap();
    let script = analyze_script(dir.path());
    let out = dir.path().join("report.json");
    let trace = dir.path().join("trace.jsonl");
    let o = run(&[
        "analyze", "--text", "They told him to go back to his country.", "--mode", "single", "--rag", "off",
        "--backend", "scripted", "--script", p(&script), "--out", p(&out), "--trace", p(&trace),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("Final label: hateful"), "{text}");
    assert!(text.contains("Escalation risk: medium"), "{text}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["final_label"]["class"], "hateful");
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 6);

    let o = run(&[
        "analyze", "--text", "They told him to go back to his country.", "--mode", "single", "--rag", "off",
        "--backend", "scripted", "--script", p(&script), "--json",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["agent_verdicts"].as_array().unwrap().len(), 3);

    assert_eq!(run(&["analyze", "--text", "  ", "--backend", "scripted", "--script", p(&script)]).status.code(), Some(2));
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let script = analyze_script(dir.path());
    let cfg = dir.path().join("arise.json");
    std::fs::write(&cfg, r#"{"mode": "single", "rag": false, "backend": "scripted"}"#).unwrap();
    let label = |extra: &[&str], env_mode: Option<&str>| -> String {
        let mut c = bin();
        c.args(["analyze", "--text", "An incident in class.", "--json", "--script", p(&script)]);
        c.args(extra);
        if let Some(m) = env_mode {
            c.env("ARISE_MODE", m).env("ARISE_BACKEND", "scripted").env("ARISE_RAG", "false");
        }
        let o = c.output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        v["final_label"]["class"].as_str().unwrap().to_string()
    };
    // Single mode follows the student majority, multi mode the manager.
    assert_eq!(label(&[], Some("multi")), "not-hateful");
    assert_eq!(label(&["--config", p(&cfg)], Some("multi")), "hateful");
    assert_eq!(label(&["--config", p(&cfg), "--mode", "multi"], Some("single")), "not-hateful");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"colour": "red"}"#).unwrap();
    let o = run(&["analyze", "--text", "x", "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["analyze", "--text", "x"]).env("ARISE_SEED", "lots").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

struct Server {
    child: Child,
    base: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(state: &Path, script: &Path, addr: &str) -> Result<Server, Output> {
    let mut child = bin()
        .args(["serve", "--addr", addr, "--state", p(state), "--rag", "off", "--backend", "scripted", "--script", p(script)])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    match line.trim().strip_prefix("listening on ") {
        Some(addr) => Ok(Server {
            base: format!("http://{addr}"),
            child,
        }),
        None => Err(child.wait_with_output().unwrap()),
    }
}

fn interrupt(server: &mut Server) -> std::process::ExitStatus {
    Command::new("kill").args(["-INT", &server.child.id().to_string()]).status().unwrap();
    for _ in 0..100 {
        if let Some(s) = server.child.try_wait().unwrap() {
            return s;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("server did not stop after SIGINT");
}

#[test]
fn serve_health_restart_and_port_busy() {
    let dir = tempfile::tempdir().unwrap();
    let script = analyze_script(dir.path());
    let state = dir.path().join("state");
    let mut server = serve(&state, &script, "127.0.0.1:0").unwrap();
    let client = reqwest::blocking::Client::new();
    assert_eq!(client.get(format!("{}/healthz", server.base)).send().unwrap().status(), 200);

    let addr = server.base.trim_start_matches("http://").to_string();
    let busy = serve(&state, &script, &addr).err().expect("second bind fails");
    assert_eq!(busy.status.code(), Some(1));

    let session: serde_json::Value = client.post(format!("{}/sessions", server.base)).send().unwrap().json().unwrap();
    let sid = session["session_id"].as_str().unwrap().to_string();
    let accepted = client
        .post(format!("{}/sessions/{sid}/incidents", server.base))
        .json(&serde_json::json!({ "text": "Someone wrote an insult on the board." }))
        .send()
        .unwrap();
    assert_eq!(accepted.status(), 202);
    let mut done = false;
    for _ in 0..100 {
        let events = client
            .get(format!("{}/sessions/{sid}/events?follow=false", server.base))
            .send()
            .unwrap()
            .text()
            .unwrap();
        if events.contains("event: report-ready") {
            done = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    assert!(done);
    let before = client.get(format!("{}/sessions/{sid}", server.base)).send().unwrap().text().unwrap();
    assert!(interrupt(&mut server).success());

    let server = serve(&state, &script, "127.0.0.1:0").unwrap();
    let after = client.get(format!("{}/sessions/{sid}", server.base)).send().unwrap().text().unwrap();
    assert_eq!(before, after);
}

#[test]
fn sigint_mid_analysis_emits_terminal_error() {
    let dir = tempfile::tempdir().unwrap();
    // No script entries match, so every call returns quickly as unscripted;
    // a slow HTTP endpoint keeps the analysis in flight instead.
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let slow_addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            std::thread::spawn(move || {
                std::thread::sleep(Duration::from_secs(30));
                drop(stream);
            });
        }
    });
    let state = dir.path().join("state");
    let mut child = bin()
        .args([
            "serve", "--addr", "127.0.0.1:0", "--state", p(&state), "--rag", "off", "--backend", "http", "--endpoint",
            &format!("http://{slow_addr}/v1/chat/completions"), "--max-retries", "0",
        ])
        .env("OPENAI_API_KEY", "test-key")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let mut server = Server {
        base: format!("http://{}", line.trim().strip_prefix("listening on ").unwrap()),
        child,
    };
    let client = reqwest::blocking::Client::new();
    let session: serde_json::Value = client.post(format!("{}/sessions", server.base)).send().unwrap().json().unwrap();
    let sid = session["session_id"].as_str().unwrap().to_string();
    client
        .post(format!("{}/sessions/{sid}/incidents", server.base))
        .json(&serde_json::json!({ "text": "A threat was left in a locker." }))
        .send()
        .unwrap();
    std::thread::sleep(Duration::from_millis(300));
    assert!(interrupt(&mut server).success());

    let log = std::fs::read_to_string(state.join("sessions").join(&sid).join("log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["type"], "event");
    assert_eq!(last["kind"], "error");
    assert_eq!(last["payload"]["code"], "shutdown");
    assert!(state.join("sessions").join(&sid).join("snapshot.json").is_file());
}
