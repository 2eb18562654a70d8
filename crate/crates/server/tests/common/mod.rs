#![allow(dead_code)]

use std::future::IntoFuture;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use dst_server::app::{router, AppState};
use dst_server::config::EngineConfig;
use dst_server::store::SessionStore;
use serde_json::Value;

pub struct Server {
    pub base: String,
    pub app: Arc<AppState>,
    pub client: reqwest::Client,
}

pub async fn start(cfg: EngineConfig, dir: &Path) -> Server {
    let rt = cfg.build().unwrap();
    let store = SessionStore::open(dir).unwrap();
    let app = AppState::new(rt, store, cfg.seed, Duration::from_secs(cfg.session_ttl_secs));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(axum::serve(listener, router(app.clone(), cfg.cors_origin.as_deref())).into_future());
    Server {
        base,
        app,
        client: reqwest::Client::new(),
    }
}

impl Server {
    pub async fn create(&self) -> String {
        let r = self.client.post(format!("{}/v1/sessions", self.base)).send().await.unwrap();
        assert_eq!(r.status(), 201);
        r.json::<Value>().await.unwrap()["session_id"].as_str().unwrap().to_string()
    }

    pub async fn say(&self, id: &str, text: &str) -> (u16, Value) {
        let r = self
            .client
            .post(format!("{}/v1/sessions/{id}/messages", self.base))
            .json(&serde_json::json!({ "text": text }))
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    pub async fn state(&self, id: &str) -> Value {
        let (s, v) = self.get(&format!("/v1/sessions/{id}/state")).await;
        assert_eq!(s, 200, "{v}");
        v
    }
}

/// The parts of a state view that replay must reproduce.
pub fn replayable(v: &Value) -> Value {
    let mut v = v.clone();
    if let Value::Object(m) = &mut v {
        m.remove("last_active");
    }
    v
}

pub fn assert_error_body(v: &Value) {
    let e = &v["error"];
    assert!(e["code"].is_string() && e["message"].is_string(), "unstructured error body {v}");
}

/// A chat-completion endpoint that always answers with `content`.
pub async fn mock_llm(content: &'static str) -> String {
    use axum::routing::post;
    let app = axum::Router::new().route(
        "/v1/chat/completions",
        post(move || async move { axum::Json(serde_json::json!({"choices": [{"message": {"content": content}}]})) }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(axum::serve(listener, app).into_future());
    base
}

/// The `dst` binary serving from `dir` on a free port.
pub struct Process {
    pub child: std::process::Child,
    pub base: String,
}

pub fn spawn_dst(dir: &Path, extra_env: &[(&str, &str)]) -> Process {
    use std::io::BufRead;
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_dst"));
    cmd.arg("serve")
        .env("DST_BIND", "127.0.0.1:0")
        .env("DST_PERSISTENCE", dir)
        .env_remove("DST_CONFIG")
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::null());
    for (k, v) in extra_env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().expect("dst binary starts");
    let mut line = String::new();
    std::io::BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner `{line}`")).to_string();
    Process { child, base }
}

impl Process {
    /// SIGKILL, no chance to clean up.
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Process {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn blocking_json(r: reqwest::blocking::RequestBuilder) -> Result<Value, String> {
    let r = r.send().map_err(|e| e.to_string())?;
    let status = r.status();
    let v: Value = r.json().map_err(|e| e.to_string())?;
    if status.is_success() {
        Ok(v)
    } else {
        Err(format!("{status}: {v}"))
    }
}

fn view_state(v: &Value) -> Value {
    let mut v = v.clone();
    if let Value::Object(m) = &mut v {
        for k in ["missing", "result", "created_at", "last_active"] {
            m.remove(k);
        }
    }
    v
}

/// Plays the fixture corpus through `n` sessions of the real binary, kills
/// it with SIGKILL halfway, restarts it on the same directory and compares
/// every session's state with the one seen before the kill. The rest of
/// each dialogue then runs on the restarted service and the final states
/// are checked against an in-process engine.
pub fn durability_check(n: usize) -> Result<String, String> {
    use dst_core::engine::{Conversation, Engine};
    use dst_core::tracker::DialogueState;
    use dst_core::validator::Validator;

    let corpus = dst_core::load_corpus(
        &std::fs::read_to_string(fixture("corpus_50.json")).map_err(|e| e.to_string())?,
        dst_core::demo::ontology(),
    )
    .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let client = reqwest::blocking::Client::new();

    let first = spawn_dst(dir.path(), &[]);
    let mut plans = Vec::new();
    for i in 0..n {
        let id = blocking_json(client.post(first.url("/v1/sessions")))?["session_id"]
            .as_str()
            .ok_or("no session id")?
            .to_string();
        let d = &corpus.dialogues[i % corpus.dialogues.len()];
        let texts: Vec<String> = d.user_turns().map(|t| t.text.clone()).collect();
        plans.push((id, texts));
    }
    let say = |base: &Process, id: &str, text: &str| {
        blocking_json(
            client
                .post(base.url(&format!("/v1/sessions/{id}/messages")))
                .json(&serde_json::json!({ "text": text })),
        )
    };
    let state = |base: &Process, id: &str| blocking_json(client.get(base.url(&format!("/v1/sessions/{id}/state"))));

    let mut sent_before = 0;
    for (id, texts) in &plans {
        for t in &texts[..texts.len().div_ceil(2)] {
            say(&first, id, t)?;
            sent_before += 1;
        }
    }
    let before: Vec<Value> = plans.iter().map(|(id, _)| state(&first, id)).collect::<Result<_, _>>()?;
    first.kill();

    let second = spawn_dst(dir.path(), &[]);
    let mut diffs = Vec::new();
    for ((id, _), b) in plans.iter().zip(&before) {
        let a = state(&second, id)?;
        if &a != b {
            diffs.push(id.clone());
        }
    }
    if !diffs.is_empty() {
        return Err(format!("{} of {n} sessions differ after restart, e.g. {}", diffs.len(), diffs[0]));
    }

    let engine = Engine::rule(
        std::sync::Arc::new(dst_core::demo::ontology().clone()),
        std::sync::Arc::new(dst_core::demo::lexicon()),
        Validator::default(),
    );
    let mut sent_after = 0;
    for (id, texts) in &plans {
        for t in &texts[texts.len().div_ceil(2)..] {
            say(&second, id, t)?;
            sent_after += 1;
        }
        let mut conv = Conversation::new(DialogueState::new(id.clone(), 0));
        for t in texts {
            engine.step(&mut conv, t).map_err(|e| e.to_string())?;
        }
        let want = serde_json::to_value(&conv.state).map_err(|e| e.to_string())?;
        if view_state(&state(&second, id)?) != want {
            return Err(format!("session {id} diverged from the reference after restart"));
        }
    }
    Ok(format!(
        "{n} sessions, {sent_before} turns before SIGKILL, 0 diffs after restart, {sent_after} more turns match the reference"
    ))
}
