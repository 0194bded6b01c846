//! Local mock inference server.
//!
//! Serves `POST /v1/completions` by parsing the assembled prompt back into
//! (entity, template, label set) and answering with the mock backend's
//! logprobs, and `POST /v1/chat/completions` with a deterministic sentence
//! built from the requested keywords. Fault injection makes the first
//! requests fail with 500 or 429.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use entaudit_core::gateway::{Backend, LabelFormat, MockBackend, PromptVariant, QueryRequest, QueryStatus, Supervision};
use entaudit_core::registry::PLACEHOLDER;
use entaudit_core::runner::AuditData;

use crate::protocol::{
    ChatChoice, ChatMessage, ChatRequest, ChatResponse, CompletionChoice, CompletionRequest, CompletionResponse, Logprobs,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Faults {
    /// The first N requests answer 500.
    pub fail_first: u64,
    /// The next N requests answer 429.
    pub rate_limit_first: u64,
}

struct Inner {
    data: AuditData,
    backend: MockBackend,
    faults: Faults,
    requests: AtomicU64,
}

/// The parts of an assembled inference prompt the mock needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub sentence: String,
    pub target: String,
    pub answers: Vec<String>,
    pub numeric: bool,
}

/// Recovers the label list and the final `Sentence:`/`Target:` block.
pub fn parse_prompt(prompt: &str) -> Option<ParsedPrompt> {
    let labels_at = prompt.find("Labels:\n")? + "Labels:\n".len();
    let mut answers = Vec::new();
    let mut numeric = false;
    for line in prompt[labels_at..].lines() {
        if line.trim().is_empty() {
            break;
        }
        if let Some(display) = line.strip_prefix("- ") {
            answers.push(display.to_string());
        } else if let Some((n, _)) = line.split_once(": ") {
            numeric = true;
            answers.push(n.to_string());
        }
    }
    let last = prompt.rfind("Sentence: ")?;
    let block = &prompt[last + "Sentence: ".len()..];
    let (sentence, rest) = block.split_once("\nTarget: ")?;
    let (target, _) = rest.split_once("\nLabel:")?;
    (!answers.is_empty()).then(|| ParsedPrompt {
        sentence: sentence.to_string(),
        target: target.to_string(),
        answers,
        numeric,
    })
}

fn error(status: StatusCode, message: &str) -> Response {
    (status, Json(serde_json::json!({"error": {"message": message}}))).into_response()
}

impl Inner {
    fn fault(&self) -> Option<Response> {
        let n = self.requests.fetch_add(1, Ordering::SeqCst);
        if n < self.faults.fail_first {
            return Some(error(StatusCode::INTERNAL_SERVER_ERROR, "injected failure"));
        }
        if n < self.faults.fail_first + self.faults.rate_limit_first {
            return Some(error(StatusCode::TOO_MANY_REQUESTS, "rate limited"));
        }
        None
    }

    fn complete(&self, req: &CompletionRequest) -> Response {
        let Some(parsed) = parse_prompt(&req.prompt) else {
            return error(StatusCode::BAD_REQUEST, "unrecognized prompt layout");
        };
        let Some((entity, language)) = self.data.entities.entities().iter().find_map(|e| {
            e.names.iter().find(|(_, n)| **n == parsed.target).map(|(l, _)| (e, l.clone()))
        }) else {
            return error(StatusCode::BAD_REQUEST, "unknown target entity");
        };
        let Some(template) = self
            .data
            .corpus
            .templates()
            .iter()
            .find(|t| t.language == language && t.fill(&parsed.target) == parsed.sentence)
        else {
            return error(StatusCode::BAD_REQUEST, "unknown template");
        };
        let Ok(schema) = self.data.schemas.get(&template.task_id) else {
            return error(StatusCode::BAD_REQUEST, "unknown task");
        };
        if schema.len() != parsed.answers.len() {
            return error(StatusCode::BAD_REQUEST, "label list does not match the task schema");
        }
        let variant = PromptVariant {
            supervision: Supervision::ZeroShot,
            label_format: if parsed.numeric { LabelFormat::Numeric } else { LabelFormat::Textual },
        };
        let result = self.backend.query(&QueryRequest {
            prompt: &req.prompt,
            model_id: &req.model,
            entity,
            template,
            schema,
            variant,
            expected_answers: &parsed.answers,
        });
        if let QueryStatus::Failed(reason) = &result.status {
            return error(StatusCode::SERVICE_UNAVAILABLE, reason);
        }
        let top: BTreeMap<String, f64> = result
            .candidates
            .iter()
            .take(req.logprobs.max(1) as usize)
            .map(|c| (format!(" {}", c.token), c.logprob))
            .collect();
        let best = result.candidates.first().map(|c| format!(" {}", c.token)).unwrap_or_default();
        Json(CompletionResponse {
            choices: vec![CompletionChoice {
                text: best.clone(),
                logprobs: Some(Logprobs { tokens: vec![best], top_logprobs: vec![top] }),
            }],
        })
        .into_response()
    }

    fn chat(&self, req: &ChatRequest) -> Response {
        let Some(user) = req.messages.iter().rev().find(|m| m.role == "user") else {
            return error(StatusCode::BAD_REQUEST, "no user message");
        };
        let keywords: Vec<&str> = user
            .content
            .rfind("Keywords: [")
            .and_then(|i| {
                let rest = &user.content[i + "Keywords: [".len()..];
                rest.find(']').map(|j| &rest[..j])
            })
            .map(|list| list.split(", ").filter(|k| *k != PLACEHOLDER.to_string()).collect())
            .unwrap_or_default();
        let content = format!(
            "{PLACEHOLDER} was discussed in connection with {} (draft {}).",
            keywords.join(", "),
            req.seed % 1000
        );
        Json(ChatResponse { choices: vec![ChatChoice { message: ChatMessage { role: "assistant".into(), content } }] })
            .into_response()
    }
}

async fn completions(State(state): State<Arc<Inner>>, Json(req): Json<CompletionRequest>) -> Response {
    if let Some(r) = state.fault() {
        return r;
    }
    state.complete(&req)
}

async fn chat(State(state): State<Arc<Inner>>, Json(req): Json<ChatRequest>) -> Response {
    if let Some(r) = state.fault() {
        return r;
    }
    state.chat(&req)
}

/// Running server; stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<Inner>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl MockServer {
    pub fn start(data: AuditData, backend: MockBackend, faults: Faults, bind: &str) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Inner { data, backend, faults, requests: AtomicU64::new(0) });
        let app = Router::new()
            .route("/v1/completions", post(completions))
            .route("/v1/chat/completions", post(chat))
            .with_state(state.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || -> std::io::Result<()> {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        });
        Ok(Self { addr, state, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL for clients, including the `/v1` prefix.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Requests received so far, including rejected ones.
    pub fn requests(&self) -> u64 {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server thread exits.
    pub fn join(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_numeric_prompt() {
        let p = "Rate it.\nLabels:\n1: Negative\n2: Neutral\n3: Positive\n\nSentence: X rose.\nTarget: X\nLabel: 3\n\nSentence: Acme rose.\nTarget: Acme\nLabel:";
        let parsed = parse_prompt(p).unwrap();
        assert!(parsed.numeric);
        assert_eq!(parsed.answers, ["1", "2", "3"]);
        assert_eq!(parsed.sentence, "Acme rose.");
        assert_eq!(parsed.target, "Acme");
    }
}
