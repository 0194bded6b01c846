use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use entaudit_core::gateway::{
    with_retry, Attempt, Backend, DecodeParams, QueryRequest, RetryPolicy, TokenLogprobs,
};
use entaudit_core::synthgen::{GenerationPrompt, TextGenerator};

use crate::protocol::{ChatMessage, ChatRequest, ChatResponse, CompletionRequest, CompletionResponse};

/// Where and how to reach an inference endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self { base_url: "http://127.0.0.1:8000/v1".into(), api_key: None, timeout_secs: 60 }
    }
}

fn build_client(cfg: &EndpointConfig) -> reqwest::Result<Client> {
    Client::builder().timeout(Duration::from_secs(cfg.timeout_secs)).build()
}

fn classify(status: StatusCode, body: String) -> String {
    format!("http {}: {}", status.as_u16(), body.chars().take(200).collect::<String>())
}

fn post_json<Req: Serialize, Resp: DeserializeOwned>(
    client: &Client,
    cfg: &EndpointConfig,
    path: &str,
    body: &Req,
) -> Attempt<Resp> {
    let url = format!("{}/{}", cfg.base_url.trim_end_matches('/'), path);
    let mut req = client.post(&url).json(body);
    if let Some(key) = &cfg.api_key {
        req = req.bearer_auth(key);
    }
    let resp = match req.send() {
        Ok(r) => r,
        Err(e) => return Attempt::Transient(format!("request failed: {e}")),
    };
    let status = resp.status();
    if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
        return Attempt::Transient(classify(status, resp.text().unwrap_or_default()));
    }
    if !status.is_success() {
        return Attempt::Permanent(classify(status, resp.text().unwrap_or_default()));
    }
    match resp.json::<Resp>() {
        Ok(v) => Attempt::Done(v),
        Err(e) => Attempt::Permanent(format!("malformed response: {e}")),
    }
}

/// Logprob completions over HTTP.
pub struct CompletionsBackend {
    client: Client,
    pub endpoint: EndpointConfig,
    pub decode: DecodeParams,
    pub retry: RetryPolicy,
}

impl CompletionsBackend {
    pub fn new(endpoint: EndpointConfig) -> reqwest::Result<Self> {
        Ok(Self {
            client: build_client(&endpoint)?,
            endpoint,
            decode: DecodeParams::default(),
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl Backend for CompletionsBackend {
    fn query(&self, request: &QueryRequest<'_>) -> TokenLogprobs {
        let body = CompletionRequest::new(request.model_id, request.prompt, &self.decode);
        let outcome = with_retry(&self.retry, std::thread::sleep, || {
            match post_json::<_, CompletionResponse>(&self.client, &self.endpoint, "completions", &body) {
                Attempt::Done(resp) => match resp.first_position() {
                    Some(c) if !c.is_empty() => Attempt::Done(c),
                    _ => Attempt::Permanent("response has no logprobs".into()),
                },
                Attempt::Transient(e) => Attempt::Transient(e),
                Attempt::Permanent(e) => Attempt::Permanent(e),
            }
        });
        match outcome.result {
            Ok(candidates) => {
                let mut lp = TokenLogprobs::ok(candidates);
                lp.attempts = outcome.attempts;
                lp
            }
            Err(reason) => TokenLogprobs::failed(reason, outcome.attempts),
        }
    }
}

/// Chat completions client used to generate templates.
pub struct ChatGenerator {
    client: Client,
    pub endpoint: EndpointConfig,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retry: RetryPolicy,
}

impl ChatGenerator {
    pub fn new(endpoint: EndpointConfig, model: &str) -> reqwest::Result<Self> {
        Ok(Self {
            client: build_client(&endpoint)?,
            endpoint,
            model: model.to_string(),
            temperature: 0.7,
            max_tokens: 96,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl TextGenerator for ChatGenerator {
    fn generate(&self, prompt: &GenerationPrompt, seed: u64) -> Result<String, String> {
        let body = ChatRequest {
            model: self.model.clone(),
            messages: vec![
                ChatMessage { role: "system".into(), content: prompt.system.clone() },
                ChatMessage { role: "user".into(), content: prompt.user.clone() },
            ],
            temperature: self.temperature,
            seed,
            max_tokens: self.max_tokens,
        };
        with_retry(&self.retry, std::thread::sleep, || {
            match post_json::<_, ChatResponse>(&self.client, &self.endpoint, "chat/completions", &body) {
                Attempt::Done(resp) => match resp.choices.into_iter().next() {
                    Some(c) => Attempt::Done(c.message.content.trim().to_string()),
                    None => Attempt::Permanent("response has no choices".into()),
                },
                Attempt::Transient(e) => Attempt::Transient(e),
                Attempt::Permanent(e) => Attempt::Permanent(e),
            }
        })
        .result
    }
}
