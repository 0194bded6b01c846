//! Wire types for the OpenAI-compatible `completions` and `chat/completions`
//! endpoints (the subset the engine uses).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use entaudit_core::gateway::{Candidate, DecodeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
    /// Number of top alternatives per position.
    pub logprobs: u32,
}

impl CompletionRequest {
    pub fn new(model: &str, prompt: &str, decode: &DecodeParams) -> Self {
        Self {
            model: model.to_string(),
            prompt: prompt.to_string(),
            max_tokens: decode.max_tokens,
            temperature: decode.temperature,
            seed: decode.seed,
            logprobs: decode.top_logprobs,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Logprobs {
    #[serde(default)]
    pub tokens: Vec<String>,
    /// One map per generated position: token → logprob.
    #[serde(default)]
    pub top_logprobs: Vec<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionChoice {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub logprobs: Option<Logprobs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<CompletionChoice>,
}

impl CompletionResponse {
    /// Candidates at the first generated position.
    pub fn first_position(&self) -> Option<Vec<Candidate>> {
        let top = self.choices.first()?.logprobs.as_ref()?.top_logprobs.first()?;
        Some(top.iter().map(|(token, &logprob)| Candidate { token: token.clone(), logprob }).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChatMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}
