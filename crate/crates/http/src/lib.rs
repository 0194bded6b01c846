//! HTTP transport for entaudit: a blocking completions backend with retry,
//! a chat client for template generation, and a local mock inference server
//! speaking the same protocol.

pub mod client;
pub mod protocol;
pub mod server;

pub use client::{ChatGenerator, CompletionsBackend, EndpointConfig};
pub use server::{Faults, MockServer};
