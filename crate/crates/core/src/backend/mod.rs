//! Model backends: a uniform completion interface with an HTTP
//! implementation for chat-completion APIs and a seeded simulator.

mod http;
mod sim;

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use http::{HttpBackend, HttpSettings};
pub use sim::{generate_pool, AnswerWeight, CallRecord, PoolSpec, SimBackend, SimQuestionProfile, SimSettings};

/// Identifies which question a reasoning request belongs to and where in
/// that question's sample stream the request starts. The simulator keys its
/// randomness on this; the HTTP backend ignores it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamKey {
    pub question_id: String,
    pub first_draw: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt_text: String,
    pub n: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub stream: Option<StreamKey>,
}

impl CompletionRequest {
    pub fn new(prompt_text: impl Into<String>, n: usize, temperature: f64) -> Self {
        Self {
            prompt_text: prompt_text.into(),
            n,
            temperature,
            max_output_tokens: 1024,
            stream: None,
        }
    }

    pub fn max_output_tokens(mut self, max: u32) -> Self {
        self.max_output_tokens = max;
        self
    }

    pub fn stream(mut self, question_id: impl Into<String>, first_draw: u64) -> Self {
        self.stream = Some(StreamKey {
            question_id: question_id.into(),
            first_draw,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParams("completion request needs n >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidParams("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResponse {
    pub texts: Vec<String>,
    /// Prompt tokens billed for this request (once, or once per sample
    /// under [`InputBilling::PerSample`]).
    pub input_tokens: u64,
    /// Completion tokens summed over all samples.
    pub output_tokens: u64,
    /// Completion tokens of each sample, aligned with `texts`.
    pub per_sample_output: Vec<u64>,
}

/// How prompt tokens are billed when a request asks for `n` samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputBilling {
    /// One call returns all `n` samples; the prompt is billed once.
    #[default]
    PerRequest,
    /// The API has no multi-sample support; `n` separate calls are made and
    /// the prompt is billed for each.
    PerSample,
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse>;

    fn count_input_tokens(&self, prompt_text: &str) -> u64;
}

static TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\w+|[^\w\s]").unwrap());

/// Whitespace-and-punctuation token estimate: each word run and each
/// punctuation character counts as one token.
pub fn approx_token_count(text: &str) -> u64 {
    TOKEN.find_iter(text).count() as u64
}
