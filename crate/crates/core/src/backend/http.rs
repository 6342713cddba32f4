//! Blocking client for chat-completion style endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{approx_token_count, Backend, CompletionRequest, CompletionResponse, InputBilling};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub billing: InputBilling,
    pub timeout_secs: u64,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            billing: InputBilling::PerRequest,
            timeout_secs: 120,
            backoff_ms: 500,
        }
    }
}

pub struct HttpBackend {
    settings: HttpSettings,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable. A missing
    /// variable is allowed (local endpoints often need no key).
    pub fn new(settings: HttpSettings) -> Self {
        let api_key = std::env::var(&settings.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(settings, api_key)
    }

    pub fn with_key(settings: HttpSettings, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            settings,
            api_key,
            agent,
        }
    }

    fn post_once(&self, body: &Value) -> Result<String> {
        let mut req = self.agent.post(&self.settings.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err(Error::Transport {
                attempts: 1,
                message: format!("HTTP {status}: {}", truncate(&text)),
            }),
            _ => Err(Error::Backend(format!("HTTP {status}: {}", truncate(&text)))),
        }
    }

    fn post_with_retry(&self, body: &Value) -> Result<String> {
        let mut delay = Duration::from_millis(self.settings.backoff_ms);
        let mut attempt = 1;
        loop {
            match self.post_once(body) {
                Err(Error::Transport { message, .. }) if attempt < MAX_ATTEMPTS => {
                    log_retry(attempt, &message);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(Error::Transport { message, .. }) => {
                    return Err(Error::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                other => return other,
            }
        }
    }

    fn call(&self, req: &CompletionRequest, n: usize) -> Result<CompletionResponse> {
        let body = json!({
            "model": self.settings.model,
            "messages": [{ "role": "user", "content": req.prompt_text }],
            "n": n,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let raw = self.post_with_retry(&body)?;
        parse_chat_response(&raw, n, &req.prompt_text)
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn log_retry(attempt: u32, message: &str) {
    eprintln!("request attempt {attempt} failed ({message}); retrying");
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Parses a chat-completion payload. Token counts come from `usage` when the
/// server reports it; otherwise they are estimated.
pub(crate) fn parse_chat_response(raw: &str, n: usize, prompt: &str) -> Result<CompletionResponse> {
    let parsed: ChatResponse = serde_json::from_str(raw).map_err(|e| Error::Parse(e.to_string()))?;
    if parsed.choices.len() != n {
        return Err(Error::Parse(format!("expected {n} choices, got {}", parsed.choices.len())));
    }
    let texts: Vec<String> = parsed.choices.into_iter().map(|c| c.message.content.unwrap_or_default()).collect();
    let mut per_sample_output: Vec<u64> = texts.iter().map(|t| approx_token_count(t)).collect();
    let (input_tokens, output_tokens) = match parsed.usage {
        Some(u) => {
            // spread the reported completion total across samples by estimate
            match per_sample_output.iter().sum::<u64>() {
                0 => {
                    per_sample_output.iter_mut().for_each(|x| *x = 0);
                    per_sample_output[0] = u.completion_tokens;
                }
                est => {
                    let mut assigned = 0;
                    for x in per_sample_output.iter_mut() {
                        *x = *x * u.completion_tokens / est;
                        assigned += *x;
                    }
                    per_sample_output[0] += u.completion_tokens - assigned;
                }
            }
            (u.prompt_tokens, u.completion_tokens)
        }
        None => (approx_token_count(prompt), per_sample_output.iter().sum()),
    };
    Ok(CompletionResponse {
        texts,
        input_tokens,
        output_tokens,
        per_sample_output,
    })
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        req.validate()?;
        match self.settings.billing {
            InputBilling::PerRequest => self.call(req, req.n),
            InputBilling::PerSample => {
                let mut out = CompletionResponse {
                    texts: Vec::with_capacity(req.n),
                    input_tokens: 0,
                    output_tokens: 0,
                    per_sample_output: Vec::with_capacity(req.n),
                };
                for _ in 0..req.n {
                    let one = self.call(req, 1)?;
                    out.texts.extend(one.texts);
                    out.input_tokens += one.input_tokens;
                    out.output_tokens += one.output_tokens;
                    out.per_sample_output.extend(one.per_sample_output);
                }
                Ok(out)
            }
        }
    }

    fn count_input_tokens(&self, prompt_text: &str) -> u64 {
        approx_token_count(prompt_text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_usage() {
        let raw = r#"{"choices":[{"message":{"content":"The answer is 4."}},{"message":{"content":"so 5"}}],
                      "usage":{"prompt_tokens":846,"completion_tokens":300}}"#;
        let r = parse_chat_response(raw, 2, "p").unwrap();
        assert_eq!(r.texts.len(), 2);
        assert_eq!(r.input_tokens, 846);
        assert_eq!(r.output_tokens, 300);
        assert_eq!(r.per_sample_output.iter().sum::<u64>(), 300);
    }

    #[test]
    fn estimates_without_usage() {
        let raw = r#"{"choices":[{"message":{"content":"The answer is 4."}}]}"#;
        let r = parse_chat_response(raw, 1, "Q: two plus two?\nA:").unwrap();
        assert_eq!(r.output_tokens, 5);
        assert_eq!(r.input_tokens, approx_token_count("Q: two plus two?\nA:"));
    }

    #[test]
    fn malformed_is_parse_error() {
        assert!(matches!(parse_chat_response("{not json", 1, ""), Err(Error::Parse(_))));
        let raw = r#"{"choices":[]}"#;
        assert!(matches!(parse_chat_response(raw, 1, ""), Err(Error::Parse(_))));
    }
}
