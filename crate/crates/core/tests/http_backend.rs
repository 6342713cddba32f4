use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use dsc_core::backend::{Backend, CompletionRequest, HttpBackend, HttpSettings, InputBilling};
use dsc_core::Error;
use serde_json::Value;

/// Serves one scripted (status, body) per connection and records request
/// bodies.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(serde_json::from_slice(&buf).unwrap());
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            reader.get_mut().write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1/chat/completions"), seen)
}

fn chat(answers: &[&str], usage: Option<(u64, u64)>) -> String {
    let choices: Vec<Value> = answers
        .iter()
        .enumerate()
        .map(|(i, a)| serde_json::json!({"index": i, "message": {"role": "assistant", "content": a}}))
        .collect();
    let mut v = serde_json::json!({ "choices": choices });
    if let Some((p, c)) = usage {
        v["usage"] = serde_json::json!({"prompt_tokens": p, "completion_tokens": c, "total_tokens": p + c});
    }
    v.to_string()
}

fn backend(endpoint: String, billing: InputBilling) -> HttpBackend {
    HttpBackend::with_key(
        HttpSettings {
            endpoint,
            billing,
            backoff_ms: 1,
            timeout_secs: 10,
            ..HttpSettings::default()
        },
        Some("test-key".into()),
    )
}

#[test]
fn multi_sample_request_uses_reported_usage() {
    let (url, seen) = serve(vec![(200, chat(&["The answer is 4.", "The answer is 5."], Some((30, 12))))]);
    let b = backend(url, InputBilling::PerRequest);
    let resp = b.complete(&CompletionRequest::new("Q: 2+2?\nA:", 2, 0.7)).unwrap();
    assert_eq!(resp.texts.len(), 2);
    assert_eq!(resp.input_tokens, 30);
    assert_eq!(resp.output_tokens, 12);
    assert_eq!(resp.per_sample_output.iter().sum::<u64>(), 12);
    let body = &seen.lock().unwrap()[0];
    assert_eq!(body["n"], 2);
    assert_eq!(body["model"], "gpt-4");
    assert_eq!(body["messages"][0]["content"], "Q: 2+2?\nA:");
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, chat(&["The answer is 1."], Some((5, 3)))),
    ]);
    let resp = backend(url, InputBilling::PerRequest).complete(&CompletionRequest::new("x", 1, 0.0)).unwrap();
    assert_eq!(resp.texts, ["The answer is 1."]);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_three_attempts() {
    let (url, _) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
    let err = backend(url, InputBilling::PerRequest).complete(&CompletionRequest::new("x", 1, 0.0)).unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 3, .. }), "{err}");
    assert!(err.is_retriable());
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "{\"error\": \"bad\"}".into())]);
    let err = backend(url, InputBilling::PerRequest).complete(&CompletionRequest::new("x", 1, 0.0)).unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_a_parse_error() {
    let (url, _) = serve(vec![(200, "not json".into())]);
    let err = backend(url, InputBilling::PerRequest).complete(&CompletionRequest::new("x", 1, 0.0)).unwrap_err();
    assert!(matches!(err, Error::Parse(_)), "{err}");
    assert!(!err.is_retriable());
}

#[test]
fn per_sample_mode_pays_prompt_each_call() {
    let reply = chat(&["The answer is 2."], Some((40, 6)));
    let (url, seen) = serve(vec![(200, reply.clone()), (200, reply.clone()), (200, reply)]);
    let resp = backend(url, InputBilling::PerSample).complete(&CompletionRequest::new("x", 3, 0.7)).unwrap();
    assert_eq!(resp.texts.len(), 3);
    assert_eq!(resp.input_tokens, 120);
    assert_eq!(resp.output_tokens, 18);
    assert!(seen.lock().unwrap().iter().all(|b| b["n"] == 1));
}

#[test]
fn zero_samples_rejected_before_any_request() {
    let b = backend("http://127.0.0.1:9/unused".into(), InputBilling::PerRequest);
    assert!(b.complete(&CompletionRequest::new("x", 0, 0.7)).is_err());
    assert_eq!(b.count_input_tokens(""), 0);
}
