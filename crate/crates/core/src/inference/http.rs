use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, CandidateLogprobs, GenerationResponse, Usage};
use crate::error::{Error, Result};
use crate::promptkit::CompiledPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_ms.saturating_mul(1 << attempt.min(16)))
    }
}

/// Connection settings for a chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u32,
}

fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> f64 {
    60.0
}
fn default_max_tokens() -> u32 {
    256
}
fn default_top_logprobs() -> u32 {
    20
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::Config("timeout_s must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::Config("retry.max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    /// Request body for one prompt.
    pub fn request_body(&self, prompt: &CompiledPrompt) -> Value {
        json!({
            "model": self.model_name,
            "messages": [{"role": "user", "content": prompt.full_text}],
            "temperature": 0,
            "logprobs": true,
            "top_logprobs": self.top_logprobs,
            "max_tokens": self.max_tokens,
        })
    }
}

pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable `{var}` holding the API key is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(HttpBackend {
            config,
            api_key,
            client,
        })
    }

    fn attempt(&self, body: &Value) -> Result<Value, (BackendError, bool)> {
        let mut req = self.client.post(&self.config.endpoint_url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| (BackendError::Transport(e.to_string()), true))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| (BackendError::Transport(e.to_string()), true))?;
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            let body_excerpt: String = text.chars().take(200).collect();
            return Err((
                BackendError::Status {
                    code: status.as_u16(),
                    body_excerpt,
                },
                retryable,
            ));
        }
        serde_json::from_str(&text).map_err(|e| {
            (
                BackendError::Status {
                    code: status.as_u16(),
                    body_excerpt: format!("unparseable body: {e}"),
                },
                false,
            )
        })
    }
}

impl Backend for HttpBackend {
    fn generate(&self, prompt: &CompiledPrompt) -> Result<GenerationResponse, BackendError> {
        let body = self.config.request_body(prompt);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(v) => {
                    let (pos, neg) = &prompt.candidate_tokens;
                    return Ok(parse_chat_response(&v, pos, neg));
                }
                Err((err, retryable)) => {
                    attempt += 1;
                    if !retryable || attempt >= self.config.retry.max_attempts {
                        return Err(err);
                    }
                    thread::sleep(self.config.retry.delay(attempt - 1));
                }
            }
        }
    }
}

fn normalize_token(tok: &str) -> String {
    tok.trim_start_matches(['Ġ', '▁'])
        .trim()
        .to_lowercase()
}

/// Extracts the answer text and candidate log-probabilities from a
/// chat-completions response body.
pub fn parse_chat_response(v: &Value, positive: &str, negative: &str) -> GenerationResponse {
    let choice = &v["choices"][0];
    let text = choice["message"]["content"]
        .as_str()
        .or_else(|| choice["text"].as_str())
        .unwrap_or_default()
        .to_string();

    let first = &choice["logprobs"]["content"][0];
    let mut seen: BTreeMap<String, f64> = BTreeMap::new();
    let mut any = false;
    let mut note = |tok: Option<&str>, lp: Option<f64>| {
        if let (Some(tok), Some(lp)) = (tok, lp) {
            any = true;
            let e = seen.entry(normalize_token(tok)).or_insert(f64::NEG_INFINITY);
            *e = e.max(lp);
        }
    };
    note(first["token"].as_str(), first["logprob"].as_f64());
    if let Some(top) = first["top_logprobs"].as_array() {
        for entry in top {
            note(entry["token"].as_str(), entry["logprob"].as_f64());
        }
    }
    let (candidate_logprobs, logprobs_incomplete) = if any {
        match (
            seen.get(&positive.to_lowercase()),
            seen.get(&negative.to_lowercase()),
        ) {
            (Some(&p), Some(&n)) => (
                Some(CandidateLogprobs {
                    positive: p,
                    negative: n,
                }),
                false,
            ),
            _ => (None, true),
        }
    } else {
        (None, false)
    };
    let usage = v.get("usage").map(|u| Usage {
        prompt_tokens: u["prompt_tokens"].as_u64(),
        completion_tokens: u["completion_tokens"].as_u64(),
    });
    GenerationResponse {
        text,
        candidate_logprobs,
        logprobs_incomplete,
        usage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{lookup_task, Segment, Slice, Speaker, Turn};
    use crate::promptkit::compile_prompt;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    fn prompt() -> CompiledPrompt {
        let slice = Slice {
            visit_id: "v".into(),
            slice_index: 0,
            turns: vec![Turn {
                visit_id: "v".into(),
                speaker: Speaker::Patient,
                start_s: 0.0,
                end_s: 1.0,
                text: "I feel fine".into(),
            }],
            word_count: 3,
            segment: Segment::Start,
        };
        compile_prompt("FLAN-ZS".parse().unwrap(), lookup_task("provider_warmth").unwrap(), &slice, None, 0).unwrap()
    }

    fn config(url: String) -> BackendConfig {
        BackendConfig {
            endpoint_url: url,
            model_name: "test-model".into(),
            api_key_env: None,
            max_in_flight: 1,
            timeout_s: 5.0,
            retry: RetryPolicy { max_attempts: 2, backoff_ms: 1 },
            max_tokens: 16,
            top_logprobs: 5,
        }
    }

    /// Serves `responses` in order, one connection each, and reports the
    /// request bodies it saw.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((headers, String::from_utf8(buf).unwrap())).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (url, rx)
    }

    #[test]
    fn wire_request_and_response() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"The visit was routine."},
            "logprobs":{"content":[{"token":"The","logprob":-0.3,"top_logprobs":[
                {"token":"The","logprob":-0.3},{"token":" yes","logprob":-1.9},{"token":"No","logprob":-0.2}]}]}}],
            "usage":{"prompt_tokens":120,"completion_tokens":6}}"#;
        let (url, rx) = serve(vec![(200, body.to_string())]);
        let backend = HttpBackend::new(config(url)).unwrap();
        let r = backend.generate(&prompt()).unwrap();
        assert_eq!(r.text, "The visit was routine.");
        assert_eq!(r.candidate_logprobs, Some(CandidateLogprobs { positive: -1.9, negative: -0.2 }));
        assert_eq!(r.usage.unwrap().prompt_tokens, Some(120));

        let (headers, sent) = rx.recv().unwrap();
        assert!(headers.starts_with("POST /v1/chat/completions"));
        let sent: Value = serde_json::from_str(&sent).unwrap();
        assert_eq!(sent["temperature"], 0);
        assert_eq!(sent["logprobs"], true);
        assert_eq!(sent["top_logprobs"], 5);
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["messages"][0]["content"], prompt().full_text);
    }

    #[test]
    fn server_errors_are_retried_then_reported() {
        let (url, _rx) = serve(vec![(500, "{\"error\":\"boom\"}".into()), (503, "down".into())]);
        let backend = HttpBackend::new(config(url)).unwrap();
        let err = backend.generate(&prompt()).unwrap_err();
        assert_eq!(err, BackendError::Status { code: 503, body_excerpt: "down".into() });
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, rx) = serve(vec![(400, "bad request".into())]);
        let backend = HttpBackend::new(config(url)).unwrap();
        assert!(matches!(backend.generate(&prompt()), Err(BackendError::Status { code: 400, .. })));
        assert_eq!(rx.iter().count(), 1);
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let backend = HttpBackend::new(config(format!("http://{addr}/v1/chat/completions"))).unwrap();
        assert!(matches!(backend.generate(&prompt()), Err(BackendError::Transport(_))));
    }

    #[test]
    fn candidates_outside_top_k() {
        let v: Value = serde_json::from_str(
            r#"{"choices":[{"message":{"content":"Well"},"logprobs":{"content":[{"token":"Well","logprob":-0.1,"top_logprobs":[{"token":"Well","logprob":-0.1},{"token":"yes","logprob":-3.0}]}]}}]}"#,
        )
        .unwrap();
        let r = parse_chat_response(&v, "yes", "no");
        assert!(r.candidate_logprobs.is_none());
        assert!(r.logprobs_incomplete);
        let v: Value = serde_json::from_str(r#"{"choices":[{"message":{"content":"yes"}}]}"#).unwrap();
        let r = parse_chat_response(&v, "yes", "no");
        assert!(!r.logprobs_incomplete);
    }

    #[test]
    fn config_validation() {
        let mut c = config("http://x".into());
        c.max_in_flight = 0;
        assert!(c.validate().is_err());
        let mut c = config("http://x".into());
        c.timeout_s = 0.0;
        assert!(c.validate().is_err());
    }
}
