//! HTTP backend speaking the OpenAI-compatible chat/completions protocol,
//! with bounded concurrency, retry with exponential backoff, and echo-mode
//! scoring.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::Deserialize;
use serde_json::json;
use thoughtforge_core::backend::{Backend, BackendError, GenRequest, ScoredText};

use crate::config::BackendConfig;

/// Environment variable holding the bearer token for authenticated
/// endpoints. Unset means requests go out without an Authorization header.
pub const API_KEY_ENV: &str = "THOUGHTFORGE_API_KEY";

/// Longest Retry-After we are willing to honor before giving the attempt
/// back to the retry loop's own schedule.
const MAX_RETRY_AFTER_SECS: u64 = 60;

/// A counting semaphore bounding in-flight requests.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.semaphore.permits.lock().unwrap() += 1;
        self.semaphore.available.notify_one();
    }
}

/// Backend that talks to an OpenAI-compatible inference server.
pub struct HttpBackend {
    agent: ureq::Agent,
    base_url: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    retry_base: Duration,
    permits: Semaphore,
}

impl HttpBackend {
    /// Builds a backend from config, taking the API key from the
    /// `THOUGHTFORGE_API_KEY` environment variable when present.
    pub fn from_config(config: &BackendConfig) -> Self {
        Self::new(config, std::env::var(API_KEY_ENV).ok())
    }

    /// Builds a backend with an explicit (possibly absent) API key.
    pub fn new(config: &BackendConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            base_url: config.base_url.trim_end_matches('/').to_owned(),
            model: config.model.clone(),
            api_key,
            max_retries: config.max_retries,
            retry_base: Duration::from_millis(1000),
            permits: Semaphore::new(config.concurrency),
        }
    }

    /// Shrinks the backoff base; only test servers are fast enough to make
    /// the default a waste of time.
    #[cfg(test)]
    fn with_retry_base(mut self, base: Duration) -> Self {
        self.retry_base = base;
        self
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<(u16, String, Option<u64>), BackendError> {
        let _permit = self.permits.acquire();
        let url = format!("{}{}", self.base_url, path);
        let mut request = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        match request.send_json(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let retry_after = resp
                    .headers()
                    .get("retry-after")
                    .and_then(|v| v.to_str().ok())
                    .and_then(|s| s.parse().ok());
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| BackendError::BadResponse {
                        status,
                        body: format!("unreadable body: {e}"),
                    })?;
                Ok((status, text, retry_after))
            }
            Err(ureq::Error::Timeout(_)) => Err(BackendError::Timeout),
            Err(e) => Err(BackendError::BadResponse {
                status: 0,
                body: e.to_string(),
            }),
        }
    }

    /// Issues the request, mapping status codes to errors and retrying
    /// timeouts, rate limits, and server errors with exponential backoff.
    fn post_with_retries(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<String, BackendError> {
        let mut attempts = 0u32;
        let mut backoff = self.retry_base;
        loop {
            attempts += 1;
            let outcome = self.post(path, body).and_then(|(status, text, retry_after)| {
                match status {
                    200..=299 => Ok(text),
                    429 => Err(BackendError::RateLimited {
                        retry_after_secs: retry_after,
                    }),
                    _ => Err(BackendError::BadResponse { status, body: text }),
                }
            });
            let err = match outcome {
                Ok(text) => return Ok(text),
                Err(e) => e,
            };
            if !is_retryable(&err) {
                return Err(err);
            }
            if attempts > self.max_retries {
                if self.max_retries == 0 {
                    return Err(err);
                }
                return Err(BackendError::ExhaustedRetries {
                    attempts,
                    last: err.to_string(),
                });
            }
            std::thread::sleep(retry_delay(&err, backoff));
            backoff *= 2;
        }
    }
}

fn is_retryable(err: &BackendError) -> bool {
    match err {
        BackendError::Timeout | BackendError::RateLimited { .. } => true,
        BackendError::BadResponse { status, .. } => *status >= 500,
        _ => false,
    }
}

/// Waits the server-requested interval when one was given, otherwise the
/// current backoff with up to 25% jitter so stalled workers do not thunder
/// back in unison.
fn retry_delay(err: &BackendError, backoff: Duration) -> Duration {
    if let BackendError::RateLimited {
        retry_after_secs: Some(secs),
    } = err
    {
        return Duration::from_secs((*secs).min(MAX_RETRY_AFTER_SECS));
    }
    let jitter = rand::thread_rng().gen_range(0.0..0.25);
    backoff.mul_f64(1.0 + jitter)
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    content: Vec<ChatTokenLogprob>,
}

#[derive(Deserialize)]
struct ChatTokenLogprob {
    logprob: f64,
}

#[derive(Deserialize)]
struct EchoResponse {
    choices: Vec<EchoChoice>,
}

#[derive(Deserialize)]
struct EchoChoice {
    logprobs: Option<EchoLogprobs>,
}

#[derive(Deserialize)]
struct EchoLogprobs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

fn parse_body<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, BackendError> {
    serde_json::from_str(text).map_err(|e| BackendError::BadResponse {
        status: 200,
        body: format!("unparseable response: {e}"),
    })
}

impl Backend for HttpBackend {
    fn model_ref(&self) -> &str {
        &self.model
    }

    fn generate(&self, request: &GenRequest) -> Result<ScoredText, BackendError> {
        request.check()?;
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "logprobs": true,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if let Some(stop) = &request.stop {
            if !stop.is_empty() {
                body["stop"] = json!(stop);
            }
        }
        let text = self.post_with_retries("/v1/chat/completions", &body)?;
        let parsed: ChatResponse = parse_body(&text)?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::BadResponse {
                status: 200,
                body: "response carried no choices".to_owned(),
            })?;
        let token_logprobs = choice.logprobs.map(|lp| {
            lp.content
                .iter()
                .map(|t| t.logprob.min(0.0))
                .collect::<Vec<f64>>()
        });
        Ok(ScoredText {
            text: choice.message.content,
            token_logprobs: token_logprobs.filter(|lp| !lp.is_empty()),
        })
    }

    fn score(&self, prompt: &str, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.is_empty() {
            return Err(BackendError::InvalidRequest(
                "cannot score empty text".to_owned(),
            ));
        }
        let body = json!({
            "model": self.model,
            "prompt": format!("{prompt}{text}"),
            "echo": true,
            "max_tokens": 0,
            "logprobs": 0,
        });
        let raw = self.post_with_retries("/v1/completions", &body)?;
        let parsed: EchoResponse = parse_body(&raw)?;
        let logprobs = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::BadResponse {
                status: 200,
                body: "response carried no logprobs".to_owned(),
            })?;
        // Keep only tokens that start inside `text`; the echoed prompt
        // tokens (and the leading null the first token always has) are the
        // context, not the thing being scored.
        Ok(logprobs
            .text_offset
            .iter()
            .zip(&logprobs.token_logprobs)
            .filter(|(offset, _)| **offset >= prompt.len())
            .filter_map(|(_, lp)| lp.map(|v| v.min(0.0)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::thread::JoinHandle;
    use crate::config::BackendKind;

    struct Canned {
        status: u16,
        headers: Vec<(&'static str, String)>,
        body: String,
    }

    impl Canned {
        fn ok(body: serde_json::Value) -> Self {
            Canned {
                status: 200,
                headers: vec![],
                body: body.to_string(),
            }
        }

        fn status(status: u16, body: &str) -> Self {
            Canned {
                status,
                headers: vec![],
                body: body.to_owned(),
            }
        }
    }

    #[derive(Debug)]
    struct Captured {
        path: String,
        headers: Vec<String>,
        body: serde_json::Value,
    }

    impl Captured {
        fn header(&self, name: &str) -> Option<&str> {
            let prefix = format!("{name}:");
            self.headers
                .iter()
                .find(|h| h.to_ascii_lowercase().starts_with(&prefix))
                .map(|h| h[prefix.len()..].trim())
        }
    }

    /// One-shot HTTP server: answers each canned response to one request
    /// (closing the connection after each) and returns what it saw.
    fn mock_server(responses: Vec<Canned>) -> (String, JoinHandle<Vec<Captured>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut captured = Vec::new();
            for canned in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let header_end = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        break pos + 4;
                    }
                };
                let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
                let mut lines = head.lines();
                let request_line = lines.next().unwrap_or_default().to_owned();
                // Lowercase only the name; header values keep their case.
                let headers: Vec<String> = lines
                    .filter(|l| !l.is_empty())
                    .map(|l| match l.split_once(':') {
                        Some((name, value)) => {
                            format!("{}:{}", name.to_ascii_lowercase(), value)
                        }
                        None => l.to_owned(),
                    })
                    .collect();
                let content_length: usize = headers
                    .iter()
                    .find_map(|h| h.strip_prefix("content-length:"))
                    .and_then(|v| v.trim().parse().ok())
                    .unwrap_or(0);
                while buf.len() < header_end + content_length {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                }
                let body_bytes = &buf[header_end..header_end + content_length];
                captured.push(Captured {
                    path: request_line.split_whitespace().nth(1).unwrap_or("").to_owned(),
                    headers,
                    body: serde_json::from_slice(body_bytes).unwrap_or(serde_json::Value::Null),
                });
                let mut extra = String::new();
                for (name, value) in &canned.headers {
                    extra.push_str(&format!("{name}: {value}\r\n"));
                }
                let response = format!(
                    "HTTP/1.1 {} mock\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n{}\r\n{}",
                    canned.status,
                    canned.body.len(),
                    extra,
                    canned.body
                );
                stream.write_all(response.as_bytes()).unwrap();
            }
            captured
        });
        (base, handle)
    }

    fn backend_for(base_url: &str, api_key: Option<&str>, max_retries: u32) -> HttpBackend {
        let config = BackendConfig {
            kind: BackendKind::Http,
            base_url: base_url.to_owned(),
            max_retries,
            ..BackendConfig::default()
        };
        HttpBackend::new(&config, api_key.map(str::to_owned))
            .with_retry_base(Duration::from_millis(1))
    }

    fn chat_reply(content: &str, logprobs: &[f64]) -> serde_json::Value {
        let tokens: Vec<serde_json::Value> =
            logprobs.iter().map(|lp| json!({"logprob": lp})).collect();
        json!({
            "choices": [{
                "message": {"role": "assistant", "content": content},
                "logprobs": {"content": tokens},
            }]
        })
    }

    #[test]
    fn generate_sends_auth_and_parses_content() {
        let (base, server) = mock_server(vec![Canned::ok(chat_reply("an answer", &[-0.5, -0.25]))]);
        let backend = backend_for(&base, Some("sekrit"), 0);
        let req = GenRequest::new("solve this")
            .with_temperature(0.7)
            .with_seed(42)
            .with_max_tokens(128);
        let out = backend.generate(&req).unwrap();
        assert_eq!(out.text, "an answer");
        assert_eq!(out.token_logprobs, Some(vec![-0.5, -0.25]));

        let captured = server.join().unwrap();
        assert_eq!(captured.len(), 1);
        assert_eq!(captured[0].path, "/v1/chat/completions");
        assert_eq!(captured[0].header("authorization"), Some("Bearer sekrit"));
        assert_eq!(captured[0].body["model"], "local-model");
        assert_eq!(captured[0].body["messages"][0]["content"], "solve this");
        assert_eq!(captured[0].body["max_tokens"], 128);
        assert_eq!(captured[0].body["seed"], 42);
    }

    #[test]
    fn missing_api_key_sends_no_auth_header() {
        let (base, server) = mock_server(vec![Canned::ok(chat_reply("x", &[]))]);
        let backend = backend_for(&base, None, 0);
        backend.generate(&GenRequest::new("q")).unwrap();
        let captured = server.join().unwrap();
        assert_eq!(captured[0].header("authorization"), None);
    }

    #[test]
    fn rate_limit_is_retried_until_success() {
        let mut limited = Canned::status(429, "{\"error\": \"slow down\"}");
        limited.headers.push(("retry-after", "0".to_owned()));
        let (base, server) = mock_server(vec![limited, Canned::ok(chat_reply("ok", &[]))]);
        let backend = backend_for(&base, None, 3);
        let out = backend.generate(&GenRequest::new("q")).unwrap();
        assert_eq!(out.text, "ok");
        assert_eq!(server.join().unwrap().len(), 2);
    }

    #[test]
    fn server_errors_exhaust_the_retry_budget() {
        let responses = vec![
            Canned::status(500, "boom"),
            Canned::status(503, "still down"),
        ];
        let (base, server) = mock_server(responses);
        let backend = backend_for(&base, None, 1);
        let err = backend.generate(&GenRequest::new("q")).unwrap_err();
        match err {
            BackendError::ExhaustedRetries { attempts, last } => {
                assert_eq!(attempts, 2);
                assert!(last.contains("503"), "last error was: {last}");
            }
            other => panic!("expected exhausted retries, got {other:?}"),
        }
        assert_eq!(server.join().unwrap().len(), 2);
    }

    #[test]
    fn client_errors_fail_without_retry() {
        let (base, server) = mock_server(vec![Canned::status(400, "bad request")]);
        let backend = backend_for(&base, None, 3);
        let err = backend.generate(&GenRequest::new("q")).unwrap_err();
        assert!(matches!(
            err,
            BackendError::BadResponse { status: 400, .. }
        ));
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn score_keeps_only_tokens_inside_the_scored_text() {
        // Prompt is "hello world " (12 bytes); the echoed prompt tokens sit
        // at offsets 0 and 6, the scored text's at 12 and 16.
        let reply = json!({
            "choices": [{
                "logprobs": {
                    "token_logprobs": [null, -0.9, -0.25, -0.125],
                    "text_offset": [0, 6, 12, 16],
                }
            }]
        });
        let (base, server) = mock_server(vec![Canned::ok(reply)]);
        let backend = backend_for(&base, None, 0);
        let lp = backend.score("hello world ", "the text").unwrap();
        assert_eq!(lp, vec![-0.25, -0.125]);

        let captured = server.join().unwrap();
        assert_eq!(captured[0].path, "/v1/completions");
        assert_eq!(captured[0].body["prompt"], "hello world the text");
        assert_eq!(captured[0].body["echo"], true);
        assert_eq!(captured[0].body["max_tokens"], 0);
    }

    #[test]
    fn empty_choices_are_a_bad_response() {
        let (base, _server) = mock_server(vec![Canned::ok(json!({"choices": []}))]);
        let backend = backend_for(&base, None, 0);
        let err = backend.generate(&GenRequest::new("q")).unwrap_err();
        assert!(matches!(err, BackendError::BadResponse { status: 200, .. }));
    }
}
