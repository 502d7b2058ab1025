//! Chat-completions client over HTTP: system+user messages, bounded
//! in-flight requests, exponential-backoff retries for transient failures,
//! and a per-run request budget.

use super::{Backend, BackendError, BackendResponse, CompletionContext, GenParams};
use crate::promptkit::PromptBundle;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Environment variable holding the API key.
pub const API_KEY_ENV: &str = "SITREF_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Endpoint prefix; requests go to `<base_url>/chat/completions`.
    pub base_url: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_delay_ms")]
    pub base_delay_ms: u64,
    #[serde(default = "default_true")]
    pub jitter: bool,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Hard cap on HTTP requests for the whole run, attempts included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_budget: Option<u64>,
}

fn default_api_key_env() -> String {
    API_KEY_ENV.to_string()
}
fn default_max_attempts() -> u32 {
    5
}
fn default_base_delay_ms() -> u64 {
    1000
}
fn default_true() -> bool {
    true
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_in_flight() -> usize {
    4
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> RemoteConfig {
        RemoteConfig {
            base_url: base_url.into(),
            api_key_env: default_api_key_env(),
            max_attempts: default_max_attempts(),
            base_delay_ms: default_base_delay_ms(),
            jitter: default_true(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_max_in_flight(),
            request_budget: None,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Semaphore {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.cv.wait(permits).expect("semaphore wait");
        }
        *permits -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut permits = self.0.permits.lock().expect("semaphore lock");
        *permits += 1;
        self.0.cv.notify_one();
    }
}

/// HTTP backend for any chat-completions-compatible endpoint.
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    in_flight: Semaphore,
    requests_sent: AtomicU64,
}

enum AttemptError {
    Retryable(BackendError),
    Terminal(BackendError),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<RemoteBackend, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let in_flight = Semaphore::new(config.max_in_flight);
        Ok(RemoteBackend {
            config,
            client,
            api_key,
            in_flight,
            requests_sent: AtomicU64::new(0),
        })
    }

    /// Total HTTP requests sent so far (attempts included).
    pub fn requests_sent(&self) -> u64 {
        self.requests_sent.load(Ordering::Relaxed)
    }

    fn attempt(
        &self,
        bundle: &PromptBundle,
        params: &GenParams,
    ) -> Result<BackendResponse, AttemptError> {
        if let Some(budget) = self.config.request_budget {
            let used = self.requests_sent.fetch_add(1, Ordering::SeqCst);
            if used >= budget {
                // rejected, not sent
                self.requests_sent.fetch_sub(1, Ordering::SeqCst);
                return Err(AttemptError::Terminal(BackendError::BudgetExhausted {
                    budget,
                }));
            }
        } else {
            self.requests_sent.fetch_add(1, Ordering::SeqCst);
        }

        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = ChatRequest {
            model: &params.model_name,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: &bundle.system_text,
                },
                ChatMessage {
                    role: "user",
                    content: &bundle.user_text,
                },
            ],
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
        };

        let mut request = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }

        let started = Instant::now();
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                AttemptError::Retryable(BackendError::Timeout(e.to_string()))
            } else {
                AttemptError::Retryable(BackendError::Transport(e.to_string()))
            }
        })?;

        let status = response.status().as_u16();
        match status {
            200 => {
                let parsed: ChatResponse = response
                    .json()
                    .map_err(|e| AttemptError::Terminal(BackendError::Protocol(e.to_string())))?;
                let choice = parsed.choices.into_iter().next().ok_or_else(|| {
                    AttemptError::Terminal(BackendError::Protocol("no choices".into()))
                })?;
                Ok(BackendResponse {
                    text: choice.message.content,
                    latency_ms: started.elapsed().as_millis() as u64,
                    from_cache: false,
                    token_counts: parsed.usage.map(|u| (u.prompt_tokens, u.completion_tokens)),
                })
            }
            401 | 403 => Err(AttemptError::Terminal(BackendError::Auth(format!(
                "http {status} from {url}"
            )))),
            429 => Err(AttemptError::Retryable(BackendError::RateLimited {
                attempts: 1,
            })),
            500..=599 => Err(AttemptError::Retryable(BackendError::Http {
                status,
                detail: response.text().unwrap_or_default(),
            })),
            _ => Err(AttemptError::Terminal(BackendError::Http {
                status,
                detail: response.text().unwrap_or_default(),
            })),
        }
    }

    fn backoff(&self, attempt: u32) {
        let base = self
            .config
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(10));
        let jitter = if self.config.jitter && base > 0 {
            rand::thread_rng().gen_range(0..=base / 2)
        } else {
            0
        };
        std::thread::sleep(Duration::from_millis(base + jitter));
    }
}

impl Backend for RemoteBackend {
    fn kind(&self) -> &'static str {
        "remote"
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        params: &GenParams,
        _ctx: &CompletionContext<'_>,
    ) -> Result<BackendResponse, BackendError> {
        let _permit = self.in_flight.acquire();
        let mut rate_limited = false;
        let mut last: Option<BackendError> = None;
        for attempt in 0..self.config.max_attempts {
            match self.attempt(bundle, params) {
                Ok(response) => return Ok(response),
                Err(AttemptError::Terminal(e)) => return Err(e),
                Err(AttemptError::Retryable(e)) => {
                    rate_limited |= matches!(e, BackendError::RateLimited { .. });
                    last = Some(e);
                    if attempt + 1 < self.config.max_attempts {
                        self.backoff(attempt);
                    }
                }
            }
        }
        let attempts = self.config.max_attempts;
        if rate_limited {
            Err(BackendError::RateLimited { attempts })
        } else {
            Err(BackendError::Timeout(format!(
                "gave up after {attempts} attempts: {}",
                last.map(|e| e.to_string())
                    .unwrap_or_else(|| "no attempt".into())
            )))
        }
    }
}

/// Test-only HTTP stub shared by the backend and runner tests.
#[cfg(test)]
pub(crate) mod stub {
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Minimal HTTP server that answers each connection with the next
    /// canned (status, body) pair. Returns the base url and a handle
    /// resolving to the number of requests served.
    pub(crate) fn stub_server(
        responses: Vec<(u16, String)>,
    ) -> (String, std::thread::JoinHandle<usize>) {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut served = 0;
            for (status, body) in responses {
                let (mut stream, _) = match listener.accept() {
                    Ok(pair) => pair,
                    Err(_) => break,
                };
                // Drain the request: headers, then content-length bytes.
                let mut buf = Vec::new();
                let mut tmp = [0u8; 1024];
                let header_end;
                loop {
                    let n = stream.read(&mut tmp).unwrap_or(0);
                    if n == 0 {
                        break;
                    }
                    buf.extend_from_slice(&tmp[..n]);
                    if let Some(pos) = find_header_end(&buf) {
                        header_end = pos;
                        let headers = String::from_utf8_lossy(&buf[..header_end]);
                        let content_length = headers
                            .lines()
                            .find_map(|l| {
                                l.to_ascii_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap_or(0))
                            })
                            .unwrap_or(0);
                        let mut have = buf.len() - header_end;
                        while have < content_length {
                            let n = stream.read(&mut tmp).unwrap_or(0);
                            if n == 0 {
                                break;
                            }
                            have += n;
                        }
                        break;
                    }
                }
                let reason = match status {
                    200 => "OK",
                    401 => "Unauthorized",
                    429 => "Too Many Requests",
                    500 => "Internal Server Error",
                    _ => "Status",
                };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
                served += 1;
            }
            served
        });
        (format!("http://{addr}"), handle)
    }

    fn find_header_end(buf: &[u8]) -> Option<usize> {
        buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
    }

    pub(crate) fn ok_body(content: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 42, "completion_tokens": 7}
        })
        .to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::stub::{ok_body, stub_server};
    use super::*;
    use crate::corpus::{Domain, EvalUnit, SceneRecord};
    use std::collections::BTreeMap;

    fn fast_config(base_url: String) -> RemoteConfig {
        RemoteConfig {
            base_delay_ms: 1,
            jitter: false,
            timeout_secs: 5,
            api_key_env: "SITREF_TEST_KEY_UNSET".into(),
            ..RemoteConfig::new(base_url)
        }
    }

    fn unit() -> EvalUnit {
        EvalUnit {
            dialogue_id: "d".into(),
            turn_index: 0,
            domain: Domain::Fashion,
            history: vec![],
            current_utterance: "u".into(),
            scene: SceneRecord {
                scene_id: "s".into(),
                objects: vec![],
                image_extent: None,
            },
            gold: Default::default(),
            meta: BTreeMap::new(),
        }
    }

    fn bundle() -> PromptBundle {
        PromptBundle {
            system_text: "sys".into(),
            user_text: "user".into(),
            fingerprint: String::new(),
        }
    }

    #[test]
    fn successful_completion_parses_text_and_usage() {
        let (url, handle) = stub_server(vec![(200, ok_body("<SOM>4<EOM>"))]);
        let backend = RemoteBackend::new(fast_config(url)).unwrap();
        let u = unit();
        let resp = backend
            .complete(
                &bundle(),
                &GenParams::default(),
                &CompletionContext { unit: &u },
            )
            .unwrap();
        assert_eq!(resp.text, "<SOM>4<EOM>");
        assert_eq!(resp.token_counts, Some((42, 7)));
        assert!(!resp.from_cache);
        assert_eq!(handle.join().unwrap(), 1);
    }

    #[test]
    fn transient_failures_are_retried_until_success() {
        let (url, handle) = stub_server(vec![
            (500, "{}".into()),
            (429, "{}".into()),
            (200, ok_body("<SOM><EOM>")),
        ]);
        let backend = RemoteBackend::new(fast_config(url)).unwrap();
        let u = unit();
        let resp = backend
            .complete(
                &bundle(),
                &GenParams::default(),
                &CompletionContext { unit: &u },
            )
            .unwrap();
        assert_eq!(resp.text, "<SOM><EOM>");
        assert_eq!(handle.join().unwrap(), 3);
        assert_eq!(backend.requests_sent(), 3);
    }

    #[test]
    fn five_server_errors_become_terminal() {
        let responses = (0..5).map(|_| (500u16, "{}".to_string())).collect();
        let (url, handle) = stub_server(responses);
        let backend = RemoteBackend::new(fast_config(url)).unwrap();
        let u = unit();
        let err = backend
            .complete(
                &bundle(),
                &GenParams::default(),
                &CompletionContext { unit: &u },
            )
            .unwrap_err();
        assert!(matches!(err, BackendError::Timeout(_)), "{err:?}");
        assert_eq!(handle.join().unwrap(), 5);
    }

    #[test]
    fn auth_failure_is_terminal_immediately() {
        let (url, handle) = stub_server(vec![(401, "{}".into())]);
        let backend = RemoteBackend::new(fast_config(url)).unwrap();
        let u = unit();
        let err = backend
            .complete(
                &bundle(),
                &GenParams::default(),
                &CompletionContext { unit: &u },
            )
            .unwrap_err();
        assert!(matches!(err, BackendError::Auth(_)), "{err:?}");
        assert_eq!(handle.join().unwrap(), 1);
    }

    #[test]
    fn budget_exhaustion_stops_requests() {
        let (url, _handle) = stub_server(vec![(200, ok_body("a")), (200, ok_body("b"))]);
        let mut config = fast_config(url);
        config.request_budget = Some(1);
        let backend = RemoteBackend::new(config).unwrap();
        let u = unit();
        let ctx = CompletionContext { unit: &u };
        backend
            .complete(&bundle(), &GenParams::default(), &ctx)
            .unwrap();
        let err = backend
            .complete(&bundle(), &GenParams::default(), &ctx)
            .unwrap_err();
        assert!(
            matches!(err, BackendError::BudgetExhausted { budget: 1 }),
            "{err:?}"
        );
    }
}
