//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, GenerationRequest, LlmError};

pub const API_KEY_ENV: &str = "S3_LLM_API_KEY";
pub const BASE_URL_ENV: &str = "S3_LLM_BASE_URL";
const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: String,
    pub timeout: Duration,
    /// Retries after the first attempt for 429, 5xx and timeouts.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    /// Prompts estimated above this many tokens are rejected, never
    /// truncated. `None` disables the check.
    pub max_prompt_tokens: Option<usize>,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: api_key.into(),
            timeout: Duration::from_secs(60),
            max_retries: 5,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
            max_prompt_tokens: Some(4096),
        }
    }

    /// Reads the key from `S3_LLM_API_KEY` and the base URL from
    /// `S3_LLM_BASE_URL` (OpenAI's public endpoint when unset).
    pub fn from_env(model: impl Into<String>) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or(LlmError::MissingApiKey(API_KEY_ENV))?;
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Ok(Self::new(base, model, key))
    }
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

/// Rough token count: four characters per token.
fn estimate_tokens(prompt: &str) -> usize {
    prompt.chars().count().div_ceil(4)
}

enum Attempt {
    Done(Vec<String>),
    Retry(LlmError),
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(cfg.timeout)).http_status_as_error(false).build().into();
        Self { cfg, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn body(&self, req: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{ "role": "user", "content": req.prompt }],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
            "n": req.n,
        });
        if let Some(stop) = &req.stop {
            body["stop"] = json!(stop);
        }
        body
    }

    fn attempt(&self, body: &Value, n: u32, attempts: u32) -> Result<Attempt, LlmError> {
        let resp = self
            .agent
            .post(&self.url())
            .header("Authorization", &format!("Bearer {}", self.cfg.api_key))
            .send_json(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Ok(Attempt::Retry(LlmError::Timeout { attempts })),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => {
                return Ok(Attempt::Retry(LlmError::Timeout { attempts }));
            }
            Err(e) => return Err(LlmError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(LlmError::Auth(status)),
            429 => return Ok(Attempt::Retry(LlmError::RateLimited { attempts })),
            500..=599 => return Ok(Attempt::Retry(LlmError::Server { status, attempts })),
            _ => {
                let body = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(LlmError::Http { status, body: body.chars().take(300).collect() });
            }
        }
        let v: Value = resp.body_mut().read_json().map_err(|e| LlmError::Malformed(e.to_string()))?;
        let choices = v["choices"].as_array().ok_or_else(|| LlmError::Malformed("no `choices` array".into()))?;
        let mut indexed: Vec<(u64, String)> = choices
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let text = c["message"]["content"]
                    .as_str()
                    .ok_or_else(|| LlmError::Malformed("choice without message.content".into()))?;
                Ok((c["index"].as_u64().unwrap_or(i as u64), text.to_string()))
            })
            .collect::<Result<_, LlmError>>()?;
        if indexed.len() < n as usize {
            return Err(LlmError::Malformed(format!("asked for {n} choices, got {}", indexed.len())));
        }
        indexed.sort_by_key(|(i, _)| *i);
        Ok(Attempt::Done(indexed.into_iter().take(n as usize).map(|(_, t)| t).collect()))
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}@{}", self.cfg.model, self.cfg.base_url.trim_end_matches('/'))
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, LlmError> {
        req.validate()?;
        if let Some(limit) = self.cfg.max_prompt_tokens {
            let estimated = estimate_tokens(&req.prompt);
            if estimated > limit {
                return Err(LlmError::PromptTooLong { estimated, limit });
            }
        }
        let body = self.body(req);
        let mut backoff = self.cfg.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, req.n, attempts)? {
                Attempt::Done(out) => return Ok(out),
                Attempt::Retry(err) => {
                    if attempts > self.cfg.max_retries {
                        return Err(err);
                    }
                    log::warn!("{err}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff = (backoff * 2).min(self.cfg.max_backoff);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    /// Serves `responses` in turn (the last one repeats), counting requests.
    fn serve(responses: Vec<(u16, &'static str)>) -> (String, Arc<AtomicU32>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicU32::new(0));
        let h = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                let i = h.fetch_add(1, Ordering::SeqCst) as usize;
                let (status, text) = responses[i.min(responses.len() - 1)];
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
            }
        });
        (format!("http://{addr}/v1"), hits)
    }

    fn backend(base: String) -> RemoteBackend {
        let mut cfg = RemoteConfig::new(base, "m", "k");
        cfg.max_retries = 2;
        cfg.initial_backoff = Duration::from_millis(1);
        cfg.timeout = Duration::from_secs(5);
        RemoteBackend::new(cfg)
    }

    #[test]
    fn repeated_429_is_rate_limit_error() {
        let (base, hits) = serve(vec![(429, "{}")]);
        let err = backend(base).generate(&GenerationRequest::new("hi")).unwrap_err();
        assert!(matches!(err, LlmError::RateLimited { attempts: 3 }), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_then_succeeds() {
        let ok = r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"hello"}}]}"#;
        let (base, hits) = serve(vec![(503, "{}"), (200, ok)]);
        let out = backend(base).generate(&GenerationRequest::new("hi")).unwrap();
        assert_eq!(out, ["hello"]);
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let (base, hits) = serve(vec![(401, "{}")]);
        let err = backend(base).generate(&GenerationRequest::new("hi")).unwrap_err();
        assert!(matches!(err, LlmError::Auth(401)));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn long_prompt_rejected_before_sending() {
        let b = backend("http://127.0.0.1:9/v1".into());
        let err = b.generate(&GenerationRequest::new("x".repeat(4096 * 4 + 1))).unwrap_err();
        assert!(matches!(err, LlmError::PromptTooLong { limit: 4096, .. }));
    }
}
