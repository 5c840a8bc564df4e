//! Plumbing shared by every remote model backend: retry with exponential
//! backoff, a token-bucket rate limiter, and a blocking JSON-over-HTTP client.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::BackendError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_delay_ms: 1000,
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        Self {
            max_retries,
            initial_delay_ms: 0,
            backoff_factor: 2.0,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self.initial_delay_ms as f64 * self.backoff_factor.powi(retry as i32 - 1);
        Duration::from_millis(ms as u64)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or
    /// `max_retries + 1` attempts are used. Returns the outcome and the number
    /// of attempts made.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> (Result<T, BackendError>, u32) {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match op() {
                Ok(v) => return (Ok(v), attempts),
                Err(e) if e.is_retryable() && attempts <= self.max_retries => {
                    log::debug!("attempt {attempts} failed: {e}; retrying");
                    let d = self.delay(attempts);
                    if !d.is_zero() {
                        std::thread::sleep(d);
                    }
                }
                Err(e) => return (Err(e), attempts),
            }
        }
    }
}

/// Blocking token bucket. `rate` tokens per second, at most `burst` banked.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate: f64, burst: u32) -> Self {
        let burst = f64::from(burst.max(1));
        Self {
            rate,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("token bucket poisoned");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.rate;
                st.0 = (st.0 + refill).min(self.burst);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Where and how to reach a remote backend. The auth token is read from the
/// named environment variable at request time and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub token_env: Option<String>,
    pub timeout_secs: f64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            token_env: None,
            timeout_secs: 60.0,
        }
    }
}

pub struct HttpJsonClient {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpJsonClient {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        if config.url.is_empty() {
            return Err(BackendError::Transport("endpoint url is empty".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let mut req = self.client.post(&self.config.url).json(body);
        if let Some(var) = &self.config.token_env {
            let token = std::env::var(var).map_err(|_| {
                BackendError::Transport(format!("auth environment variable {var} is not set"))
            })?;
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(self.config.url.clone())
            } else {
                BackendError::Transport(e.without_url().to_string())
            }
        })?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport(format!("server answered {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::InvalidResponse(format!("server answered {status}")));
        }
        resp.json::<Resp>()
            .map_err(|e| BackendError::InvalidResponse(e.without_url().to_string()))
    }
}

pub fn b64_encode(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn b64_decode(s: &str) -> Result<Vec<u8>, BackendError> {
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| BackendError::InvalidResponse(format!("bad base64 payload: {e}")))
}

/// Stable 64-bit seed derived from a base seed and labelled byte strings.
pub fn derive_seed(base: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 digest is 32 bytes"))
}
