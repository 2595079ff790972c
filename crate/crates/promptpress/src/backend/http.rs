//! HTTP client backend for inference servers that expose token
//! log-probabilities.
//!
//! Wire protocol:
//!
//! - `POST {endpoint}/score` with `{"prefix": [string], "target": [string]}`
//!   returns `{"nll": [number]}` where `nll` has one entry per target token.
//! - `POST {endpoint}/tokenize` with `{"text": string}` returns
//!   `{"tokens": [string]}`. Token strings must concatenate back to the
//!   text; the client joins retained tokens by plain concatenation.
//!
//! Transient failures (connect errors, timeouts, 5xx responses) are retried
//! with exponential backoff up to the configured cap. Once the retry budget
//! is exhausted the surfaced transport error is tagged not retryable.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, PplBackend, ScoreRequest, ScoredToken, MAX_NLL};

/// Connection settings for a scoring server.
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub timeout: Duration,
    /// Number of retries after the first attempt.
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub context_limit: usize,
    /// Context tokens carried into each window of a chunked request.
    pub window_overlap: usize,
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpBackendConfig {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff_base: Duration::from_millis(100),
            context_limit: 2048,
            window_overlap: 64,
        }
    }
}

/// Scoring backend that talks to an inference server over HTTP.
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireScoreRequest<'a> {
    prefix: &'a [String],
    target: &'a [String],
}

#[derive(Deserialize)]
struct WireScoreResponse {
    nll: Vec<f64>,
}

#[derive(Serialize)]
struct WireTokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct WireTokenizeResponse {
    tokens: Vec<String>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                message: format!("failed to build HTTP client: {e}"),
                status: None,
                retryable: false,
            })?;
        Ok(HttpBackend { config, client })
    }

    pub fn endpoint(&self) -> &str {
        &self.config.endpoint
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    /// POSTs `body` to `path`, retrying transient failures with exponential
    /// backoff. Returns the response body on 2xx.
    fn post_with_retries<B: Serialize>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<String, BackendError> {
        let url = self.url(path);
        let mut attempt: u32 = 0;
        loop {
            let outcome = self.client.post(&url).json(body).send();
            match outcome {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return response.text().map_err(|e| BackendError::Transport {
                            message: format!("failed to read response body: {e}"),
                            status: Some(status.as_u16()),
                            retryable: false,
                        });
                    }
                    let transient = status.is_server_error();
                    if transient && attempt < self.config.max_retries {
                        self.backoff(attempt);
                        attempt += 1;
                        continue;
                    }
                    return Err(BackendError::Transport {
                        message: format!("server returned {status}"),
                        status: Some(status.as_u16()),
                        retryable: transient && self.config.max_retries == 0,
                    });
                }
                Err(err) => {
                    let transient = err.is_timeout() || err.is_connect() || err.is_request();
                    if transient && attempt < self.config.max_retries {
                        self.backoff(attempt);
                        attempt += 1;
                        continue;
                    }
                    let exhausted = attempt >= self.config.max_retries;
                    return Err(BackendError::Transport {
                        message: if exhausted && self.config.max_retries > 0 {
                            format!("{err} (after {attempt} retries)")
                        } else {
                            err.to_string()
                        },
                        status: None,
                        retryable: transient && self.config.max_retries == 0,
                    });
                }
            }
        }
    }

    fn backoff(&self, attempt: u32) {
        let factor = 1u32 << attempt.min(16);
        std::thread::sleep(self.config.backoff_base * factor);
    }
}

impl PplBackend for HttpBackend {
    fn tokenize(&self, text: &str) -> Result<Vec<String>, BackendError> {
        let body = self.post_with_retries("tokenize", &WireTokenizeRequest { text })?;
        let parsed: WireTokenizeResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::Protocol(format!("bad tokenize response: {e}")))?;
        Ok(parsed.tokens)
    }

    fn context_limit(&self) -> usize {
        self.config.context_limit
    }

    fn window_overlap(&self) -> usize {
        self.config.window_overlap
    }

    fn score(&self, request: &ScoreRequest) -> Result<Vec<ScoredToken>, BackendError> {
        if request.target.is_empty() {
            return Err(BackendError::InvalidRequest(
                "target must contain at least one token".into(),
            ));
        }
        if request.total_len() > self.config.context_limit {
            return Err(BackendError::Capacity {
                requested: request.total_len(),
                limit: self.config.context_limit,
            });
        }
        let body = self.post_with_retries(
            "score",
            &WireScoreRequest {
                prefix: &request.prefix,
                target: &request.target,
            },
        )?;
        let parsed: WireScoreResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::Protocol(format!("bad score response: {e}")))?;
        if parsed.nll.len() != request.target.len() {
            return Err(BackendError::Protocol(format!(
                "score count mismatch: sent {} target tokens, received {} scores",
                request.target.len(),
                parsed.nll.len()
            )));
        }
        let mut scored = Vec::with_capacity(request.target.len());
        for (position, (token, nll)) in request.target.iter().zip(parsed.nll.iter()).enumerate() {
            if nll.is_nan() {
                return Err(BackendError::Protocol(format!(
                    "score at position {position} is NaN"
                )));
            }
            scored.push(ScoredToken {
                token: token.clone(),
                position,
                nll: nll.clamp(0.0, MAX_NLL),
            });
        }
        Ok(scored)
    }
}
