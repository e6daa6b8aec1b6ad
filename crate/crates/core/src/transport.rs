//! JSON-over-HTTP plumbing shared by the external captioner, perturber and generator.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("POST {url} failed after {attempts} attempt(s): {message}")]
    Unreachable {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("POST {url} returned HTTP {status}")]
    Status { url: String, status: u16, body: String },
}

impl TransportError {
    /// Body returned by the service, if any.
    pub fn payload(&self) -> Option<&str> {
        match self {
            TransportError::Status { body, .. } => Some(body),
            TransportError::Unreachable { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub timeout_secs: f64,
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            timeout_secs: 120.0,
            retries: 2,
            max_in_flight: 4,
        }
    }
}

/// A JSON POST endpoint. Implemented over HTTP, and by in-process stubs in tests.
pub trait Transport: Send + Sync {
    /// Returns the response body of a 2xx reply.
    fn post_json(&self, url: &str, body: &Value) -> Result<String, TransportError>;
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut current = self.current.lock().expect("limit lock");
        while *current >= self.max {
            current = self.freed.wait(current).expect("limit lock");
        }
        *current += 1;
        InFlightGuard { limit: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().expect("limit lock")
    }
}

pub struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut current = self.limit.current.lock().expect("limit lock");
        *current -= 1;
        self.limit.freed.notify_one();
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
    retries: u32,
    limit: Arc<InFlightLimit>,
}

impl HttpTransport {
    pub fn new(config: &TransportConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs.max(0.001))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            retries: config.retries,
            limit: Arc::new(InFlightLimit::new(config.max_in_flight)),
        }
    }

    pub fn limit(&self) -> &InFlightLimit {
        &self.limit
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, body: &Value) -> Result<String, TransportError> {
        let _slot = self.limit.acquire();
        let mut last = String::new();
        for attempt in 1..=self.retries + 1 {
            match self.agent.post(url).send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    let text = response.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return Ok(text);
                    }
                    // 4xx is the caller's fault; retrying cannot help.
                    if status < 500 || attempt == self.retries + 1 {
                        return Err(TransportError::Status {
                            url: url.to_string(),
                            status,
                            body: text,
                        });
                    }
                    last = format!("HTTP {status}");
                }
                Err(err) => last = err.to_string(),
            }
        }
        Err(TransportError::Unreachable {
            url: url.to_string(),
            attempts: self.retries + 1,
            message: last,
        })
    }
}

pub fn join_url(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path.trim_start_matches('/'))
}
