//! Blocking JSON-over-HTTP transport shared by the remote embedding and
//! generation backends.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    pub url: String,
    pub timeout_ms: u64,
    /// Extra attempts after the first one fails.
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000".into(),
            timeout_ms: 30_000,
            retries: 2,
            max_in_flight: 8,
        }
    }
}

/// Counting gate bounding concurrent requests.
struct Gate {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(cap: usize) -> Self {
        Self {
            available: Mutex::new(cap.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

pub(crate) struct JsonTransport {
    client: reqwest::blocking::Client,
    base_url: String,
    retries: u32,
    gate: Gate,
}

enum Failure {
    Timeout,
    Retryable(String),
    Fatal(String),
}

impl JsonTransport {
    pub(crate) fn new(settings: &HttpSettings) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(settings.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("cannot build http client: {e}")))?;
        Ok(Self {
            client,
            base_url: settings.url.trim_end_matches('/').to_string(),
            retries: settings.retries,
            gate: Gate::new(settings.max_in_flight),
        })
    }

    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let _permit = self.gate.acquire();
        let url = format!("{}{}", self.base_url, path);
        let attempts = self.retries + 1;
        let mut last = Failure::Retryable(String::new());
        for attempt in 1..=attempts {
            match self.try_post(&url, body) {
                Ok(resp) => return Ok(resp),
                Err(Failure::Fatal(message)) => {
                    return Err(Error::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(failure) => {
                    tracing::debug!(%url, attempt, "request failed, retrying");
                    last = failure;
                }
            }
        }
        Err(match last {
            Failure::Timeout => Error::Timeout { attempts },
            Failure::Retryable(message) | Failure::Fatal(message) => Error::Transport { attempts, message },
        })
    }

    fn try_post<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R, Failure> {
        let resp = self.client.post(url).json(body).send().map_err(|e| {
            if e.is_timeout() {
                Failure::Timeout
            } else {
                Failure::Retryable(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(Failure::Retryable(format!("{url} returned {status}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(format!("{url} returned {status}")));
        }
        resp.json::<R>().map_err(|e| {
            if e.is_timeout() {
                Failure::Timeout
            } else {
                Failure::Fatal(format!("bad response body from {url}: {e}"))
            }
        })
    }
}
